//! Command-line surface: one subcommand per protocol stage.
//!
//! Every subcommand takes `--config <json>`, `--out <dir>` and an optional
//! `--seed`, which overrides `XRSS_SEED`, which overrides the configured
//! seed. Relative paths inside a config are taken relative to the working
//! directory. Exit status is 0 on success, 1 for usage and validation
//! errors, 2 for runtime failures.

use crate::adapters::{
    grid_to_csv, output_scores, run_grid, classification_grid, FeatureSet, GridConfig, LabeledFeatures, SegConfig,
    SegSet, TaskKind, TrainedAdapter, TrainedSegDecoder,
};
use crate::audit::{
    cross_group_eval, localization_accuracy, make_group_splits, transfer_eval, AttentionMap, BiasReport,
    DEFAULT_FOLDS, BIAS_JSON, BIAS_MATRIX,
};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io::{extract_features, load_image, load_label_map, load_manifest, save_png, DatasetManifest, FeatureCache, Split};
use crate::metrics::{
    auprc_macro, auroc_macro, bootstrap_ci, dice_macro, macro_accuracy, pearson_r, r_squared, reports_from_json,
    reports_to_csv, smape, write_reports, ClassValue, MetricReport,
};
use crate::pretrain::{pretrain_run, RunConfig, RunOptions, TrainState, CHECKPOINT_FILE, LOSS_LOG};
use crate::rng::resolve_seed;
use crate::synth::shapes_dataset;
use crate::tensor::Tensor;
use crate::vit::{write_atomic, Checkpoint};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const FEATURES_FILE: &str = "features.bin";
pub const GRID_FILE: &str = "grid.csv";
pub const ADAPTER_FILE: &str = "adapter.bin";
pub const SEG_GRID_FILE: &str = "seg_grid.csv";
pub const SEG_DECODER_FILE: &str = "seg_decoder.bin";
pub const TRANSFER_FILE: &str = "transfer.json";
pub const LOCALIZATION_FILE: &str = "localization.json";

#[derive(Parser, Debug)]
#[command(name = "xrss", version, about = "Self-supervised ViT pretraining and frozen-feature evaluation")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Seed overriding XRSS_SEED and the configured value.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-supervised pretraining of the backbone.
    Pretrain(Common),
    /// Encode every manifest image once into a feature cache.
    ExtractFeatures(Common),
    /// Grid-search a classification or regression adapter.
    TrainAdapter(Common),
    /// Learning-rate search for the segmentation decoder.
    TrainSeg(Common),
    /// Score a trained adapter or decoder with bootstrap intervals.
    Evaluate(Common),
    /// Cross-group training/testing matrix with rank-sum tests.
    BiasAudit(Common),
    /// Score a frozen adapter on internal and external data.
    TransferEval(Common),
    /// Export attentive-pooling maps and localization accuracy.
    AttentionMaps(Common),
    /// Render tables from a finished bias-audit or evaluate directory.
    Report(Common),
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{}", summary);
            0
        }
        Err(e) => {
            eprintln!("error: {}", e);
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Pretrain(c) => pretrain(&c),
        Command::ExtractFeatures(c) => extract(&c),
        Command::TrainAdapter(c) => train_adapter_cmd(&c),
        Command::TrainSeg(c) => train_seg(&c),
        Command::Evaluate(c) => evaluate(&c),
        Command::BiasAudit(c) => bias_audit(&c),
        Command::TransferEval(c) => transfer(&c),
        Command::AttentionMaps(c) => attention_maps(&c),
        Command::Report(c) => report(&c),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read config {}: {}", path.display(), e)))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {}", path.display(), e)))
}

fn seed_for(c: &Common, configured: u64) -> Result<u64> {
    let seed = resolve_seed(c.seed, configured).map_err(Error::invalid)?;
    log::info!("seed {}", seed);
    Ok(seed)
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    Ok(&c.out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Rows of `split` joined to their cached features.
struct Joined {
    features: FeatureSet,
    rows: Vec<usize>,
}

fn join(cache: &FeatureCache, manifest: &DatasetManifest, split: Split) -> Result<Joined> {
    let by_id: HashMap<&str, usize> = cache.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let rows = manifest.split(split);
    let idx = rows
        .iter()
        .map(|&r| {
            let id = manifest.rows[r].id();
            by_id.get(id.as_str()).copied().ok_or_else(|| Error::invalid(format!("{} is missing from the feature cache", id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Joined { features: cache.feature_set(&idx)?, rows })
}

fn labeled(cache: &FeatureCache, manifest: &DatasetManifest, split: Split) -> Result<(LabeledFeatures, Vec<usize>)> {
    let j = join(cache, manifest, split)?;
    if j.rows.is_empty() {
        return Err(Error::invalid(format!("the {} split is empty", split)));
    }
    let width = manifest.label_width().ok_or_else(|| Error::invalid("manifest rows carry no labels"))?;
    let mut t = Vec::with_capacity(j.rows.len() * width);
    for &r in &j.rows {
        let l = manifest.rows[r]
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} has no labels", manifest.rows[r].id())))?;
        t.extend_from_slice(l);
    }
    Ok((LabeledFeatures::new(j.features, Tensor::new([j.rows.len(), width], t)?)?, j.rows))
}

fn class_names(given: &Option<Vec<String>>, width: usize) -> Result<Vec<String>> {
    match given {
        Some(n) if n.len() != width => {
            Err(Error::invalid(format!("{} class names for {} outputs", n.len(), width)))
        }
        Some(n) => Ok(n.clone()),
        None => Ok((0..width).map(|i| format!("class{}", i)).collect()),
    }
}

fn default_true() -> bool {
    true
}

fn default_bootstrap() -> usize {
    1000
}

fn default_level() -> f64 {
    0.95
}

fn default_test() -> Split {
    Split::Test
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct SyntheticShapes {
    count: usize,
    size: usize,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct PretrainJob {
    /// Images from the train split of this manifest.
    manifest: Option<PathBuf>,
    /// Procedural shapes instead of a manifest.
    synthetic: Option<SyntheticShapes>,
    #[serde(default)]
    run: Option<RunConfig>,
    /// Continue from `<out>/checkpoint.bin` when present.
    #[serde(default = "default_true")]
    resume: bool,
}

fn pretrain(c: &Common) -> Result<String> {
    let job: PretrainJob = read_config(&c.config)?;
    let mut cfg = job.run.unwrap_or_else(RunConfig::desk);
    cfg.seed = seed_for(c, cfg.seed)?;
    cfg.validate()?;
    let images: Vec<GrayImage> = match (&job.manifest, &job.synthetic) {
        (Some(path), None) => {
            let m = load_manifest(path)?;
            m.split(Split::Train).iter().map(|&r| load_image(&m.rows[r].image)).collect::<Result<_>>()?
        }
        (None, Some(s)) => shapes_dataset(s.count, s.size, cfg.seed).into_iter().map(|(im, _)| im).collect(),
        _ => return Err(Error::invalid("set exactly one of `manifest` and `synthetic`")),
    };
    let dir = out_dir(c)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let resume = if job.resume && ck_path.exists() {
        let (saved, state) = TrainState::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
        if saved != cfg {
            return Err(Error::invalid("existing checkpoint was written with a different run config"));
        }
        log::info!("resuming at iteration {}", state.iter);
        Some(state)
    } else {
        None
    };
    write_text(&dir.join("run_config.json"), &cfg.to_json()?)?;
    let out = pretrain_run(&cfg, &images, RunOptions { out_dir: Some(dir.to_path_buf()), resume, stop_at: None })?;
    let last = out.log.last().map_or(f64::NAN, |r| r.total);
    Ok(format!(
        "pretrain: {} images, {} iterations, final loss {:.4}, checkpoint {}, log {}",
        images.len(),
        out.state.iter,
        last,
        ck_path.display(),
        dir.join(LOSS_LOG).display()
    ))
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct ExtractJob {
    checkpoint: PathBuf,
    manifest: PathBuf,
    /// Square encoding size; defaults to the global crop size.
    resolution: Option<usize>,
}

fn extract(c: &Common) -> Result<String> {
    let job: ExtractJob = read_config(&c.config)?;
    seed_for(c, 0)?;
    let (cfg, state) = TrainState::from_checkpoint(&Checkpoint::load(&job.checkpoint)?)?;
    let manifest = load_manifest(&job.manifest)?;
    let resolution = job.resolution.unwrap_or(cfg.augment.global_size);
    let cache = extract_features(&cfg.vit, &state.teacher_backbone(), &manifest, resolution)?;
    let path = out_dir(c)?.join(FEATURES_FILE);
    cache.save(&path)?;
    Ok(format!(
        "extract-features: {} images at {}px, grid {}x{}, dim {} -> {}",
        cache.len(),
        resolution,
        cache.grid.0,
        cache.grid.1,
        cache.cls_dim,
        path.display()
    ))
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct TrainAdapterJob {
    features: PathBuf,
    manifest: PathBuf,
    task: TaskKind,
    #[serde(default)]
    grid: GridConfig,
    /// Restrict the search to `attentive` or `average` pooling cells.
    pooling: Option<String>,
    /// Independent replicates, seeded `seed, seed + 1, ...`.
    #[serde(default = "one")]
    replicates: usize,
    #[serde(default)]
    seed: u64,
}

fn one() -> usize {
    1
}

fn replicate_seeds(base: u64, n: usize) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::invalid("replicates must be positive"));
    }
    Ok((0..n as u64).map(|i| base.wrapping_add(i)).collect())
}

fn train_adapter_cmd(c: &Common) -> Result<String> {
    let job: TrainAdapterJob = read_config(&c.config)?;
    let seed = seed_for(c, job.seed)?;
    if job.task == TaskKind::Segmentation {
        return Err(Error::invalid("segmentation uses the train-seg subcommand"));
    }
    let cache = FeatureCache::load(&job.features)?;
    let manifest = load_manifest(&job.manifest)?;
    let (train, _) = labeled(&cache, &manifest, Split::Train)?;
    let (val, _) = labeled(&cache, &manifest, Split::Val)?;
    let mut cells = classification_grid(job.task, train.outputs())?;
    if let Some(p) = &job.pooling {
        cells.retain(|c| c.pooling.to_string().starts_with(p.as_str()));
        if cells.is_empty() {
            return Err(Error::invalid(format!("no grid cell uses pooling `{}`", p)));
        }
    }
    let search = run_grid(&train, &val, &cells, &replicate_seeds(seed, job.replicates)?, &job.grid)?;
    let dir = out_dir(c)?;
    write_text(&dir.join(GRID_FILE), &grid_to_csv(&search.table)?)?;
    for a in &search.best {
        a.save(&dir.join(format!("adapter_seed{}.bin", a.seed)))?;
    }
    let best = &search.best[0];
    best.save(&dir.join(ADAPTER_FILE))?;
    Ok(format!(
        "train-adapter: {} cells x {} seeds, best {} depth {} lr {} wd {}, val {} {:.4} -> {}",
        cells.len(),
        search.best.len(),
        best.spec.pooling,
        best.spec.depth,
        best.spec.lr,
        best.spec.wd,
        search.metric,
        best.val_score,
        dir.join(ADAPTER_FILE).display()
    ))
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct TrainSegJob {
    features: PathBuf,
    manifest: PathBuf,
    classes: usize,
    #[serde(default)]
    seg: SegConfig,
    #[serde(default)]
    seed: u64,
}

fn seg_set(cache: &FeatureCache, manifest: &DatasetManifest, split: Split, classes: usize) -> Result<SegSet> {
    let j = join(cache, manifest, split)?;
    if j.rows.is_empty() {
        return Err(Error::invalid(format!("the {} split is empty", split)));
    }
    let mut size = None;
    let mut masks = Vec::with_capacity(j.rows.len());
    for &r in &j.rows {
        let row = &manifest.rows[r];
        let path = row.mask.as_ref().ok_or_else(|| Error::invalid(format!("{} has no mask", row.id())))?;
        let (w, h, m) = load_label_map(path)?;
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(Error::invalid(format!("mask {} differs in size from the others", path.display())));
        }
        masks.push(m);
    }
    SegSet::new(j.features, masks, size.expect("nonempty split"), classes)
}

fn train_seg(c: &Common) -> Result<String> {
    let job: TrainSegJob = read_config(&c.config)?;
    let seed = seed_for(c, job.seed)?;
    let cache = FeatureCache::load(&job.features)?;
    let manifest = load_manifest(&job.manifest)?;
    let train = seg_set(&cache, &manifest, Split::Train, job.classes)?;
    let val = seg_set(&cache, &manifest, Split::Val, job.classes)?;
    let search = crate::adapters::train_seg_decoder(&train, &val, &job.seg, seed)?;
    let dir = out_dir(c)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lr", "val_mdice"])?;
    for (lr, d) in &search.table {
        w.serialize((lr, d))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join(SEG_GRID_FILE), &bytes)?;
    search.best.save(&dir.join(SEG_DECODER_FILE))?;
    Ok(format!(
        "train-seg: {} learning rates, best lr {} val mDice {:.4} -> {}",
        search.table.len(),
        search.best.lr,
        search.best.val_mdice,
        dir.join(SEG_DECODER_FILE).display()
    ))
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct EvaluateJob {
    features: PathBuf,
    manifest: PathBuf,
    /// Adapter or segmentation decoder checkpoint.
    model: PathBuf,
    #[serde(default = "default_test")]
    split: Split,
    classes: Option<Vec<String>>,
    /// Segmentation only: number of mask classes.
    #[serde(default)]
    mask_classes: Option<usize>,
    #[serde(default = "default_bootstrap")]
    bootstrap: usize,
    #[serde(default = "default_level")]
    level: f64,
    #[serde(default)]
    seed: u64,
}

fn with_bootstrap<F>(r: MetricReport, n: usize, stat: F, b: usize, level: f64, seed: u64) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if b == 0 {
        return Ok(r);
    }
    let ci = bootstrap_ci(n, stat, b, level, seed)?;
    Ok(r.with_ci(ci.low, ci.high, "bootstrap_percentile", b))
}

fn bool_rows(targets: &Tensor, c: usize) -> Vec<Vec<bool>> {
    targets.data().chunks(c).map(|r| r.iter().map(|&v| v == 1.0).collect()).collect()
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Test-set reports for a classification or regression adapter.
fn adapter_reports(
    adapter: &TrainedAdapter,
    set: &LabeledFeatures,
    names: &[String],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let out = adapter.predict(&set.features)?;
    let n = set.features.len();
    let c = set.outputs();
    let mut reports = Vec::new();
    match adapter.spec.task {
        TaskKind::Multilabel | TaskKind::Multiclass => {
            let scores = output_scores(adapter.spec.task, &out);
            let labels = bool_rows(&set.targets, c);
            for (name, f) in [("auroc", auroc_macro as fn(&[Vec<f64>], &[Vec<bool>]) -> _), ("auprc", auprc_macro)] {
                let m = f(&scores, &labels)?;
                m.warn_undefined(name, &names);
                let mut r = MetricReport::point(name, m.mean);
                r.per_class = names.iter().zip(m.per_class).map(|(n, v)| ClassValue { name: n.clone(), value: v }).collect();
                let stat = |idx: &[usize]| Ok(f(&pick(&scores, idx), &pick(&labels, idx))?.mean);
                reports.push(with_bootstrap(r, n, stat, b, level, seed)?);
            }
            if adapter.spec.task == TaskKind::Multiclass {
                let argmax = |r: &Vec<f64>| (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b });
                let pred: Vec<usize> = scores.iter().map(argmax).collect();
                let gt: Vec<usize> = labels.iter().map(|l| l.iter().position(|&v| v).unwrap_or(0)).collect();
                let r = MetricReport::point("macro_accuracy", macro_accuracy(&pred, &gt)?);
                let stat = |idx: &[usize]| macro_accuracy(&pick(&pred, idx), &pick(&gt, idx));
                reports.push(with_bootstrap(r, n, stat, b, level, seed)?);
            }
        }
        TaskKind::Regression => {
            let rows: Vec<Vec<f64>> = out.data().chunks(c).map(<[f64]>::to_vec).collect();
            let gt: Vec<Vec<f64>> = set.targets.data().chunks(c).map(<[f64]>::to_vec).collect();
            type Metric = fn(&[f64], &[f64]) -> Result<f64>;
            for (name, f) in [("smape", smape as Metric), ("pearson_r", pearson_r), ("r_squared", r_squared)] {
                let flat = |idx: &[usize]| -> Result<f64> {
                    let p: Vec<f64> = idx.iter().flat_map(|&i| rows[i].clone()).collect();
                    let g: Vec<f64> = idx.iter().flat_map(|&i| gt[i].clone()).collect();
                    f(&p, &g)
                };
                let all: Vec<usize> = (0..n).collect();
                reports.push(with_bootstrap(MetricReport::point(name, flat(&all)?), n, flat, b, level, seed)?);
            }
        }
        TaskKind::Segmentation => return Err(Error::invalid("adapter checkpoint has a segmentation task")),
    }
    Ok(reports)
}

fn evaluate(c: &Common) -> Result<String> {
    let job: EvaluateJob = read_config(&c.config)?;
    let seed = seed_for(c, job.seed)?;
    let cache = FeatureCache::load(&job.features)?;
    let manifest = load_manifest(&job.manifest)?;
    let ck = Checkpoint::load(&job.model)?;
    let (n, reports) = if ck.meta["kind"] == "seg_decoder" {
        let dec = TrainedSegDecoder::from_checkpoint(&ck)?;
        let classes = job.mask_classes.unwrap_or(dec.decoder.classes);
        let set = seg_set(&cache, &manifest, job.split, classes)?;
        let pred = dec.predict(&set.features)?;
        let per: Vec<f64> = pred.iter().zip(&set.masks).map(|(p, m)| dice_macro(p, m, classes)).collect::<Result<_>>()?;
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        let stat = |idx: &[usize]| Ok(idx.iter().map(|&i| per[i]).sum::<f64>() / idx.len() as f64);
        let r = with_bootstrap(MetricReport::point("mdice", mean), per.len(), stat, job.bootstrap, job.level, seed)?;
        (per.len(), vec![r])
    } else {
        let adapter = TrainedAdapter::from_checkpoint(&ck)?;
        let (set, _) = labeled(&cache, &manifest, job.split)?;
        let names = class_names(&job.classes, set.outputs())?;
        (set.features.len(), adapter_reports(&adapter, &set, &names, job.bootstrap, job.level, seed)?)
    };
    let dir = out_dir(c)?;
    write_reports(dir, &reports)?;
    let parts: Vec<String> = reports.iter().map(|r| format!("{} {:.4}", r.metric, r.point)).collect();
    Ok(format!("evaluate: {} {} rows, {} -> {}", n, job.split, parts.join(", "), dir.join("metrics.json").display()))
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct BiasAuditJob {
    features: PathBuf,
    manifest: PathBuf,
    /// `sex` or `age`.
    group_key: String,
    #[serde(default = "default_task")]
    task: TaskKind,
    #[serde(default = "default_folds")]
    folds: usize,
    /// Rows per group subset; defaults to the smallest group size.
    subset_size: Option<usize>,
    /// Fixed adapter; when absent the grid is searched on train/val first.
    spec: Option<crate::adapters::AdapterSpec>,
    #[serde(default)]
    grid: GridConfig,
    #[serde(default)]
    seed: u64,
}

fn default_task() -> TaskKind {
    TaskKind::Multilabel
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn grouped(
    cache: &FeatureCache,
    manifest: &DatasetManifest,
    split: Split,
    key: &str,
) -> Result<(LabeledFeatures, Vec<String>)> {
    let (set, rows) = labeled(cache, manifest, split)?;
    let mut keep = Vec::new();
    let mut groups = Vec::new();
    for (i, &r) in rows.iter().enumerate() {
        if let Some(g) = manifest.rows[r].group(key)? {
            keep.push(i);
            groups.push(g);
        }
    }
    if keep.len() < rows.len() {
        log::warn!("{} {} rows lack the {} attribute and are skipped", rows.len() - keep.len(), split, key);
    }
    Ok((set.subset(&keep)?, groups))
}

fn bias_audit(c: &Common) -> Result<String> {
    let job: BiasAuditJob = read_config(&c.config)?;
    let seed = seed_for(c, job.seed)?;
    let cache = FeatureCache::load(&job.features)?;
    let manifest = load_manifest(&job.manifest)?;
    let (train, train_groups) = grouped(&cache, &manifest, Split::Train, &job.group_key)?;
    let (test, test_groups) = grouped(&cache, &manifest, Split::Test, &job.group_key)?;
    let spec = match job.spec {
        Some(s) => s,
        None => {
            let (val, _) = labeled(&cache, &manifest, Split::Val)?;
            let cells = classification_grid(job.task, train.outputs())?;
            run_grid(&train, &val, &cells, &[seed], &job.grid)?.best[0].spec
        }
    };
    spec.validate()?;
    let splits = make_group_splits(&train_groups, job.folds, job.subset_size, seed)?;
    let r = cross_group_eval(&train, &splits, spec, &job.grid, &test, &test_groups)?;
    let dir = out_dir(c)?;
    r.write(dir)?;
    let pooled = r.pooled.as_ref().map_or("n/a".to_string(), |p| format!("{:.4}", p.p));
    Ok(format!(
        "bias-audit: {} groups, {} folds of {} rows, {} comparisons, pooled p {} -> {}",
        r.groups.len(),
        r.folds,
        r.subset_size,
        r.comparisons.len(),
        pooled,
        dir.join(BIAS_MATRIX).display()
    ))
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Domain {
    features: PathBuf,
    manifest: PathBuf,
    classes: Vec<String>,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct TransferJob {
    model: PathBuf,
    internal: Domain,
    external: Domain,
    /// External class name to internal class name.
    mapping: BTreeMap<String, String>,
    #[serde(default = "default_test")]
    split: Split,
    #[serde(default)]
    seed: u64,
}

fn transfer(c: &Common) -> Result<String> {
    let job: TransferJob = read_config(&c.config)?;
    seed_for(c, job.seed)?;
    let adapter = TrainedAdapter::load(&job.model)?;
    let load = |d: &Domain| -> Result<LabeledFeatures> {
        let cache = FeatureCache::load(&d.features)?;
        Ok(labeled(&cache, &load_manifest(&d.manifest)?, job.split)?.0)
    };
    let internal = load(&job.internal)?;
    let external = load(&job.external)?;
    let r = transfer_eval(&adapter, &internal, &job.internal.classes, &external, &job.external.classes, &job.mapping)?;
    let dir = out_dir(c)?;
    write_text(&dir.join(TRANSFER_FILE), &serde_json::to_string_pretty(&r)?)?;
    write_reports(dir, &[r.internal.clone(), r.external.clone()])?;
    Ok(format!(
        "transfer-eval: internal auroc {:.4}, external auroc {:.4}, gap {:.4} -> {}",
        r.internal.point,
        r.external.point,
        r.gap,
        dir.join(TRANSFER_FILE).display()
    ))
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct AttentionJob {
    model: PathBuf,
    features: PathBuf,
    manifest: PathBuf,
    #[serde(default = "default_test")]
    split: Split,
    /// Finding name per attention head (head k serves output k).
    findings: Option<Vec<String>>,
    /// Write one PNG per image and finding.
    #[serde(default = "default_true")]
    png: bool,
    #[serde(default)]
    seed: u64,
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
}

fn attention_maps(c: &Common) -> Result<String> {
    let job: AttentionJob = read_config(&c.config)?;
    seed_for(c, job.seed)?;
    let adapter = TrainedAdapter::load(&job.model)?;
    let cache = FeatureCache::load(&job.features)?;
    let manifest = load_manifest(&job.manifest)?;
    let j = join(&cache, &manifest, job.split)?;
    let maps = adapter
        .attention_maps(&j.features)?
        .ok_or_else(|| Error::invalid("the adapter uses average pooling and has no attention maps"))?;
    let (n, heads, rows, cols) = {
        let s = maps.shape();
        (s[0], s[1], s[2], s[3])
    };
    let findings = class_names(&job.findings, heads)?;
    let dir = out_dir(c)?;
    if job.png {
        std::fs::create_dir_all(dir.join("maps")).map_err(|e| Error::io(dir, e))?;
    }
    let mut all = Vec::with_capacity(n * heads);
    let mut boxes = Vec::new();
    for (i, &r) in j.rows.iter().enumerate() {
        let row = &manifest.rows[r];
        for (h, finding) in findings.iter().enumerate() {
            let at = (i * heads + h) * rows * cols;
            let map = Tensor::new([rows, cols], maps.data()[at..at + rows * cols].to_vec())?;
            if job.png {
                let peak = map.data().iter().cloned().fold(0.0, f64::max);
                let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
                let img = GrayImage::new(cols, rows, map.data().iter().map(|v| v * scale).collect())?;
                save_png(&img, &dir.join("maps").join(format!("{}_{}.png", file_stem(&row.image), finding)), false)?;
            }
            all.push(AttentionMap { image_id: row.id(), finding: finding.clone(), map });
        }
        if !row.boxes.is_empty() {
            // boxes are in source pixels; rescale to the grid footprint of
            // one-pixel patches
            let img = load_image(&row.image)?;
            let (sx, sy) = (cols as f64 / img.width() as f64, rows as f64 / img.height() as f64);
            for mut b in row.box_annotations() {
                b.validate((img.width(), img.height()))?;
                b.x *= sx;
                b.width *= sx;
                b.y *= sy;
                b.height *= sy;
                boxes.push(b);
            }
        }
    }
    let loc = if boxes.is_empty() {
        None
    } else {
        let l = localization_accuracy(&all, &boxes, 1)?;
        write_text(&dir.join(LOCALIZATION_FILE), &serde_json::to_string_pretty(&l)?)?;
        Some(l)
    };
    Ok(format!(
        "attention-maps: {} images x {} findings on a {}x{} grid{}",
        n,
        heads,
        rows,
        cols,
        loc.map_or(String::new(), |l| format!(", localization accuracy {:.4}", l.macro_accuracy))
    ))
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct ReportJob {
    /// A bias-audit or evaluate output directory.
    input: PathBuf,
}

fn report(c: &Common) -> Result<String> {
    let job: ReportJob = read_config(&c.config)?;
    seed_for(c, 0)?;
    let dir = out_dir(c)?;
    if job.input.join(BIAS_JSON).exists() {
        let r = BiasReport::read(&job.input)?;
        let csv = r.matrix_csv()?;
        write_text(&dir.join(BIAS_MATRIX), &csv)?;
        print!("{}", csv);
        return Ok(format!(
            "report: {}x{} bias matrix over {} folds -> {}",
            r.train_keys.len(),
            r.groups.len(),
            r.folds,
            dir.join(BIAS_MATRIX).display()
        ));
    }
    let path = job.input.join("metrics.json");
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let reports = reports_from_json(&text)?;
        let csv = reports_to_csv(&reports)?;
        write_text(&dir.join("metrics.csv"), &csv)?;
        print!("{}", csv);
        return Ok(format!("report: {} metrics -> {}", reports.len(), dir.join("metrics.csv").display()));
    }
    Err(Error::invalid(format!("{} holds neither {} nor metrics.json", job.input.display(), BIAS_JSON)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["xrss"]), 1);
        assert_eq!(run(["xrss", "frobnicate"]), 1);
        assert_eq!(run(["xrss", "evaluate", "--config", "c.json", "--out", "o", "--bogus"]), 1);
        assert_eq!(run(["xrss", "--help"]), 0);
    }

    #[test]
    fn missing_config_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("absent.json");
        let out = dir.path().join("o");
        let argv: Vec<OsString> = vec!["xrss".into(), "report".into(), "--config".into(), cfg.into(), "--out".into(), out.into()];
        assert_eq!(run(argv), 1);
    }
}
