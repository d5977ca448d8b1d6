use super::config::RunConfig;
use super::optim::{clip_global_norm, AdamHyper, AdamW};
use crate::augment::{make_views, ViewSet};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::params::ParamStore;
use crate::rng::stream;
use crate::ssl::{
    dino_loss, ema_update, koleo_loss, mask_patches, masked_cross_entropy, update_center, MaskPlan, ProjectionHead,
    Temperatures,
};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{forward_batch, init_backbone, Checkpoint, BACKBONE};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DINO_HEAD: &str = "dino_head.";
pub const IBOT_HEAD: &str = "ibot_head.";

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_VIEW: u64 = 3;
const TAG_MASK: u64 = 4;

/// Student, teacher, centers and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub center_dino: Vec<f64>,
    pub center_ibot: Vec<f64>,
    pub opt: AdamW,
    /// Number of completed steps.
    pub iter: usize,
}

/// Per-step scalars, one row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub iter: usize,
    pub lr: f64,
    pub wd: f64,
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub total: f64,
}

fn heads(cfg: &RunConfig) -> Result<(ProjectionHead, ProjectionHead)> {
    let d = cfg.vit.embed_dim;
    Ok((
        ProjectionHead::new(DINO_HEAD, d, cfg.head())?,
        ProjectionHead::new(IBOT_HEAD, d, cfg.head())?,
    ))
}

/// Fresh state; the teacher starts as an exact copy of the student.
pub fn init_state(cfg: &RunConfig) -> Result<TrainState> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[TAG_INIT]);
    let mut student = init_backbone(&cfg.vit, &mut rng)?;
    let (dh, ih) = heads(cfg)?;
    student.extend(dh.init(&mut rng));
    student.extend(ih.init(&mut rng));
    let opt = AdamW::new(&student, AdamHyper::default());
    Ok(TrainState {
        teacher: student.clone(),
        student,
        center_dino: vec![0.0; cfg.prototypes],
        center_ibot: vec![0.0; cfg.prototypes],
        opt,
        iter: 0,
    })
}

impl TrainState {
    /// Backbone parameters of the teacher, the network used for evaluation.
    pub fn teacher_backbone(&self) -> ParamStore {
        self.teacher.filter_prefix(BACKBONE)
    }

    pub fn student_backbone(&self) -> ParamStore {
        self.student.filter_prefix(BACKBONE)
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut params = ParamStore::new();
        let groups = [
            ("student.", &self.student),
            ("teacher.", &self.teacher),
            ("adam.m.", &self.opt.m),
            ("adam.v.", &self.opt.v),
        ];
        for (prefix, store) in groups {
            for (k, t) in store.iter() {
                params.insert(format!("{}{}", prefix, k), t.clone());
            }
        }
        let k = self.center_dino.len();
        params.insert("center.dino", Tensor::from_parts(vec![k], self.center_dino.clone()));
        params.insert("center.ibot", Tensor::from_parts(vec![k], self.center_ibot.clone()));
        Checkpoint {
            meta: serde_json::json!({
                "kind": "pretrain",
                "config": cfg,
                "vit": cfg.vit,
                "iter": self.iter,
                "adam_step": self.opt.step,
                "adam": self.opt.hyper,
            }),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, TrainState)> {
        let bad = |d: &str| Error::ParamMismatch(format!("not a pretraining checkpoint: {}", d));
        let cfg: RunConfig = serde_json::from_value(ck.meta.get("config").cloned().ok_or_else(|| bad("no config"))?)?;
        let iter = ck.meta.get("iter").and_then(|v| v.as_u64()).ok_or_else(|| bad("no iter"))? as usize;
        let step = ck.meta.get("adam_step").and_then(|v| v.as_u64()).ok_or_else(|| bad("no adam_step"))?;
        let hyper: AdamHyper = serde_json::from_value(ck.meta.get("adam").cloned().ok_or_else(|| bad("no adam"))?)?;
        let strip = |prefix: &str| {
            let mut s = ParamStore::new();
            for (k, t) in ck.params.iter() {
                if let Some(rest) = k.strip_prefix(prefix) {
                    s.insert(rest.to_string(), t.clone());
                }
            }
            s
        };
        let student = strip("student.");
        let teacher = strip("teacher.");
        let m = strip("adam.m.");
        let v = strip("adam.v.");
        if !student.same_layout(&teacher) || !student.same_layout(&m) || !student.same_layout(&v) {
            return Err(bad("inconsistent parameter groups"));
        }
        let center_dino = ck.params.get("center.dino")?.data().to_vec();
        let center_ibot = ck.params.get("center.ibot")?.data().to_vec();
        Ok((
            cfg,
            TrainState {
                student,
                teacher,
                center_dino,
                center_ibot,
                opt: AdamW { hyper, step, m, v },
                iter,
            },
        ))
    }
}

/// Flat row indices of masked patches for a batch: image `b`'s position
/// `i` is row `b·P + i`.
fn masked_rows(plans: &[MaskPlan]) -> Vec<usize> {
    let mut rows = Vec::new();
    for (b, p) in plans.iter().enumerate() {
        let n = p.mask.len();
        rows.extend(p.indices().into_iter().map(|i| b * n + i));
    }
    rows
}

fn patch_logits(
    g: &mut Graph,
    bound: &crate::params::Bound,
    head: &ProjectionHead,
    patches: Var,
    rows: &[usize],
) -> Result<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let s = g.shape(patches).to_vec();
    let flat = g.reshape(patches, &[s[0] * s[1], s[2]])?;
    let picked = g.select_rows(flat, rows)?;
    Ok(Some(head.forward(g, bound, picked)?))
}

/// Mask plans for both global views of every image in the batch.
pub fn sample_masks<R: Rng + ?Sized>(
    cfg: &RunConfig,
    batch: &[ViewSet],
    rng: &mut R,
) -> Result<Vec<Vec<MaskPlan>>> {
    let mut out = vec![Vec::with_capacity(batch.len()); 2];
    for vs in batch {
        for (gi, view) in vs.globals.iter().enumerate() {
            let (rows, cols) = cfg.vit.grid_for(view.image.width(), view.image.height())?;
            let active = rng.gen::<f64>() < cfg.mask.probability;
            let ratio = rng.gen_range(cfg.mask.ratio_min..=cfg.mask.ratio_max);
            let plan = if active {
                mask_patches(rows, cols, ratio, rng)?
            } else {
                MaskPlan::empty(rows, cols)
            };
            out[gi].push(plan);
        }
    }
    Ok(out)
}

/// One optimization step on a batch of view sets with given mask plans
/// (`plans[view][image]`).
pub fn train_step(state: &mut TrainState, cfg: &RunConfig, batch: &[ViewSet], plans: &[Vec<MaskPlan>]) -> Result<StepLosses> {
    if batch.len() < 2 {
        return Err(Error::invalid("a training batch needs at least two images"));
    }
    if batch.iter().any(|v| v.globals.len() != 2) || plans.len() != 2 || plans.iter().any(|p| p.len() != batch.len()) {
        return Err(Error::invalid("each view set needs two global views with one mask plan each"));
    }
    let n_local = batch[0].locals.len();
    if batch.iter().any(|v| v.locals.len() != n_local) {
        return Err(Error::invalid("view sets in a batch must have the same number of local views"));
    }
    let iter = state.iter;
    let lr = cfg.lr_schedule().value(iter)?;
    let wd = cfg.wd_schedule().value(iter)?;
    let temps = Temperatures {
        student: cfg.teacher.student_temp,
        teacher: cfg.teacher_temp_schedule().value(iter)?,
    };
    let ema = cfg.ema_schedule().value(iter)?;
    let (dino_head, ibot_head) = heads(cfg)?;
    let b = batch.len();

    // Teacher: unmasked global views, no gradients.
    let mut tg = Graph::new();
    let tb = state.teacher.bind(&mut tg, false);
    let mut teacher_cls = Vec::with_capacity(2);
    let mut teacher_patch = Vec::new();
    for gi in 0..2 {
        let imgs: Vec<&GrayImage> = batch.iter().map(|v| &v.globals[gi].image).collect();
        let out = forward_batch(&mut tg, &tb, &cfg.vit, &imgs, None, false)?;
        let logits = dino_head.forward(&mut tg, &tb, out.cls)?;
        teacher_cls.push(tg.value(logits).clone());
        if let Some(p) = patch_logits(&mut tg, &tb, &ibot_head, out.patches, &masked_rows(&plans[gi]))? {
            teacher_patch.push(tg.value(p).clone());
        }
    }
    drop(tg);

    // Student: masked globals plus locals.
    let mut g = Graph::new();
    let sb = state.student.bind(&mut g, true);
    let mut student_views = Vec::with_capacity(2 + n_local);
    let mut student_cls = Vec::with_capacity(2);
    let mut student_patch = Vec::new();
    for gi in 0..2 {
        let imgs: Vec<&GrayImage> = batch.iter().map(|v| &v.globals[gi].image).collect();
        let masks: Vec<Vec<bool>> = plans[gi].iter().map(|p| p.mask.clone()).collect();
        let out = forward_batch(&mut g, &sb, &cfg.vit, &imgs, Some(&masks), false)?;
        student_cls.push(out.cls);
        student_views.push(dino_head.forward(&mut g, &sb, out.cls)?);
        if let Some(p) = patch_logits(&mut g, &sb, &ibot_head, out.patches, &masked_rows(&plans[gi]))? {
            student_patch.push(p);
        }
    }
    if n_local > 0 {
        let imgs: Vec<&GrayImage> = (0..n_local)
            .flat_map(|l| batch.iter().map(move |v| &v.locals[l].image))
            .collect();
        let out = forward_batch(&mut g, &sb, &cfg.vit, &imgs, None, false)?;
        let logits = dino_head.forward(&mut g, &sb, out.cls)?;
        for l in 0..n_local {
            student_views.push(g.slice(logits, 0, l * b, b)?);
        }
    }

    let dino = dino_loss(&mut g, &student_views, &teacher_cls, &state.center_dino, temps)?;
    let teacher_rows = if teacher_patch.is_empty() {
        None
    } else {
        let k = cfg.prototypes;
        let data: Vec<f64> = teacher_patch.iter().flat_map(|t| t.data().iter().copied()).collect();
        Some(Tensor::new([data.len() / k, k], data)?)
    };
    let ibot = match &teacher_rows {
        Some(t) => {
            let s = if student_patch.len() == 1 { student_patch[0] } else { g.concat(&student_patch, 0)? };
            masked_cross_entropy(&mut g, s, t, &state.center_ibot, temps)?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };
    let k0 = koleo_loss(&mut g, student_cls[0])?;
    let k1 = koleo_loss(&mut g, student_cls[1])?;
    let ksum = g.add(k0, k1)?;
    let koleo = g.scale(ksum, 0.5)?;

    let w = &cfg.weights;
    let a = g.scale(dino, w.dino)?;
    let c = g.scale(ibot, w.ibot)?;
    let d = g.scale(koleo, w.koleo)?;
    let ac = g.add(a, c)?;
    let total = g.add(ac, d)?;

    let losses = StepLosses {
        iter,
        lr,
        wd,
        dino: g.value(dino).item()?,
        ibot: g.value(ibot).item()?,
        koleo: g.value(koleo).item()?,
        total: g.value(total).item()?,
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }

    let mut grads_raw = g.backward(total)?;
    let mut grads = BTreeMap::new();
    for (name, &var) in sb.iter() {
        if let Some(t) = grads_raw.take(var) {
            grads.insert(name.clone(), t);
        }
    }
    drop(g);
    clip_global_norm(&mut grads, cfg.grad_clip)?;
    state.opt.update(&mut state.student, &grads, lr, wd)?;
    ema_update(&mut state.teacher, &state.student, ema)?;

    let k = cfg.prototypes;
    let both: Vec<f64> = teacher_cls.iter().flat_map(|t| t.data().iter().copied()).collect();
    let both = Tensor::new([both.len() / k, k], both)?;
    state.center_dino = update_center(&state.center_dino, &both, cfg.teacher.center_momentum)?;
    if let Some(t) = &teacher_rows {
        state.center_ibot = update_center(&state.center_ibot, t, cfg.teacher.center_momentum)?;
    }
    state.iter += 1;
    Ok(losses)
}

/// Dataset indices for step `iter`: consecutive slices of per-epoch
/// shuffles, so any step can be reconstructed from the seed alone.
pub fn batch_indices(seed: u64, iter: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let pos = iter * batch + j;
            let epoch = pos / n;
            if cache.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream(seed, &[TAG_EPOCH, epoch as u64]));
                cache = Some((epoch, perm));
            }
            cache.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

/// Views and mask plans for step `iter`.
pub fn make_batch(cfg: &RunConfig, images: &[GrayImage], iter: usize) -> Result<(Vec<ViewSet>, Vec<Vec<MaskPlan>>)> {
    let idx = batch_indices(cfg.seed, iter, cfg.batch_size, images.len());
    let batch = idx
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let mut rng = stream(cfg.seed, &[TAG_VIEW, iter as u64, j as u64]);
            make_views(&images[i], cfg.augment.n_local, &cfg.augment, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let plans = sample_masks(cfg, &batch, &mut stream(cfg.seed, &[TAG_MASK, iter as u64]))?;
    Ok((batch, plans))
}

/// Options for [`pretrain_run`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where checkpoints and the loss log go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<TrainState>,
    /// Stop after this many completed steps (defaults to the configured total).
    pub stop_at: Option<usize>,
}

pub struct RunOutput {
    pub state: TrainState,
    pub log: Vec<StepLosses>,
}

pub const LOSS_LOG: &str = "loss_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Runs (or continues) pretraining over `images`.
pub fn pretrain_run(cfg: &RunConfig, images: &[GrayImage], opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("pretraining needs a nonempty dataset"));
    }
    let mut state = match opts.resume {
        Some(s) => s,
        None => init_state(cfg)?,
    };
    let stop = opts.stop_at.unwrap_or(cfg.iterations).min(cfg.iterations);
    let mut log = Vec::new();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut previous = read_loss_log(&dir.join(LOSS_LOG)).unwrap_or_default();
        previous.retain(|r| r.iter < state.iter);
        write_loss_log(&dir.join(LOSS_LOG), &previous)?;
        log = previous;
    }
    let start = std::time::Instant::now();
    while state.iter < stop {
        let (batch, plans) = make_batch(cfg, images, state.iter)?;
        let row = train_step(&mut state, cfg, &batch, &plans)?;
        if row.iter % 50 == 0 {
            log::info!(
                "iter {} total {:.4} dino {:.4} ibot {:.4} koleo {:.4} ({:.0}s)",
                row.iter,
                row.total,
                row.dino,
                row.ibot,
                row.koleo,
                start.elapsed().as_secs_f64()
            );
        }
        log.push(row);
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0 {
                save_progress(dir, cfg, &state, &log)?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_progress(dir, cfg, &state, &log)?;
    }
    Ok(RunOutput { state, log })
}

fn save_progress(dir: &Path, cfg: &RunConfig, state: &TrainState, log: &[StepLosses]) -> Result<()> {
    state.to_checkpoint(cfg).save(&dir.join(CHECKPOINT_FILE))?;
    write_loss_log(&dir.join(LOSS_LOG), log)
}

pub fn write_loss_log(path: &Path, rows: &[StepLosses]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iter", "lr", "wd", "dino", "ibot", "koleo", "total"])?;
    for r in rows {
        w.serialize((r.iter, r.lr, r.wd, r.dino, r.ibot, r.koleo, r.total))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    crate::vit::write_atomic(path, &bytes)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepLosses>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}
