use super::config::RunConfig;
use super::engine::{init_state, pretrain_run, RunOptions, StepLosses};
use crate::adapters::{fit_linear_probe, ProbeConfig};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::params::ParamStore;
use crate::synth::shapes_dataset;
use crate::vit::{encode_batch, ViTConfig};
use serde::{Deserialize, Serialize};

/// Frozen-CLS probe accuracies after pretraining on the shapes dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub images: usize,
    pub iterations: usize,
    /// Probe on the teacher backbone after pretraining.
    pub trained_accuracy: f64,
    /// Same probe on the initialization the run started from.
    pub random_accuracy: f64,
    pub pretrain_seconds: f64,
    pub last: Option<StepLosses>,
}

fn cls_features(images: &[(GrayImage, usize)], cfg: &ViTConfig, params: &ParamStore) -> Result<Vec<Vec<f64>>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let share = images.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(share)
            .map(|chunk| {
                s.spawn(move || {
                    let refs: Vec<&GrayImage> = chunk.iter().map(|(img, _)| img).collect();
                    Ok(encode_batch(&refs, cfg, params)?.into_iter().map(|o| o.cls).collect())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("encoder worker panicked")).collect()
    });
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

fn probe_accuracy(train: &[(GrayImage, usize)], test: &[(GrayImage, usize)], cfg: &ViTConfig, params: &ParamStore) -> Result<f64> {
    let labels = |s: &[(GrayImage, usize)]| s.iter().map(|p| p.1).collect::<Vec<_>>();
    let probe = fit_linear_probe(&cls_features(train, cfg, params)?, &labels(train), &ProbeConfig::default())?;
    Ok(probe.accuracy(&cls_features(test, cfg, params)?, &labels(test)))
}

/// Pretrains on the first 80% of `n_images` shape images (image size
/// `cfg.augment.global_size`) and probes frozen CLS features on the rest,
/// against the same probe on the untrained initialization.
pub fn toy_ssl_run(cfg: &RunConfig, n_images: usize, data_seed: u64) -> Result<ToyReport> {
    if n_images < 10 {
        return Err(Error::invalid("the toy run needs at least 10 images"));
    }
    let data = shapes_dataset(n_images, cfg.augment.global_size, data_seed);
    let (train, test) = data.split_at(n_images * 4 / 5);
    let images: Vec<GrayImage> = train.iter().map(|(img, _)| img.clone()).collect();
    let start = std::time::Instant::now();
    let out = pretrain_run(cfg, &images, RunOptions::default())?;
    let pretrain_seconds = start.elapsed().as_secs_f64();
    let random = init_state(cfg)?.teacher_backbone();
    Ok(ToyReport {
        images: n_images,
        iterations: out.state.iter,
        trained_accuracy: probe_accuracy(train, test, &cfg.vit, &out.state.teacher_backbone())?,
        random_accuracy: probe_accuracy(train, test, &cfg.vit, &random)?,
        pretrain_seconds,
        last: out.log.last().cloned(),
    })
}
