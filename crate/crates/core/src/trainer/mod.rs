//! Training loop: grouped batch sampling, forward and backward passes over
//! the batch, and Adam updates.

mod adam;
mod sampler;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::losses::{total_loss_and_grads, BatchVideo, DistanceKind, LossConfig, MetricKind};
use crate::model::{forward, Checkpoint, ForwardConfig, ModelParams};
use crate::numeric::{Real, Rng};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use sampler::{sample_batch, sample_segments, Batch, BatchSampler};

const STREAM_INIT: u64 = 0;
const STREAM_FACTORS: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_STEP_BASE: u64 = 1 << 32;
const MAX_BATCH_VIDEOS: u64 = 1 << 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub forward: ForwardConfig,
    pub loss: LossConfig,
    pub classes_per_batch: usize,
    pub videos_per_class: usize,
    pub max_segments: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rank of the per-class factors used by the custom distance.
    pub metric_rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            forward: ForwardConfig::default(),
            loss: LossConfig::default(),
            classes_per_batch: 4,
            videos_per_class: 5,
            max_segments: 300,
            epochs: 200,
            seed: 0,
            metric_rank: 4,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.videos_per_class
    }

    /// Steps per epoch: enough batches to cover the training set once.
    pub fn steps_per_epoch(&self, num_videos: usize) -> usize {
        num_videos.div_ceil(self.batch_size().max(1)).max(1)
    }

    fn uses_factors(&self) -> bool {
        self.loss.metric != MetricKind::None && self.loss.distance == DistanceKind::Custom
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        let f = &self.forward;
        if !(f.kappa > 0.0 && f.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be > 0, got {}", f.kappa)));
        }
        if !(0.0..1.0).contains(&f.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", f.dropout)));
        }
        let l = &self.loss;
        if !(l.lambda >= 0.0 && l.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", l.lambda)));
        }
        if !(l.alpha >= 0.0 && l.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", l.alpha)));
        }
        if l.blocks.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if l.blocks.block_len == Some(0) {
            return Err(Error::Config("block size must be >= 1".into()));
        }
        if self.classes_per_batch == 0 || self.videos_per_class == 0 {
            return Err(Error::Config("batch composition must be positive".into()));
        }
        if self.batch_size() as u64 > MAX_BATCH_VIDEOS {
            return Err(Error::Config(format!(
                "batch of {} videos exceeds {MAX_BATCH_VIDEOS}",
                self.batch_size()
            )));
        }
        if self.max_segments == 0 {
            return Err(Error::Config("max_segments must be >= 1".into()));
        }
        if self.uses_factors() && self.metric_rank == 0 {
            return Err(Error::Config("custom distance needs metric_rank >= 1".into()));
        }
        Ok(())
    }
}

/// One optimization step in the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub bbce: f64,
    pub metric: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub trace: Vec<LossRecord>,
    pub config: TrainConfig,
}

impl<T: Real> TrainOutcome<T> {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.cast(),
            kappa: self.config.forward.kappa,
            classifier_input: self.config.forward.classifier_input,
        }
    }
}

/// Initial parameters for `dataset` under `cfg`.
pub fn init_params<T: Real>(dataset: &Dataset, cfg: &TrainConfig) -> Result<ModelParams<T>> {
    let d = dataset
        .feature_dim()
        .ok_or_else(|| Error::Config("dataset has no videos".into()))?;
    let root = Rng::new(cfg.seed);
    let params: ModelParams<T> = ModelParams::init(d, dataset.num_classes(), &mut root.substream(STREAM_INIT))?;
    if cfg.uses_factors() {
        params.with_metric_factors(cfg.metric_rank, &mut root.substream(STREAM_FACTORS))
    } else {
        Ok(params)
    }
}

/// Trains from a fresh initialization.
///
/// Every random draw comes from a substream of `cfg.seed` keyed by its
/// purpose (and, for per-video draws, by step and batch position), and the
/// batch reduction order is fixed, so the result is reproducible bit for
/// bit regardless of thread count.
pub fn train<T: Real>(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with(dataset, cfg, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with<T: Real>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.num_classes() == 0 {
        return Err(Error::Config("dataset has no classes".into()));
    }
    let mut params = init_params::<T>(dataset, cfg)?;
    let mut state = AdamState::new(&params);
    let root = Rng::new(cfg.seed);
    let mut sampler_rng = root.substream(STREAM_SAMPLER);
    let mut sampler = BatchSampler::new(dataset, cfg.classes_per_batch, cfg.videos_per_class)?;
    let steps_per_epoch = cfg.steps_per_epoch(dataset.videos.len());
    let mut trace = Vec::with_capacity(cfg.epochs * steps_per_epoch);

    for epoch in 1..=cfg.epochs {
        for _ in 0..steps_per_epoch {
            let step = trace.len() + 1;
            let batch = sampler.next_batch(&mut sampler_rng);
            let caches = batch
                .videos
                .par_iter()
                .enumerate()
                .map(|(pos, &vi)| {
                    let tag = STREAM_STEP_BASE + step as u64 * MAX_BATCH_VIDEOS + pos as u64;
                    let mut rng = root.substream(tag);
                    let seq = sample_segments(&dataset.videos[vi].seq, cfg.max_segments, &mut rng)?;
                    forward(&seq, &params, &cfg.forward, true, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let members: Vec<BatchVideo<'_, T>> = caches
                .iter()
                .zip(&batch.videos)
                .map(|(cache, &vi)| BatchVideo {
                    cache,
                    labels: &dataset.videos[vi].labels,
                })
                .collect();
            let report = total_loss_and_grads(&members, &batch.groups, &params, &cfg.loss)?;
            adam_step(&mut params, &report.grads, &mut state, &cfg.adam)?;
            let record = LossRecord {
                step,
                epoch,
                bbce: report.bbce.to_f64().unwrap_or(f64::NAN),
                metric: report.metric.to_f64().unwrap_or(f64::NAN),
                total: report.total.to_f64().unwrap_or(f64::NAN),
            };
            on_step(&record);
            trace.push(record);
        }
    }
    Ok(TrainOutcome {
        params,
        trace,
        config: *cfg,
    })
}

pub fn format_loss_log(trace: &[LossRecord]) -> String {
    let mut out = String::from("step\tepoch\tbbce\tmetric\ttotal\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}",
            r.step, r.epoch, r.bbce, r.metric, r.total
        );
    }
    out
}

/// Tab-separated loss log with a header row.
pub fn write_loss_log(path: &Path, trace: &[LossRecord]) -> Result<()> {
    fs::write(path, format_loss_log(trace)).map_err(|e| Error::io(path, e))
}

/// Mean total loss per epoch, in epoch order.
pub fn epoch_means(trace: &[LossRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in trace {
        if out.len() < r.epoch {
            out.resize(r.epoch, (0.0, 0));
        }
        let e = &mut out[r.epoch - 1];
        e.0 += r.total;
        e.1 += 1;
    }
    out.into_iter()
        .filter(|&(_, n)| n > 0)
        .map(|(s, n)| s / n as f64)
        .collect()
}
