//! Synthetic end-to-end runs: generate a dataset, train on its training
//! split, detect on the held-out split and score against the planted
//! intervals.

use crate::data_io::{generate_synthetic, SynthConfig};
use crate::error::Result;
use crate::evaluation::{evaluate, EvalReport, DEFAULT_IOU_THRESHOLDS};
use crate::localization::{detect_dataset, Detection, LocalizeConfig};
use crate::trainer::{train, LossRecord, TrainConfig};
use crate::model::Checkpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    pub thresholds: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            localize: LocalizeConfig::default(),
            thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
    pub detections: Vec<Detection>,
}

pub fn run_synthetic(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let data = generate_synthetic(&cfg.synth)?;
    let train_set = data.train_dataset();
    let test_set = data.test_dataset();
    let outcome = train::<f64>(&train_set, &cfg.train)?;
    let detections: Vec<Detection> = detect_dataset(
        &test_set,
        &outcome.params,
        &cfg.train.forward,
        &cfg.train.loss.blocks,
        &cfg.localize,
    )?
    .into_iter()
    .flat_map(|v| v.detections)
    .collect();
    let report = evaluate(
        &detections,
        &data.test_ground_truth(),
        &cfg.thresholds,
        &data.classes,
    )?;
    Ok(ExperimentResult {
        report,
        checkpoint: outcome.checkpoint(),
        trace: outcome.trace,
        detections,
    })
}
