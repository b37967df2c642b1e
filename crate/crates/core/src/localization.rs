//! Turning segment activations into timestamped detections.
//!
//! Per class, segments with `σ(s) ≥ threshold` are kept and each maximal
//! run becomes one detection scored `q = max y + γ·ȳ`, where `ȳ` is the
//! video-level class probability.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::losses::{video_class_probs, BlockConfig};
use crate::model::{forward, ForwardCache, ForwardConfig, ModelParams};
use crate::numeric::{stable_sigmoid, Matrix, Real, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub class: String,
    pub start_s: f64,
    pub end_s: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub seg_threshold: f64,
    pub gamma: f64,
    /// When set, classes whose video-level probability falls below this
    /// value produce no detections.
    pub class_gate: Option<f64>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            seg_threshold: 0.5,
            gamma: 0.7,
            class_gate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub fps: f64,
    pub frames_per_segment: u32,
}

impl Timing {
    pub fn of(seq: &FeatureSequence) -> Self {
        Self {
            fps: seq.fps,
            frames_per_segment: seq.frames_per_segment,
        }
    }

    fn segment_seconds(&self) -> f64 {
        f64::from(self.frames_per_segment) / self.fps
    }
}

/// `y_i^c = σ(s_i^c)`.
pub fn segment_probs<T: Real>(cache: &ForwardCache<T>) -> Matrix<T> {
    cache.s.map(stable_sigmoid)
}

/// Maximal runs of `true`, as inclusive index ranges in temporal order.
pub fn connected_components(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len() - 1));
    }
    out
}

/// Detections for one video from segment probabilities (n×C) and
/// video-level probabilities (C).
pub fn localize_probs(
    video_id: &str,
    probs: &Matrix<f64>,
    video_probs: &[f64],
    timing: Timing,
    class_names: &[String],
    cfg: &LocalizeConfig,
) -> Result<Vec<Detection>> {
    if !(timing.fps > 0.0) || timing.frames_per_segment == 0 {
        return Err(Error::invalid("timing must be positive"));
    }
    if probs.cols() != class_names.len() || video_probs.len() != class_names.len() {
        return Err(Error::shape(format!(
            "{} score columns, {} video probabilities, {} class names",
            probs.cols(),
            video_probs.len(),
            class_names.len()
        )));
    }
    let seg = timing.segment_seconds();
    let mut out = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        if cfg.class_gate.is_some_and(|gate| video_probs[c] < gate) {
            continue;
        }
        let col = probs.column(c);
        let mask: Vec<bool> = col.iter().map(|&y| y >= cfg.seg_threshold).collect();
        for (s, e) in connected_components(&mask) {
            let peak = col[s..=e].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.push(Detection {
                video_id: video_id.to_string(),
                class: name.clone(),
                start_s: s as f64 * seg,
                end_s: (e + 1) as f64 * seg,
                confidence: peak + cfg.gamma * video_probs[c],
            });
        }
    }
    Ok(out)
}

pub fn localize<T: Real>(
    video_id: &str,
    cache: &ForwardCache<T>,
    video_probs: &[T],
    timing: Timing,
    class_names: &[String],
    cfg: &LocalizeConfig,
) -> Result<Vec<Detection>> {
    let probs: Matrix<f64> = segment_probs(cache).cast();
    let vp: Vec<f64> = video_probs.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    localize_probs(video_id, &probs, &vp, timing, class_names, cfg)
}

/// Inference output for one video.
#[derive(Debug, Clone)]
pub struct VideoDetections {
    pub video_id: String,
    pub detections: Vec<Detection>,
    pub segment_probs: Matrix<f64>,
    pub video_probs: Vec<f64>,
}

/// Evaluation-mode forward pass followed by [`localize`].
pub fn detect_video<T: Real>(
    seq: &FeatureSequence,
    params: &ModelParams<T>,
    forward_cfg: &ForwardConfig,
    blocks: &BlockConfig,
    class_names: &[String],
    cfg: &LocalizeConfig,
) -> Result<VideoDetections> {
    // dropout is off, so the stream is never drawn from
    let cache = forward(seq, params, forward_cfg, false, &mut Rng::new(0))?;
    let video_probs = video_class_probs(&cache.s, blocks)?;
    let detections = localize(&seq.video_id, &cache, &video_probs, Timing::of(seq), class_names, cfg)?;
    Ok(VideoDetections {
        video_id: seq.video_id.clone(),
        detections,
        segment_probs: segment_probs(&cache).cast(),
        video_probs: video_probs
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect(),
    })
}

/// [`detect_video`] over every video, in dataset order.
pub fn detect_dataset<T: Real>(
    dataset: &Dataset,
    params: &ModelParams<T>,
    forward_cfg: &ForwardConfig,
    blocks: &BlockConfig,
    cfg: &LocalizeConfig,
) -> Result<Vec<VideoDetections>> {
    dataset
        .videos
        .par_iter()
        .map(|v| detect_video(&v.seq, params, forward_cfg, blocks, &dataset.classes, cfg))
        .collect()
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.3}\t{:.3}\t{:.6}",
            d.video_id, d.class, d.start_s, d.end_s, d.confidence
        );
    }
    out
}

/// One record per line: `video_id, class, start_s, end_s, q`, tab-separated.
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad {what} {s:?}")))
        };
        let d = Detection {
            video_id: f[0].to_string(),
            class: f[1].to_string(),
            start_s: num(f[2], "start")?,
            end_s: num(f[3], "end")?,
            confidence: num(f[4], "confidence")?,
        };
        if d.start_s < 0.0 || d.end_s < d.start_s {
            return Err(err(format!("invalid interval [{}, {}]", d.start_s, d.end_s)));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

/// Per-segment probability trace for plotting: a header row, then
/// `segment_index` followed by `y` for every class.
pub fn write_trace(path: &Path, probs: &Matrix<f64>, class_names: &[String]) -> Result<()> {
    let mut out = String::from("segment");
    for c in class_names {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for i in 0..probs.rows() {
        let _ = write!(out, "{i}");
        for &y in probs.row(i) {
            let _ = write!(out, "\t{y:.6}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
