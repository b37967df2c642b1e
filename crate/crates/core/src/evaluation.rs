//! Detection scoring: temporal IoU, per-class average precision and mAP
//! over a list of IoU thresholds.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::Detection;

pub const DEFAULT_IOU_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSegment {
    pub video_id: String,
    pub class: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// `|a ∩ b| / |a ∪ b|` for closed intervals `(start, end)`.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s.is_finite() && e.is_finite() && s <= e) {
            return Err(Error::invalid(format!("invalid interval [{s}, {e}]")));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        // two identical points
        return Ok(if inter == 0.0 && a == b { 1.0 } else { 0.0 });
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

fn ranking(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.start_s.total_cmp(&b.start_s))
        .then_with(|| a.video_id.cmp(&b.video_id))
}

/// True-positive flags for `preds` in ranked order.
fn match_ranked(preds: &[&Detection], gts: &[&GroundTruthSegment], iou_thr: f64) -> Result<Vec<bool>> {
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(j);
    }
    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for &j in by_video.get(p.video_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            if matched[j] {
                continue;
            }
            let iou = temporal_iou((p.start_s, p.end_s), (gts[j].start_s, gts[j].end_s))?;
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= iou_thr => {
                matched[j] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    Ok(flags)
}

/// All-point interpolated AP from ranked true-positive flags.
fn interpolated_ap(flags: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.into_iter().zip(precision) {
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Average precision for one class. `None` when there is no ground truth.
///
/// Predictions are ranked by confidence (ties: earlier start, then video
/// id) and each is matched greedily to the unmatched ground truth of the
/// same video with the highest IoU, provided it reaches `iou_thr`.
pub fn match_and_ap(
    preds: &[Detection],
    gts: &[GroundTruthSegment],
    iou_thr: f64,
) -> Result<Option<f64>> {
    let p: Vec<&Detection> = preds.iter().collect();
    let g: Vec<&GroundTruthSegment> = gts.iter().collect();
    class_ap(p, &g, iou_thr)
}

fn class_ap(mut preds: Vec<&Detection>, gts: &[&GroundTruthSegment], iou_thr: f64) -> Result<Option<f64>> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {iou_thr} outside (0, 1]")));
    }
    if gts.is_empty() {
        return Ok(None);
    }
    preds.sort_by(|a, b| ranking(a, b));
    let flags = match_ranked(&preds, gts, iou_thr)?;
    Ok(Some(interpolated_ap(&flags, gts.len())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<String>,
    /// `ap[c][t]`; `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, one entry per threshold.
    pub map: Vec<f64>,
    pub average_map: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .classes
            .iter()
            .map(String::len)
            .chain(["average mAP".len()])
            .max()
            .unwrap_or(0);
        write!(f, "{:width$}", "class")?;
        for t in &self.thresholds {
            write!(f, "  IoU={t:<4.2}")?;
        }
        writeln!(f)?;
        for (name, row) in self.classes.iter().zip(&self.ap) {
            write!(f, "{name:width$}")?;
            for ap in row {
                match ap {
                    Some(v) => write!(f, "  {:>8.4}", v)?,
                    None => write!(f, "  {:>8}", "-")?,
                }
            }
            writeln!(f)?;
        }
        write!(f, "{:width$}", "mAP")?;
        for m in &self.map {
            write!(f, "  {m:>8.4}")?;
        }
        writeln!(f)?;
        writeln!(f, "{:width$}  {:>8.4}", "average mAP", self.average_map)
    }
}

/// Scores `detections` against `ground_truth` for every class in
/// `classes` at each IoU threshold.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruthSegment],
    thresholds: &[f64],
    classes: &[String],
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::invalid("no IoU thresholds"));
    }
    if let Some(t) = thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::invalid(format!("IoU threshold {t} outside (0, 1]")));
    }
    let index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let unknown: BTreeSet<String> = detections
        .iter()
        .map(|d| &d.class)
        .chain(ground_truth.iter().map(|g| &g.class))
        .filter(|c| !index.contains_key(c.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownClasses(unknown.into_iter().collect()));
    }
    let mut preds: Vec<Vec<&Detection>> = vec![Vec::new(); classes.len()];
    for d in detections {
        preds[index[d.class.as_str()]].push(d);
    }
    let mut gts: Vec<Vec<&GroundTruthSegment>> = vec![Vec::new(); classes.len()];
    for g in ground_truth {
        gts[index[g.class.as_str()]].push(g);
    }

    let ap: Vec<Vec<Option<f64>>> = (0..classes.len())
        .into_par_iter()
        .map(|c| {
            thresholds
                .iter()
                .map(|&t| class_ap(preds[c].clone(), &gts[c], t))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let map: Vec<f64> = (0..thresholds.len())
        .map(|t| {
            let vals: Vec<f64> = ap.iter().filter_map(|row| row[t]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        classes: classes.to_vec(),
        ap,
        map,
        average_map,
    })
}

/// Sorted, de-duplicated class names appearing in the ground truth.
pub fn ground_truth_classes(gts: &[GroundTruthSegment]) -> Vec<String> {
    gts.iter()
        .map(|g| g.class.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn format_ground_truth(gts: &[GroundTruthSegment]) -> String {
    let mut out = String::new();
    for g in gts {
        let _ = writeln!(out, "{}\t{}\t{:.3}\t{:.3}", g.video_id, g.class, g.start_s, g.end_s);
    }
    out
}

/// One segment per line: `video_id, class, start_s, end_s`, tab-separated.
pub fn write_ground_truth(path: &Path, gts: &[GroundTruthSegment]) -> Result<()> {
    fs::write(path, format_ground_truth(gts)).map_err(|e| Error::io(path, e))
}

pub fn parse_ground_truth(text: &str, path: &Path) -> Result<Vec<GroundTruthSegment>> {
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
        if f.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad {what} {s:?}")))
        };
        let g = GroundTruthSegment {
            video_id: f[0].to_string(),
            class: f[1].to_string(),
            start_s: num(f[2], "start")?,
            end_s: num(f[3], "end")?,
        };
        if g.start_s < 0.0 || g.end_s < g.start_s {
            return Err(err(format!("invalid interval [{}, {}]", g.start_s, g.end_s)));
        }
        out.push(g);
    }
    Ok(out)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthSegment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(&text, path)
}
