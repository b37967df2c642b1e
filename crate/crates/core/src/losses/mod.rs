//! Training objectives and their analytic gradients.
//!
//! The total loss is the mean classification loss over the batch videos
//! plus `λ` times the mean metric loss over the batch's class groups.

mod classification;
mod metric;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::VideoLabelSet;
use crate::error::{Error, Result};
use crate::model::{ForwardCache, ModelParams};
use crate::numeric::{Matrix, Real};

pub use classification::{
    bbce_loss, bce_loss, block_class_prob, classification_loss, classification_loss_grad,
    kmax_mean, partition_blocks, top_k_indices, video_class_prob, video_class_probs, BlockConfig,
    BlockPartition, ClassLoss, Tail, VideoClassification,
};
pub use metric::{
    aggregate_features, attention_weights, class_distance, metric_loss, metric_pair_distances,
    AggregatedFeatures, ClassBatchGroup, ClassMetric, DistanceKind, MetricKind, NORM_EPS,
};

use metric::{group_loss_grad, GroupInput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub class_loss: ClassLoss,
    pub metric: MetricKind,
    pub distance: DistanceKind,
    /// Weight `λ` of the metric term.
    pub lambda: f64,
    /// Margin `α`.
    pub alpha: f64,
    pub blocks: BlockConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_loss: ClassLoss::Bbce,
            metric: MetricKind::Triplet,
            distance: DistanceKind::Ours,
            lambda: 1.0,
            alpha: 3.0,
            blocks: BlockConfig::default(),
        }
    }
}

/// A batch member: its forward cache and video-level labels.
#[derive(Debug, Clone, Copy)]
pub struct BatchVideo<'a, T> {
    pub cache: &'a ForwardCache<T>,
    pub labels: &'a VideoLabelSet,
}

#[derive(Debug, Clone)]
pub struct LossReport<T> {
    /// Classification term (balanced cross-entropy unless configured otherwise).
    pub bbce: T,
    pub metric: T,
    pub total: T,
    pub grads: ModelParams<T>,
    /// Groups that contributed to the metric term.
    pub groups_used: usize,
}

/// Loss and gradients for every parameter block.
///
/// Videos with fewer than two segments are left out of the metric term;
/// a group left with fewer than two members is skipped for this step.
pub fn total_loss_and_grads<T: Real>(
    batch: &[BatchVideo<'_, T>],
    groups: &[ClassBatchGroup],
    params: &ModelParams<T>,
    cfg: &LossConfig,
) -> Result<LossReport<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let num_classes = params.num_classes();
    if cfg.metric != MetricKind::None
        && cfg.distance == DistanceKind::Custom
        && params.metric_factors.is_none()
    {
        return Err(Error::Config(
            "custom distance needs metric factors in the model".into(),
        ));
    }
    for v in batch {
        if v.cache.num_classes() != num_classes || v.cache.u.cols() != params.dim() {
            return Err(Error::shape("forward cache does not match model".to_string()));
        }
    }

    let classified: Vec<VideoClassification<T>> = batch
        .par_iter()
        .map(|v| {
            let labels = v.labels.indicator(num_classes);
            classification_loss_grad(&v.cache.s, &labels, cfg.class_loss, &cfg.blocks)
        })
        .collect::<Result<_>>()?;
    let inv_b = T::one() / T::from_count(batch.len());
    let bbce = classified.iter().map(|c| c.loss).sum::<T>() * inv_b;

    let lambda = T::lit(cfg.lambda);
    let alpha = T::lit(cfg.alpha);
    let need_metric_grad = cfg.metric != MetricKind::None && lambda != T::zero();
    let mut grads = params.zeros_like();
    let mut metric_sum = T::zero();
    let mut groups_used = 0usize;
    let mut d_u: Vec<Option<Matrix<T>>> = vec![None; batch.len()];
    let mut d_s_metric: Vec<Option<Matrix<T>>> = vec![None; batch.len()];
    let mut metric_param_grads: Vec<(usize, Vec<T>)> = Vec::new();

    if cfg.metric != MetricKind::None {
        for g in groups {
            if g.class >= num_classes {
                return Err(Error::invalid(format!("group class {} out of range", g.class)));
            }
            let mut members = Vec::with_capacity(g.members.len());
            for &m in &g.members {
                let v = batch
                    .get(m)
                    .ok_or_else(|| Error::invalid(format!("group member {m} not in batch")))?;
                if !v.labels.contains(g.class) {
                    return Err(Error::invalid(format!(
                        "batch video {m} grouped under class {} it does not contain",
                        g.class
                    )));
                }
                if v.cache.n() >= 2 {
                    members.push(m);
                }
            }
            if members.len() < 2 {
                continue;
            }
            let inputs: Vec<GroupInput<'_, T>> = members
                .iter()
                .map(|&m| GroupInput {
                    u: &batch[m].cache.u,
                    s_col: batch[m].cache.s.column(g.class),
                })
                .collect();
            let factor;
            let (class_metric, metric_len) = match cfg.distance {
                DistanceKind::Ours => (
                    ClassMetric::Projection(params.class_weight.row(g.class)),
                    params.dim(),
                ),
                DistanceKind::Cosine => (ClassMetric::Cosine, 0),
                DistanceKind::Euclidean => (ClassMetric::Euclidean, 0),
                DistanceKind::Custom => {
                    factor = params.metric_factor(g.class).expect("checked above");
                    let len = factor.rows() * factor.cols();
                    (ClassMetric::Factored(&factor), len)
                }
            };
            let term = group_loss_grad(
                &inputs,
                &class_metric,
                metric_len,
                alpha,
                cfg.metric,
                need_metric_grad,
            )?;
            metric_sum = metric_sum + term.loss;
            groups_used += 1;
            for (pos, du, dcol) in term.member_grads {
                let m = members[pos];
                let cache = batch[m].cache;
                d_u[m]
                    .get_or_insert_with(|| Matrix::zeros(cache.n(), params.dim()))
                    .add_scaled(&du, T::one());
                let ds = d_s_metric[m].get_or_insert_with(|| Matrix::zeros(cache.n(), num_classes));
                for (i, &x) in dcol.iter().enumerate() {
                    ds[(i, g.class)] = ds[(i, g.class)] + x;
                }
            }
            if metric_len > 0 {
                metric_param_grads.push((g.class, term.metric_grad));
            }
        }
    }

    let metric = if groups_used > 0 {
        metric_sum / T::from_count(groups_used)
    } else {
        T::zero()
    };
    let metric_scale = if groups_used > 0 && need_metric_grad {
        lambda / T::from_count(groups_used)
    } else {
        T::zero()
    };

    let per_video: Vec<ModelParams<T>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut d_s = classified[i].d_s.clone();
            for x in d_s.as_mut_slice() {
                *x = *x * inv_b;
            }
            if metric_scale != T::zero() {
                if let Some(extra) = &d_s_metric[i] {
                    d_s.add_scaled(extra, metric_scale);
                }
            }
            let du = d_u[i].as_ref().filter(|_| metric_scale != T::zero()).map(|m| {
                m.map(|x| x * metric_scale)
            });
            let mut g = params.zeros_like();
            v.cache.backward(params, &d_s, du.as_ref(), &mut g);
            g
        })
        .collect();
    for g in &per_video {
        grads.accumulate(g);
    }
    if metric_scale != T::zero() {
        let d = params.dim();
        for (class, mg) in metric_param_grads {
            match cfg.distance {
                DistanceKind::Ours => {
                    for (w, &x) in grads.class_weight.row_mut(class).iter_mut().zip(&mg) {
                        *w = *w + metric_scale * x;
                    }
                }
                DistanceKind::Custom => {
                    let r = params.metric_rank();
                    let f = grads.metric_factors.as_mut().expect("checked above");
                    let block = &mut f.as_mut_slice()[class * r * d..(class + 1) * r * d];
                    for (w, &x) in block.iter_mut().zip(&mg) {
                        *w = *w + metric_scale * x;
                    }
                }
                DistanceKind::Cosine | DistanceKind::Euclidean => {}
            }
        }
    }

    let total = bbce + lambda * metric;
    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("loss or gradient".into()));
    }
    Ok(LossReport {
        bbce,
        metric,
        total,
        grads,
        groups_used,
    })
}
