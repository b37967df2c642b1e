//! Finite-difference certification of the analytic loss gradients.
//!
//! Builds small random batches, evaluates the total loss with dropout off,
//! and compares every parameter block's analytic gradient with central
//! differences.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::data_io::VideoLabelSet;
use crate::error::{Error, Result};
use crate::losses::{
    aggregate_features, attention_weights, metric_pair_distances, partition_blocks,
    total_loss_and_grads, BatchVideo, BlockConfig, ClassBatchGroup, ClassLoss, ClassMetric,
    DistanceKind, LossConfig, MetricKind, Tail,
};
use crate::model::{forward_matrix, ClassifierInput, ForwardCache, ForwardConfig, ModelParams};
use crate::numeric::{finite_diff_grad, relative_error, Matrix, Rng};

/// Norm floor in the relative error, so blocks whose gradient vanishes
/// are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-8;

const DIMS: [usize; 2] = [4, 16];
const CLASS_COUNTS: [usize; 2] = [3, 5];
const LENGTHS: [usize; 2] = [8, 32];
const BATCH_VIDEOS: usize = 6;
/// Distance from a kink below which an instance is redrawn. Well above
/// the `h·|x|` a central difference can move an activation.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub instances_per_config: usize,
    pub seed: u64,
    pub h: f64,
    pub tolerance: f64,
    pub class_losses: Vec<ClassLoss>,
    pub metrics: Vec<MetricKind>,
    pub distances: Vec<DistanceKind>,
    pub lambda: f64,
    pub alpha: f64,
    pub kappa: f64,
    /// Must be zero: dropout masks make the loss non-deterministic.
    pub dropout: f64,
    pub metric_rank: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances_per_config: 20,
            seed: 0,
            h: 1e-6,
            tolerance: 1e-5,
            class_losses: vec![ClassLoss::Bbce, ClassLoss::Bce],
            metrics: vec![MetricKind::None, MetricKind::Contrastive, MetricKind::Triplet],
            distances: vec![
                DistanceKind::Ours,
                DistanceKind::Cosine,
                DistanceKind::Euclidean,
                DistanceKind::Custom,
            ],
            lambda: 1.0,
            alpha: 3.0,
            kappa: 4.0,
            dropout: 0.0,
            metric_rank: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigResult {
    pub class_loss: ClassLoss,
    pub metric: MetricKind,
    pub distance: DistanceKind,
    pub instances: usize,
    /// Largest relative error seen for each parameter block.
    pub block_errors: Vec<(String, f64)>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<ConfigResult>,
    /// With `λ = 0` the metric branch contributes exactly nothing.
    pub lambda_zero_exact: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.lambda_zero_exact && self.results.iter().all(|r| r.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.results
            .iter()
            .flat_map(|r| r.block_errors.iter().map(|&(_, e)| e))
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            write!(
                f,
                "{:<4} {:<11} {:<9} n={:<3}",
                format!("{:?}", r.class_loss).to_lowercase(),
                format!("{:?}", r.metric).to_lowercase(),
                format!("{:?}", r.distance).to_lowercase(),
                r.instances
            )?;
            for (name, e) in &r.block_errors {
                write!(f, "  {name}={e:.2e}")?;
            }
            writeln!(f, "  {}", if r.passed { "ok" } else { "FAIL" })?;
        }
        writeln!(
            f,
            "lambda=0 metric gradients exactly zero: {}",
            if self.lambda_zero_exact { "ok" } else { "FAIL" }
        )?;
        writeln!(
            f,
            "max relative error {:.3e} (tolerance {:.1e}): {}",
            self.max_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// A random batch with its labels and class groups.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: ModelParams<f64>,
    pub features: Vec<Matrix<f64>>,
    pub labels: Vec<VideoLabelSet>,
    pub groups: Vec<ClassBatchGroup>,
    pub forward: ForwardConfig,
    pub loss: LossConfig,
}

impl Instance {
    /// Instance `index` cycles through every (d, C, n) combination. Draws
    /// landing within [`KINK_MARGIN`] of a non-differentiable point are
    /// discarded and redrawn.
    pub fn random(index: usize, loss: LossConfig, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<Self> {
        for _ in 0..MAX_REDRAWS {
            let inst = Self::draw(index, loss, cfg, rng)?;
            if !inst.near_kink(KINK_MARGIN)? {
                return Ok(inst);
            }
        }
        Err(Error::OracleFailure(format!(
            "no kink-free instance after {MAX_REDRAWS} draws"
        )))
    }

    fn draw(index: usize, loss: LossConfig, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<Self> {
        let d = DIMS[index % 2];
        let c = CLASS_COUNTS[(index / 2) % 2];
        let n = LENGTHS[(index / 4) % 2];
        let mut params = ModelParams::init(d, c, rng)?;
        for b in params.class_bias.iter_mut().chain(params.embed_bias.iter_mut()) {
            *b = rng.uniform_in(-0.2, 0.2);
        }
        if loss.distance == DistanceKind::Custom {
            params = params.with_metric_factors(cfg.metric_rank, rng)?;
        }
        let mut features = Vec::with_capacity(BATCH_VIDEOS);
        let mut labels = Vec::with_capacity(BATCH_VIDEOS);
        for j in 0..BATCH_VIDEOS {
            let len = n - j % 3;
            let data = (0..len * d).map(|_| rng.normal()).collect();
            features.push(Matrix::from_vec(len, d, data)?);
            let mut set = VideoLabelSet::new();
            set.insert(j % c);
            if rng.uniform() < 0.5 {
                set.insert(rng.below(c));
            }
            labels.push(set);
        }
        let groups = (0..c)
            .map(|class| ClassBatchGroup {
                class,
                members: (0..BATCH_VIDEOS).filter(|&j| labels[j].contains(class)).collect(),
            })
            .filter(|g| !g.members.is_empty())
            .collect();
        Ok(Self {
            params,
            features,
            labels,
            groups,
            forward: ForwardConfig {
                kappa: cfg.kappa,
                dropout: 0.0,
                classifier_input: ClassifierInput::Embedded,
            },
            loss,
        })
    }

    /// Whether any ReLU input, clip input, top-k boundary or hinge lies
    /// within `margin` of its switching point.
    pub fn near_kink(&self, margin: f64) -> Result<bool> {
        let caches = self.caches(&self.params)?;
        let kappa = self.forward.kappa;
        for cache in &caches {
            if cache.pre_embed.as_slice().iter().any(|a| a.abs() < margin)
                || cache.pre_class.as_slice().iter().any(|p| (p.abs() - kappa).abs() < margin)
            {
                return Ok(true);
            }
            let blocks = self.loss.blocks;
            let part = partition_blocks(
                cache.n(),
                blocks.block_len.unwrap_or(cache.n()),
                blocks.k,
                blocks.tail,
            )?;
            for c in 0..cache.num_classes() {
                let col = cache.s.column(c);
                for &(a, b) in &part.ranges {
                    let mut v = col[a..=b].to_vec();
                    v.sort_by(|x, y| y.total_cmp(x));
                    if v.len() > part.k && v[part.k - 1] - v[part.k] < margin {
                        return Ok(true);
                    }
                }
            }
        }
        if self.loss.metric == MetricKind::None {
            return Ok(false);
        }
        for g in &self.groups {
            if g.members.len() < 2 {
                continue;
            }
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for &m in &g.members {
                let pi = attention_weights(&caches[m].s.column(g.class))?;
                let agg = aggregate_features(&caches[m].u, &pi)?;
                pos.push(agg.z_pos_norm);
                neg.push(agg.z_neg_norm);
            }
            let factor = self.params.metric_factor(g.class);
            let metric = match self.loss.distance {
                DistanceKind::Ours => ClassMetric::Projection(self.params.class_weight.row(g.class)),
                DistanceKind::Cosine => ClassMetric::Cosine,
                DistanceKind::Euclidean => ClassMetric::Euclidean,
                DistanceKind::Custom => match &factor {
                    Some(f) => ClassMetric::Factored(f),
                    None => return Err(Error::Config("custom distance without factors".into())),
                },
            };
            let (dp, dn) = metric_pair_distances(&pos, &neg, &metric)?;
            let hinge = match self.loss.metric {
                MetricKind::Triplet => dp - dn + self.loss.alpha,
                _ => self.loss.alpha - dn,
            };
            if hinge.abs() < margin {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn caches(&self, params: &ModelParams<f64>) -> Result<Vec<ForwardCache<f64>>> {
        let mut rng = Rng::new(0);
        self.features
            .iter()
            .map(|x| forward_matrix(x.clone(), params, &self.forward, false, &mut rng))
            .collect()
    }

    pub fn loss_and_grads(&self, params: &ModelParams<f64>) -> Result<(f64, ModelParams<f64>)> {
        let caches = self.caches(params)?;
        let batch: Vec<BatchVideo<'_, f64>> = caches
            .iter()
            .zip(&self.labels)
            .map(|(cache, labels)| BatchVideo { cache, labels })
            .collect();
        let r = total_loss_and_grads(&batch, &self.groups, params, &self.loss)?;
        Ok((r.total, r.grads))
    }

    /// Largest relative error per parameter block.
    pub fn block_errors(&self, h: f64) -> Result<Vec<(String, f64)>> {
        let (_, analytic) = self.loss_and_grads(&self.params)?;
        let theta = self.params.flatten();
        let mut probe = self.params.clone();
        let numeric = finite_diff_grad(
            |t: &[f64]| {
                probe.assign_flat(t)?;
                Ok(self.loss_and_grads(&probe)?.0)
            },
            &theta,
            h,
        )?;
        let mut numeric_params = self.params.zeros_like();
        numeric_params.assign_flat(&numeric)?;
        Ok(analytic
            .blocks()
            .into_iter()
            .zip(numeric_params.blocks())
            .map(|((name, a), (_, n))| (name.to_string(), relative_error(a, n, ERROR_FLOOR)))
            .collect())
    }
}

fn loss_config(class_loss: ClassLoss, metric: MetricKind, distance: DistanceKind, cfg: &GradcheckConfig) -> LossConfig {
    LossConfig {
        class_loss,
        metric,
        distance,
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        blocks: BlockConfig {
            block_len: Some(6),
            k: 3,
            tail: Tail::Merge,
        },
    }
}

/// With `λ = 0`, gradients must equal the metric-free ones bit for bit and
/// the metric factors must receive nothing.
fn lambda_zero_exact(cfg: &GradcheckConfig, rng: &mut Rng) -> Result<bool> {
    for (i, distance) in [DistanceKind::Ours, DistanceKind::Custom].into_iter().enumerate() {
        for metric in [MetricKind::Contrastive, MetricKind::Triplet] {
            let zero = LossConfig {
                lambda: 0.0,
                ..loss_config(ClassLoss::Bbce, metric, distance, cfg)
            };
            let inst = Instance::random(i, zero, cfg, rng)?;
            let (_, with) = inst.loss_and_grads(&inst.params)?;
            let plain = Instance {
                loss: LossConfig {
                    metric: MetricKind::None,
                    ..zero
                },
                ..inst.clone()
            };
            let (_, without) = plain.loss_and_grads(&inst.params)?;
            if with != without {
                return Ok(false);
            }
            if let Some(f) = &with.metric_factors {
                if f.as_slice().iter().any(|&x| x != 0.0) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.dropout != 0.0 {
        return Err(Error::Config(
            "gradient check needs dropout off: random masks make the loss non-deterministic".into(),
        ));
    }
    if cfg.instances_per_config == 0 {
        return Err(Error::Config("instances_per_config must be >= 1".into()));
    }
    if !(cfg.h > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::Config("h and tolerance must be > 0".into()));
    }
    let mut combos = Vec::new();
    for &l in &cfg.class_losses {
        for &m in &cfg.metrics {
            for &dist in &cfg.distances {
                combos.push((l, m, dist));
            }
        }
    }
    let root = Rng::new(cfg.seed);
    let results = combos
        .par_iter()
        .enumerate()
        .map(|(ci, &(class_loss, metric, distance))| {
            let loss = loss_config(class_loss, metric, distance, cfg);
            let per_instance = (0..cfg.instances_per_config)
                .into_par_iter()
                .map(|i| {
                    let mut rng = root.substream((ci as u64) << 20 | i as u64);
                    Instance::random(i, loss, cfg, &mut rng)?.block_errors(cfg.h)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut block_errors = per_instance[0].clone();
            for errs in &per_instance[1..] {
                for (acc, (_, e)) in block_errors.iter_mut().zip(errs) {
                    acc.1 = acc.1.max(*e);
                }
            }
            let passed = block_errors.iter().all(|&(_, e)| e < cfg.tolerance);
            Ok(ConfigResult {
                class_loss,
                metric,
                distance,
                instances: cfg.instances_per_config,
                block_errors,
                passed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lambda_zero_exact = lambda_zero_exact(cfg, &mut root.substream(u64::MAX >> 1))?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        results,
        lambda_zero_exact,
    })
}
