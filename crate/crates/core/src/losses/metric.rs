//! Class-specific metric learning on attention-aggregated video features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_norm, softmax_unchecked, Matrix, Real};

/// Norms below this get `NORM_EPS` added before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    None,
    Contrastive,
    #[default]
    Triplet,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "contrastive" => Ok(Self::Contrastive),
            "triplet" => Ok(Self::Triplet),
            _ => Err(Error::Config(format!(
                "metric must be none|contrastive|triplet, got {s:?}"
            ))),
        }
    }
}

/// Distance used between aggregated features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// `|⟨W_f^c, u − v⟩|`, metric taken from the classifier row.
    #[default]
    Ours,
    /// `1 − ⟨u, v⟩`.
    Cosine,
    /// `‖u − v‖₂`.
    Euclidean,
    /// `‖L^c (u − v)‖₂` with learnable per-class factors.
    Custom,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Self::Ours),
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            "custom" => Ok(Self::Custom),
            _ => Err(Error::Config(format!(
                "distance must be ours|cosine|euclidean|custom, got {s:?}"
            ))),
        }
    }
}

/// Videos in a batch that share class `class`; `members` index into the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassBatchGroup {
    pub class: usize,
    pub members: Vec<usize>,
}

/// Softmax attention over segments for one class.
pub fn attention_weights<T: Real>(s_col: &[T]) -> Result<Vec<T>> {
    crate::numeric::stable_softmax(s_col)
}

/// High- and low-attention aggregates and their unit-norm versions.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeatures<T> {
    pub z_pos: Vec<T>,
    pub z_neg: Vec<T>,
    pub z_pos_norm: Vec<T>,
    pub z_neg_norm: Vec<T>,
}

/// `z⁺ = Σ π_i u_i`, `z⁻ = Σ (1 − π_i)/(n − 1) u_i`, plus L2-normalized copies.
pub fn aggregate_features<T: Real>(u: &Matrix<T>, pi: &[T]) -> Result<AggregatedFeatures<T>> {
    let n = u.rows();
    if n < 2 {
        return Err(Error::DegenerateVideo(n));
    }
    if pi.len() != n {
        return Err(Error::shape(format!("{} weights for {n} segments", pi.len())));
    }
    let d = u.cols();
    let mut z_pos = vec![T::zero(); d];
    let mut z_neg = vec![T::zero(); d];
    let inv = T::one() / T::from_count(n - 1);
    for (i, &p) in pi.iter().enumerate() {
        let wn = (T::one() - p) * inv;
        for ((zp, zn), &x) in z_pos.iter_mut().zip(z_neg.iter_mut()).zip(u.row(i)) {
            *zp = *zp + p * x;
            *zn = *zn + wn * x;
        }
    }
    let z_pos_norm = normalize(&z_pos);
    let z_neg_norm = normalize(&z_neg);
    Ok(AggregatedFeatures {
        z_pos,
        z_neg,
        z_pos_norm,
        z_neg_norm,
    })
}

fn norm_denominator<T: Real>(r: T) -> T {
    let eps = T::lit(NORM_EPS);
    if r < eps {
        r + eps
    } else {
        r
    }
}

fn normalize<T: Real>(z: &[T]) -> Vec<T> {
    let denom = norm_denominator(l2_norm(z));
    z.iter().map(|&x| x / denom).collect()
}

/// Pulls a gradient on `z / ‖z‖` back onto `z`.
fn normalize_backward<T: Real>(z: &[T], g: &[T]) -> Vec<T> {
    let r = l2_norm(z);
    let eps = T::lit(NORM_EPS);
    if r >= eps {
        let zt: Vec<T> = z.iter().map(|&x| x / r).collect();
        let proj = dot(&zt, g);
        g.iter().zip(&zt).map(|(&gi, &zi)| (gi - zi * proj) / r).collect()
    } else {
        let denom = r + eps;
        if r > T::zero() {
            let zg = dot(z, g);
            g.iter()
                .zip(z)
                .map(|(&gi, &zi)| gi / denom - zi * zg / (r * denom * denom))
                .collect()
        } else {
            g.iter().map(|&gi| gi / denom).collect()
        }
    }
}

/// `D_c(u, v) = ‖W_f^c (u − v)‖₂`; with a single row this is `|⟨w, u − v⟩|`.
pub fn class_distance<T: Real>(u: &[T], v: &[T], w_row: &[T]) -> Result<T> {
    if u.len() != v.len() || u.len() != w_row.len() {
        return Err(Error::shape(format!(
            "distance between {}- and {}-vectors under a {}-row",
            u.len(),
            v.len(),
            w_row.len()
        )));
    }
    Ok(projected_diff(w_row, u, v).abs())
}

fn projected_diff<T: Real>(w: &[T], a: &[T], b: &[T]) -> T {
    w.iter()
        .zip(a.iter().zip(b))
        .map(|(&wi, (&x, &y))| wi * (x - y))
        .sum()
}

/// Squared distance between two aggregated features for one class.
#[derive(Debug, Clone, Copy)]
pub enum ClassMetric<'a, T> {
    /// Classifier row `W_f^c`.
    Projection(&'a [T]),
    Cosine,
    Euclidean,
    /// Factor `L^c` (r×d), `M^c = (L^c)ᵀ L^c`.
    Factored(&'a Matrix<T>),
}

impl<'a, T: Real> ClassMetric<'a, T> {
    pub fn squared(&self, a: &[T], b: &[T]) -> T {
        match *self {
            ClassMetric::Projection(w) => {
                let p = projected_diff(w, a, b);
                p * p
            }
            ClassMetric::Cosine => {
                let dist = T::one() - dot(a, b);
                dist * dist
            }
            ClassMetric::Euclidean => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum(),
            ClassMetric::Factored(l) => (0..l.rows())
                .map(|r| {
                    let p = projected_diff(l.row(r), a, b);
                    p * p
                })
                .sum(),
        }
    }

    /// Adds `scale · ∂D²/∂a`, `scale · ∂D²/∂b` and, for learnable metrics,
    /// `scale · ∂D²/∂metric` (flattened row-major) into the given buffers.
    fn accumulate_grad(
        &self,
        a: &[T],
        b: &[T],
        scale: T,
        ga: &mut [T],
        gb: &mut [T],
        gmetric: &mut [T],
    ) {
        let two = T::lit(2.0);
        match *self {
            ClassMetric::Projection(w) => {
                let p = projected_diff(w, a, b);
                let f = two * p * scale;
                for j in 0..a.len() {
                    ga[j] = ga[j] + f * w[j];
                    gb[j] = gb[j] - f * w[j];
                    gmetric[j] = gmetric[j] + f * (a[j] - b[j]);
                }
            }
            ClassMetric::Cosine => {
                let dist = T::one() - dot(a, b);
                let f = -two * dist * scale;
                for j in 0..a.len() {
                    ga[j] = ga[j] + f * b[j];
                    gb[j] = gb[j] + f * a[j];
                }
            }
            ClassMetric::Euclidean => {
                for j in 0..a.len() {
                    let g = two * (a[j] - b[j]) * scale;
                    ga[j] = ga[j] + g;
                    gb[j] = gb[j] - g;
                }
            }
            ClassMetric::Factored(l) => {
                let d = a.len();
                for r in 0..l.rows() {
                    let row = l.row(r);
                    let p = projected_diff(row, a, b);
                    let f = two * p * scale;
                    for j in 0..d {
                        ga[j] = ga[j] + f * row[j];
                        gb[j] = gb[j] - f * row[j];
                        gmetric[r * d + j] = gmetric[r * d + j] + f * (a[j] - b[j]);
                    }
                }
            }
        }
    }
}

/// Mean squared distances over ordered pairs `j ≠ j'`:
/// `d⁺ = mean D²(z̃⁺_j, z̃⁺_j')`, `d⁻ = mean D²(z̃⁺_j, z̃⁻_j')`.
pub fn metric_pair_distances<T: Real>(
    pos: &[Vec<T>],
    neg: &[Vec<T>],
    metric: &ClassMetric<'_, T>,
) -> Result<(T, T)> {
    let n = pos.len();
    if n < 2 || neg.len() != n {
        return Err(Error::invalid(format!(
            "pair distances need >= 2 members with both aggregates, got {n}/{}",
            neg.len()
        )));
    }
    let mut d_pos = T::zero();
    let mut d_neg = T::zero();
    for j in 0..n {
        for jp in 0..n {
            if j != jp {
                d_pos = d_pos + metric.squared(&pos[j], &pos[jp]);
                d_neg = d_neg + metric.squared(&pos[j], &neg[jp]);
            }
        }
    }
    let pairs = T::from_count(n * (n - 1));
    Ok((d_pos / pairs, d_neg / pairs))
}

/// Triplet `[d⁺ − d⁻ + α]₊` or contrastive `d⁺ + [α − d⁻]₊`; zero for `None`.
pub fn metric_loss<T: Real>(d_pos: T, d_neg: T, alpha: T, kind: MetricKind) -> T {
    metric_loss_grad(d_pos, d_neg, alpha, kind).0
}

/// Loss and its (sub)gradients with respect to `d⁺` and `d⁻`.
fn metric_loss_grad<T: Real>(d_pos: T, d_neg: T, alpha: T, kind: MetricKind) -> (T, T, T) {
    match kind {
        MetricKind::None => (T::zero(), T::zero(), T::zero()),
        MetricKind::Triplet => {
            let v = d_pos - d_neg + alpha;
            if v > T::zero() {
                (v, T::one(), -T::one())
            } else {
                (T::zero(), T::zero(), T::zero())
            }
        }
        MetricKind::Contrastive => {
            let h = alpha - d_neg;
            if h > T::zero() {
                (d_pos + h, T::one(), -T::one())
            } else {
                (d_pos, T::one(), T::zero())
            }
        }
    }
}

/// One group's loss and gradients with respect to each member's `u`
/// (n×d) and class column of `s`, plus the metric parameters.
pub(crate) struct GroupTerm<T> {
    pub loss: T,
    /// `(member position in `inputs`, ∂/∂u, ∂/∂s[:, c])`.
    pub member_grads: Vec<(usize, Matrix<T>, Vec<T>)>,
    pub metric_grad: Vec<T>,
}

/// Member inputs: embedded features and class-`c` activations.
pub(crate) struct GroupInput<'a, T> {
    pub u: &'a Matrix<T>,
    pub s_col: Vec<T>,
}

pub(crate) fn group_loss_grad<T: Real>(
    inputs: &[GroupInput<'_, T>],
    metric: &ClassMetric<'_, T>,
    metric_len: usize,
    alpha: T,
    kind: MetricKind,
    need_grad: bool,
) -> Result<GroupTerm<T>> {
    let n = inputs.len();
    let mut attn = Vec::with_capacity(n);
    let mut agg = Vec::with_capacity(n);
    for inp in inputs {
        let pi = softmax_unchecked(&inp.s_col);
        agg.push(aggregate_features(inp.u, &pi)?);
        attn.push(pi);
    }
    let pos: Vec<Vec<T>> = agg.iter().map(|a| a.z_pos_norm.clone()).collect();
    let neg: Vec<Vec<T>> = agg.iter().map(|a| a.z_neg_norm.clone()).collect();
    let (d_pos, d_neg) = metric_pair_distances(&pos, &neg, metric)?;
    let (loss, g_dpos, g_dneg) = metric_loss_grad(d_pos, d_neg, alpha, kind);

    let d = inputs.first().map_or(0, |i| i.u.cols());
    let mut metric_grad = vec![T::zero(); metric_len];
    let mut member_grads = Vec::new();
    if !need_grad || (g_dpos == T::zero() && g_dneg == T::zero()) {
        return Ok(GroupTerm {
            loss,
            member_grads,
            metric_grad,
        });
    }

    let pairs = T::from_count(n * (n - 1));
    let mut g_pos = vec![vec![T::zero(); d]; n];
    let mut g_neg = vec![vec![T::zero(); d]; n];
    let spos = g_dpos / pairs;
    let sneg = g_dneg / pairs;
    for j in 0..n {
        for jp in 0..n {
            if j == jp {
                continue;
            }
            if spos != T::zero() {
                let (a, b) = split_pair(&mut g_pos, j, jp);
                metric.accumulate_grad(&pos[j], &pos[jp], spos, a, b, &mut metric_grad);
            }
            if sneg != T::zero() {
                metric.accumulate_grad(
                    &pos[j],
                    &neg[jp],
                    sneg,
                    &mut g_pos[j],
                    &mut g_neg[jp],
                    &mut metric_grad,
                );
            }
        }
    }

    for (j, inp) in inputs.iter().enumerate() {
        let gz_pos = normalize_backward(&agg[j].z_pos, &g_pos[j]);
        let gz_neg = normalize_backward(&agg[j].z_neg, &g_neg[j]);
        let rows = inp.u.rows();
        let inv = T::one() / T::from_count(rows - 1);
        let pi = &attn[j];
        let mut d_u = Matrix::zeros(rows, d);
        let mut g_pi = vec![T::zero(); rows];
        for i in 0..rows {
            let ui = inp.u.row(i);
            g_pi[i] = dot(ui, &gz_pos) - dot(ui, &gz_neg) * inv;
            let wn = (T::one() - pi[i]) * inv;
            for ((g, &gp), &gn) in d_u.row_mut(i).iter_mut().zip(&gz_pos).zip(&gz_neg) {
                *g = pi[i] * gp + wn * gn;
            }
        }
        let mean_g: T = pi.iter().zip(&g_pi).map(|(&p, &g)| p * g).sum();
        let d_col: Vec<T> = pi.iter().zip(&g_pi).map(|(&p, &g)| p * (g - mean_g)).collect();
        member_grads.push((j, d_u, d_col));
    }
    Ok(GroupTerm {
        loss,
        member_grads,
        metric_grad,
    })
}

fn split_pair<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
