//! Video-level classification from segment activations: block partition,
//! k-max pooling, noisy-OR aggregation and the cross-entropy variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sigmoid, stable_sigmoid, Matrix, Real, PROB_EPS};

/// What happens to the `n mod l_w` segments past the last full block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// Appended to the last block.
    #[default]
    Merge,
    /// Ignored.
    Drop,
}

impl std::str::FromStr for Tail {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge" => Ok(Self::Merge),
            "drop" => Ok(Self::Drop),
            _ => Err(Error::Config(format!("tail must be merge|drop, got {s:?}"))),
        }
    }
}

/// Classification objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLoss {
    /// Plain binary cross-entropy, averaged over classes.
    Bce,
    /// Balanced binary cross-entropy: positive and negative terms each
    /// normalized by their class count.
    #[default]
    Bbce,
    /// Softmax over classes of block-averaged k-max activations, scored
    /// against the normalized label distribution.
    SoftmaxMil,
}

impl std::str::FromStr for ClassLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Self::Bce),
            "bbce" => Ok(Self::Bbce),
            "softmax-mil" => Ok(Self::SoftmaxMil),
            _ => Err(Error::Config(format!(
                "loss must be bce|bbce|softmax-mil, got {s:?}"
            ))),
        }
    }
}

/// Block processing settings. `block_len = None` turns block processing
/// off (one block spanning the whole video).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub block_len: Option<usize>,
    pub k: usize,
    pub tail: Tail,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            block_len: Some(60),
            k: 10,
            tail: Tail::Merge,
        }
    }
}

/// Consecutive inclusive segment ranges and the per-video `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub ranges: Vec<(usize, usize)>,
    pub block_len: usize,
    pub k: usize,
}

impl BlockPartition {
    pub fn num_blocks(&self) -> usize {
        self.ranges.len()
    }
}

/// Splits `n` segments into blocks of `block_len`.
///
/// Videos shorter than one block become a single block of length `n`.
/// `k` is capped at the block length.
pub fn partition_blocks(n: usize, block_len: usize, k: usize, tail: Tail) -> Result<BlockPartition> {
    if n == 0 {
        return Err(Error::EmptyVideo);
    }
    if block_len == 0 || k == 0 {
        return Err(Error::invalid(format!(
            "block length and k must be >= 1 (l_w={block_len}, k={k})"
        )));
    }
    let len = block_len.min(n);
    let count = n / len;
    let mut ranges: Vec<(usize, usize)> = (0..count).map(|b| (b * len, (b + 1) * len - 1)).collect();
    if tail == Tail::Merge {
        if let Some(last) = ranges.last_mut() {
            last.1 = n - 1;
        }
    }
    Ok(BlockPartition {
        ranges,
        block_len: len,
        k: k.min(len),
    })
}

pub(crate) fn partition_for(n: usize, cfg: &BlockConfig) -> Result<BlockPartition> {
    partition_blocks(n, cfg.block_len.unwrap_or(n), cfg.k, cfg.tail)
}

/// Indices of the `k` largest scores, ties broken by lower index.
pub fn top_k_indices<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Mean of the `k` largest entries.
pub fn kmax_mean<T: Real>(scores: &[T], k: usize) -> Result<T> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={}",
            scores.len()
        )));
    }
    let sum: T = top_k_indices(scores, k).into_iter().map(|i| scores[i]).sum();
    Ok(sum / T::from_count(k))
}

/// `P(c | block) = σ(mean of the k largest activations)`.
pub fn block_class_prob<T: Real>(block_scores: &[T], k: usize) -> Result<T> {
    kmax_mean(block_scores, k).map(stable_sigmoid)
}

/// Noisy-OR `1 − Π(1 − p_i)`, evaluated as `1 − exp(Σ log(1 − p_i))`.
pub fn video_class_prob<T: Real>(block_probs: &[T]) -> T {
    let log_q: T = block_probs
        .iter()
        .map(|&p| (-p.max(T::zero()).min(T::one())).ln_1p())
        .sum();
    -log_q.exp_m1()
}

fn check_labels<T>(probs: &[T], labels: &[bool]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid("cross-entropy needs at least one class"));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Balanced binary cross-entropy. A term whose class count is zero is dropped.
pub fn bbce_loss<T: Real>(video_probs: &[T], labels: &[bool]) -> Result<T> {
    check_labels(video_probs, labels)?;
    let eps = T::lit(PROB_EPS);
    let (wpos, wneg) = balanced_weights::<T>(labels);
    Ok(video_probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(T::one() - eps);
            if y {
                -wpos * p.ln()
            } else {
                -wneg * (T::one() - p).ln()
            }
        })
        .sum())
}

/// Unbalanced binary cross-entropy, averaged over classes.
pub fn bce_loss<T: Real>(video_probs: &[T], labels: &[bool]) -> Result<T> {
    check_labels(video_probs, labels)?;
    let eps = T::lit(PROB_EPS);
    let w = T::one() / T::from_count(labels.len());
    Ok(video_probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(T::one() - eps);
            -w * if y { p.ln() } else { (T::one() - p).ln() }
        })
        .sum())
}

fn balanced_weights<T: Real>(labels: &[bool]) -> (T, T) {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    let inv = |n: usize| {
        if n == 0 {
            T::zero()
        } else {
            T::one() / T::from_count(n)
        }
    };
    (inv(pos), inv(neg))
}

/// Pooled block activations for one class: per block, the selected
/// segment indices and their mean.
struct PooledClass<T> {
    selected: Vec<Vec<usize>>,
    means: Vec<T>,
}

fn pool_class<T: Real>(s: &Matrix<T>, class: usize, part: &BlockPartition) -> PooledClass<T> {
    let col = s.column(class);
    let mut selected = Vec::with_capacity(part.num_blocks());
    let mut means = Vec::with_capacity(part.num_blocks());
    for &(lo, hi) in &part.ranges {
        let top: Vec<usize> = top_k_indices(&col[lo..=hi], part.k)
            .into_iter()
            .map(|i| i + lo)
            .collect();
        let sum: T = top.iter().map(|&i| col[i]).sum();
        means.push(sum / T::from_count(part.k));
        selected.push(top);
    }
    PooledClass { selected, means }
}

/// Video-level class probabilities `P(c | V)` for every class.
pub fn video_class_probs<T: Real>(s: &Matrix<T>, blocks: &BlockConfig) -> Result<Vec<T>> {
    let part = partition_for(s.rows(), blocks)?;
    Ok((0..s.cols())
        .map(|c| {
            let pooled = pool_class(s, c, &part);
            let log_q: T = pooled.means.iter().map(|&m| log_sigmoid(-m)).sum();
            -log_q.exp_m1()
        })
        .collect())
}

/// Loss and `∂loss/∂s` for a single video.
#[derive(Debug, Clone)]
pub struct VideoClassification<T> {
    pub loss: T,
    pub video_probs: Vec<T>,
    pub d_s: Matrix<T>,
}

pub fn classification_loss_grad<T: Real>(
    s: &Matrix<T>,
    labels: &[bool],
    kind: ClassLoss,
    blocks: &BlockConfig,
) -> Result<VideoClassification<T>> {
    let num_classes = s.cols();
    if num_classes == 0 {
        return Err(Error::invalid("cross-entropy needs at least one class"));
    }
    if labels.len() != num_classes {
        return Err(Error::shape(format!(
            "{num_classes} activation columns for {} labels",
            labels.len()
        )));
    }
    let part = partition_for(s.rows(), blocks)?;
    let pooled: Vec<PooledClass<T>> = (0..num_classes).map(|c| pool_class(s, c, &part)).collect();
    let mut d_s = Matrix::zeros(s.rows(), num_classes);
    let inv_k = T::one() / T::from_count(part.k);
    let mut video_probs = Vec::with_capacity(num_classes);
    for p in &pooled {
        let log_q: T = p.means.iter().map(|&m| log_sigmoid(-m)).sum();
        video_probs.push(-log_q.exp_m1());
    }

    let scatter = |class: usize, block: usize, g: T, d_s: &mut Matrix<T>| {
        for &i in &pooled[class].selected[block] {
            d_s[(i, class)] = d_s[(i, class)] + g * inv_k;
        }
    };

    let loss = match kind {
        ClassLoss::Bce | ClassLoss::Bbce => {
            let (wpos, wneg) = if kind == ClassLoss::Bbce {
                balanced_weights::<T>(labels)
            } else {
                let w = T::one() / T::from_count(num_classes);
                (w, w)
            };
            let eps = T::lit(PROB_EPS);
            let hi = T::one() - eps;
            let mut loss = T::zero();
            for (c, p) in pooled.iter().enumerate() {
                let log_q: T = p.means.iter().map(|&m| log_sigmoid(-m)).sum();
                let q = log_q.exp();
                let prob = video_probs[c];
                let inside = prob >= eps && prob <= hi;
                if labels[c] {
                    let log_p = if inside { prob.ln() } else { prob.max(eps).min(hi).ln() };
                    loss = loss - wpos * log_p;
                    if inside && wpos > T::zero() {
                        // ∂P/∂m_j = Q·σ(m_j)
                        for (j, &m) in p.means.iter().enumerate() {
                            let g = -wpos * q * stable_sigmoid(m) / prob;
                            scatter(c, j, g, &mut d_s);
                        }
                    }
                } else {
                    let log_one_minus = if inside { log_q } else { q.max(eps).min(hi).ln() };
                    loss = loss - wneg * log_one_minus;
                    if inside && wneg > T::zero() {
                        for (j, &m) in p.means.iter().enumerate() {
                            scatter(c, j, wneg * stable_sigmoid(m), &mut d_s);
                        }
                    }
                }
            }
            loss
        }
        ClassLoss::SoftmaxMil => {
            let npos = labels.iter().filter(|&&y| y).count();
            if npos == 0 {
                T::zero()
            } else {
                let nb = T::from_count(part.num_blocks());
                let logits: Vec<T> = pooled
                    .iter()
                    .map(|p| p.means.iter().copied().sum::<T>() / nb)
                    .collect();
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + logits.iter().map(|&a| (a - max).exp()).sum::<T>().ln();
                let target = T::one() / T::from_count(npos);
                let mut loss = T::zero();
                for (c, &a) in logits.iter().enumerate() {
                    let y = if labels[c] { target } else { T::zero() };
                    loss = loss - y * (a - lse);
                    let g = ((a - lse).exp() - y) / nb;
                    for j in 0..part.num_blocks() {
                        scatter(c, j, g, &mut d_s);
                    }
                }
                loss
            }
        }
    };
    Ok(VideoClassification {
        loss,
        video_probs,
        d_s,
    })
}

/// Classification loss from precomputed video probabilities (no gradient).
pub fn classification_loss<T: Real>(video_probs: &[T], labels: &[bool], kind: ClassLoss) -> Result<T> {
    match kind {
        ClassLoss::Bbce => bbce_loss(video_probs, labels),
        ClassLoss::Bce => bce_loss(video_probs, labels),
        ClassLoss::SoftmaxMil => Err(Error::invalid(
            "softmax-mil is defined on pooled activations, not video probabilities",
        )),
    }
}
