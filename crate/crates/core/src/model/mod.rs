//! Learnable parameters and the forward pass: a fully connected embedding
//! with ReLU and dropout, followed by clipped linear class activations.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::data_io::FeatureSequence;
use crate::error::{Error, Result};
use crate::numeric::{clip_grad, clip_unchecked, Matrix, Real, Rng};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

/// Which features the classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInput {
    /// Post-embedding features `u_i`.
    #[default]
    Embedded,
    /// Raw segment features `x_i`.
    Raw,
}

impl std::str::FromStr for ClassifierInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedded" => Ok(Self::Embedded),
            "raw" => Ok(Self::Raw),
            _ => Err(Error::Config(format!(
                "classifier input must be embedded|raw, got {s:?}"
            ))),
        }
    }
}

/// Embedding `W_e`, `b_e`; classifier `W_f`, `b`. Row `c` of `W_f` also
/// serves as the class-`c` metric. `metric_factors` holds the optional
/// learnable per-class factors `L^c` (stacked, `C·r × d`) used by the
/// custom-distance ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed_weight: Matrix<T>,
    pub embed_bias: Vec<T>,
    pub class_weight: Matrix<T>,
    pub class_bias: Vec<T>,
    pub metric_factors: Option<Matrix<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Uniform `(-a, a)` weights with `a = 1/√fan_in`, zero biases.
    pub fn init(dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid(format!(
                "model dimensions must be >= 1 (d={dim}, C={num_classes})"
            )));
        }
        Ok(Self {
            embed_weight: uniform_matrix(dim, dim, dim, rng),
            embed_bias: vec![T::zero(); dim],
            class_weight: uniform_matrix(num_classes, dim, dim, rng),
            class_bias: vec![T::zero(); num_classes],
            metric_factors: None,
        })
    }

    /// Adds rank-`rank` learnable metric factors, one `rank × d` block per class.
    pub fn with_metric_factors(mut self, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("metric factor rank must be >= 1"));
        }
        let d = self.dim();
        self.metric_factors = Some(uniform_matrix(self.num_classes() * rank, d, d, rng));
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.embed_weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_weight.rows()
    }

    pub fn metric_rank(&self) -> usize {
        self.metric_factors
            .as_ref()
            .map_or(0, |m| m.rows() / self.num_classes())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed_weight: Matrix::zeros(self.embed_weight.rows(), self.embed_weight.cols()),
            embed_bias: vec![T::zero(); self.embed_bias.len()],
            class_weight: Matrix::zeros(self.class_weight.rows(), self.class_weight.cols()),
            class_bias: vec![T::zero(); self.class_bias.len()],
            metric_factors: self
                .metric_factors
                .as_ref()
                .map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    /// Parameter blocks in checkpoint order.
    pub fn blocks(&self) -> Vec<(&'static str, &[T])> {
        let mut out = vec![
            ("embed_weight", self.embed_weight.as_slice()),
            ("embed_bias", self.embed_bias.as_slice()),
            ("class_weight", self.class_weight.as_slice()),
            ("class_bias", self.class_bias.as_slice()),
        ];
        if let Some(m) = &self.metric_factors {
            out.push(("metric_factors", m.as_slice()));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out = vec![
            ("embed_weight", self.embed_weight.as_mut_slice()),
            ("embed_bias", self.embed_bias.as_mut_slice()),
            ("class_weight", self.class_weight.as_mut_slice()),
            ("class_bias", self.class_bias.as_mut_slice()),
        ];
        if let Some(m) = &mut self.metric_factors {
            out.push(("metric_factors", m.as_mut_slice()));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    /// Overwrites every parameter from a flat vector laid out as [`flatten`].
    ///
    /// [`flatten`]: ModelParams::flatten
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, block) in self.blocks_mut() {
            let len = block.len();
            block.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// `self += other`, block by block.
    pub fn accumulate(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let vec = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect()
        };
        ModelParams {
            embed_weight: self.embed_weight.cast(),
            embed_bias: vec(&self.embed_bias),
            class_weight: self.class_weight.cast(),
            class_bias: vec(&self.class_bias),
            metric_factors: self.metric_factors.as_ref().map(Matrix::cast),
        }
    }

    /// Rows `c·r .. (c+1)·r` of the metric factors, i.e. `L^c`.
    pub fn metric_factor(&self, class: usize) -> Option<Matrix<T>> {
        let m = self.metric_factors.as_ref()?;
        let r = self.metric_rank();
        let idx: Vec<usize> = (class * r..(class + 1) * r).collect();
        Some(m.select_rows(&idx))
    }
}

fn uniform_matrix<T: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Matrix<T> {
    let a = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.uniform_in(-a, a)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Forward-pass knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub kappa: f64,
    pub dropout: f64,
    pub classifier_input: ClassifierInput,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            kappa: 4.0,
            dropout: 0.5,
            classifier_input: ClassifierInput::Embedded,
        }
    }
}

/// Everything the backward pass needs from one video's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input features `x_i` (n×d).
    pub x: Matrix<T>,
    /// `W_e x_i + b_e` before the ReLU.
    pub pre_embed: Matrix<T>,
    /// Inverted-dropout multipliers (0 or `1/(1-rate)`); `None` when dropout is inactive.
    pub dropout_scale: Option<Matrix<T>>,
    /// Embedded features `u_i` (n×d).
    pub u: Matrix<T>,
    /// Classifier output before clipping (n×C).
    pub pre_class: Matrix<T>,
    /// Clipped class activations `s_i` (n×C).
    pub s: Matrix<T>,
    pub kappa: T,
    pub classifier_input: ClassifierInput,
}

impl<T: Real> ForwardCache<T> {
    pub fn n(&self) -> usize {
        self.s.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.s.cols()
    }

    /// Accumulates parameter gradients given `∂L/∂s` (n×C) and the direct
    /// `∂L/∂u` (n×d) from the metric branch.
    pub fn backward(
        &self,
        params: &ModelParams<T>,
        d_s: &Matrix<T>,
        d_u: Option<&Matrix<T>>,
        grads: &mut ModelParams<T>,
    ) {
        let n = self.n();
        let d = params.dim();
        let mut d_pre = d_s.clone();
        for (g, &p) in d_pre.as_mut_slice().iter_mut().zip(self.pre_class.as_slice()) {
            *g = *g * clip_grad(p, self.kappa);
        }
        for (b, g) in grads.class_bias.iter_mut().zip(d_pre.column_sums()) {
            *b = *b + g;
        }
        let class_in = match self.classifier_input {
            ClassifierInput::Embedded => &self.u,
            ClassifierInput::Raw => &self.x,
        };
        d_pre.add_t_matmul_into(class_in, &mut grads.class_weight);

        let mut d_u_total = match d_u {
            Some(g) => g.clone(),
            None => Matrix::zeros(n, d),
        };
        if self.classifier_input == ClassifierInput::Embedded {
            let back = d_pre.matmul(&params.class_weight).expect("shapes fixed by forward");
            d_u_total.add_scaled(&back, T::one());
        }
        let mut d_a = d_u_total;
        if let Some(scale) = &self.dropout_scale {
            for (g, &m) in d_a.as_mut_slice().iter_mut().zip(scale.as_slice()) {
                *g = *g * m;
            }
        }
        for (g, &a) in d_a.as_mut_slice().iter_mut().zip(self.pre_embed.as_slice()) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        for (b, g) in grads.embed_bias.iter_mut().zip(d_a.column_sums()) {
            *b = *b + g;
        }
        d_a.add_t_matmul_into(&self.x, &mut grads.embed_weight);
    }
}

/// Forward pass on an in-memory feature matrix.
///
/// `u_i = dropout(relu(W_e x_i + b_e))`, `s_i = φ_κ(W_f u_i + b)` (or
/// `W_f x_i + b` with [`ClassifierInput::Raw`]). Dropout is inverted and
/// only active when `training` is set.
pub fn forward_matrix<T: Real>(
    x: Matrix<T>,
    params: &ModelParams<T>,
    cfg: &ForwardConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<ForwardCache<T>> {
    if x.cols() != params.dim() {
        return Err(Error::shape(format!(
            "features have dimension {}, model expects {}",
            x.cols(),
            params.dim()
        )));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::invalid(format!(
            "dropout rate must lie in [0, 1), got {}",
            cfg.dropout
        )));
    }
    if !(cfg.kappa > 0.0) {
        return Err(Error::invalid(format!("kappa must be > 0, got {}", cfg.kappa)));
    }
    let kappa = T::lit(cfg.kappa);
    let pre_embed = x.matmul_t_bias(&params.embed_weight, &params.embed_bias)?;
    let mut u = pre_embed.map(|a| a.max(T::zero()));
    let dropout_scale = if training && cfg.dropout > 0.0 {
        let keep = T::lit(1.0 / (1.0 - cfg.dropout));
        let mut scale = Matrix::zeros(u.rows(), u.cols());
        for m in scale.as_mut_slice() {
            if rng.uniform() >= cfg.dropout {
                *m = keep;
            }
        }
        for (v, &m) in u.as_mut_slice().iter_mut().zip(scale.as_slice()) {
            *v = *v * m;
        }
        Some(scale)
    } else {
        None
    };
    let class_in = match cfg.classifier_input {
        ClassifierInput::Embedded => &u,
        ClassifierInput::Raw => &x,
    };
    let pre_class = class_in.matmul_t_bias(&params.class_weight, &params.class_bias)?;
    let s = pre_class.map(|p| clip_unchecked(p, kappa));
    if !s.is_finite() || !u.is_finite() {
        return Err(Error::NonFinite("forward pass produced non-finite values".into()));
    }
    Ok(ForwardCache {
        x,
        pre_embed,
        dropout_scale,
        u,
        pre_class,
        s,
        kappa,
        classifier_input: cfg.classifier_input,
    })
}

pub fn forward<T: Real>(
    features: &FeatureSequence,
    params: &ModelParams<T>,
    cfg: &ForwardConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<ForwardCache<T>> {
    forward_matrix(features.features.cast(), params, cfg, training, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dropout: f64) -> ForwardConfig {
        ForwardConfig {
            kappa: 4.0,
            dropout,
            classifier_input: ClassifierInput::Embedded,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ModelParams::<f64>::init(64, 5, &mut Rng::new(7)).unwrap();
        let b = ModelParams::<f64>::init(64, 5, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.embed_bias.iter().all(|&x| x == 0.0));
        assert!(a.class_bias.iter().all(|&x| x == 0.0));
        assert!(ModelParams::<f64>::init(0, 5, &mut Rng::new(7)).is_err());
        assert!(ModelParams::<f64>::init(4, 0, &mut Rng::new(7)).is_err());
    }

    #[test]
    fn init_scale_matches_uniform_moments() {
        let p = ModelParams::<f64>::init(2048, 20, &mut Rng::new(7)).unwrap();
        let w = p.class_weight.as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        // std of U(-a, a) is a/√3
        let expected = (1.0 / 2048f64.sqrt()) / 3f64.sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.1);
    }

    #[test]
    fn zero_features_propagate_zero() {
        let p = ModelParams::<f64>::init(6, 3, &mut Rng::new(1)).unwrap();
        let out = forward_matrix(Matrix::zeros(4, 6), &p, &cfg(0.0), false, &mut Rng::new(0)).unwrap();
        assert!(out.u.as_slice().iter().all(|&x| x == 0.0));
        assert!(out.s.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_computed_clip() {
        let p = ModelParams {
            embed_weight: Matrix::identity(2),
            embed_bias: vec![0.0, 0.0],
            class_weight: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            class_bias: vec![0.0],
            metric_factors: None,
        };
        let x = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let out = forward_matrix(x, &p, &cfg(0.0), false, &mut Rng::new(0)).unwrap();
        assert_eq!(out.u.as_slice(), &[2.0, 3.0]);
        assert_eq!(out.pre_class.as_slice(), &[5.0]);
        assert_eq!(out.s.as_slice(), &[4.0]);
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let p = ModelParams::<f64>::init(8, 3, &mut Rng::new(2)).unwrap();
        let mut r = Rng::new(3);
        let x = Matrix::from_vec(5, 8, (0..40).map(|_| r.normal()).collect()).unwrap();
        let a = forward_matrix(x.clone(), &p, &cfg(0.0), false, &mut Rng::new(4)).unwrap();
        let b = forward_matrix(x.clone(), &p, &cfg(0.9), false, &mut Rng::new(5)).unwrap();
        assert_eq!(a.s, b.s);
        assert!(b.dropout_scale.is_none());
        let t = forward_matrix(x, &p, &cfg(0.5), true, &mut Rng::new(5)).unwrap();
        let scale = t.dropout_scale.as_ref().unwrap();
        assert!(scale.as_slice().iter().all(|&m| m == 0.0 || m == 2.0));
    }

    #[test]
    fn bounds_hold() {
        let mut p = ModelParams::<f64>::init(8, 4, &mut Rng::new(2)).unwrap();
        for w in p.class_weight.as_mut_slice() {
            *w *= 50.0;
        }
        let mut r = Rng::new(9);
        let x = Matrix::from_vec(30, 8, (0..240).map(|_| 3.0 * r.normal()).collect()).unwrap();
        let out = forward_matrix(x, &p, &cfg(0.5), true, &mut r).unwrap();
        assert!(out.s.as_slice().iter().all(|&s| s.abs() <= 4.0));
        assert!(out.u.as_slice().iter().all(|&u| u >= 0.0));
        assert!(out.s.as_slice().iter().any(|&s| s.abs() == 4.0));
    }

    #[test]
    fn activations_scale_linearly_without_clipping() {
        let p = ModelParams::<f64>::init(8, 4, &mut Rng::new(2)).unwrap();
        let mut q = p.clone();
        for w in q.class_weight.as_mut_slice() {
            *w *= 2.0;
        }
        let mut r = Rng::new(9);
        let x = Matrix::from_vec(6, 8, (0..48).map(|_| 0.1 * r.normal()).collect()).unwrap();
        let a = forward_matrix(x.clone(), &p, &cfg(0.0), false, &mut r).unwrap();
        let b = forward_matrix(x, &q, &cfg(0.0), false, &mut r).unwrap();
        for (x, y) in a.s.as_slice().iter().zip(b.s.as_slice()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = ModelParams::<f64>::init(8, 4, &mut Rng::new(2)).unwrap();
        let r = forward_matrix(Matrix::zeros(3, 7), &p, &cfg(0.0), false, &mut Rng::new(0));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn flatten_round_trip() {
        let p = ModelParams::<f64>::init(5, 3, &mut Rng::new(2))
            .unwrap()
            .with_metric_factors(2, &mut Rng::new(3))
            .unwrap();
        assert_eq!(p.metric_rank(), 2);
        let flat = p.flatten();
        let mut q = p.zeros_like();
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.metric_factor(1).unwrap().row(0), p.metric_factors.as_ref().unwrap().row(2));
    }
}
