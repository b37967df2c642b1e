//! Scalar abstraction, dense matrices, numerically stable elementwise
//! functions, seeded random streams and the finite-difference oracle.

mod gradcheck;
mod matrix;
mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_grad, relative_error};
pub use matrix::Matrix;
pub use rng::Rng;

/// Floating point scalar used by every numeric routine in the crate.
///
/// Implemented for `f32` and `f64`. Training runs in `f64`; `f32` is enough
/// for inference on stored features.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Lower/upper probability clamp applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// `φ_κ`: clips `x` to `[-kappa, kappa]`.
pub fn clip_phi<T: Real>(x: T, kappa: T) -> Result<T> {
    if !(kappa > T::zero()) {
        return Err(Error::invalid(format!("clip bound must be > 0, got {kappa}")));
    }
    Ok(clip_unchecked(x, kappa))
}

#[inline]
pub(crate) fn clip_unchecked<T: Real>(x: T, kappa: T) -> T {
    if x > kappa {
        kappa
    } else if x < -kappa {
        -kappa
    } else {
        x
    }
}

/// Subgradient of [`clip_phi`]: 1 on the closed interval `[-kappa, kappa]`, 0 outside.
#[inline]
pub fn clip_grad<T: Real>(x: T, kappa: T) -> T {
    if x.abs() <= kappa {
        T::one()
    } else {
        T::zero()
    }
}

/// Logistic sigmoid that never evaluates `exp` of a positive argument.
#[inline]
pub fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)`, accurate in both tails.
#[inline]
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Softmax with max subtraction.
pub fn stable_softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for o in &mut out {
        *o = *o / total;
    }
    out
}

#[inline]
pub fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::lit(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn l2_norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_examples() {
        assert_eq!(clip_phi(5.0, 4.0).unwrap(), 4.0);
        assert_eq!(clip_phi(-7.2, 4.0).unwrap(), -4.0);
        assert_eq!(clip_phi(1.3, 4.0).unwrap(), 1.3);
        assert!(matches!(clip_phi(1.0, 0.0), Err(Error::InvalidParameter(_))));
        assert!(clip_phi(1.0_f64, -1.0).is_err());
    }

    #[test]
    fn clip_subgradient_closed_interval() {
        assert_eq!(clip_grad(4.0, 4.0), 1.0);
        assert_eq!(clip_grad(-4.0, 4.0), 1.0);
        assert_eq!(clip_grad(4.0001, 4.0), 0.0);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(stable_sigmoid(0.0_f64), 0.5);
        // 1/(1+e^-4.5) = 0.98901305736940...
        assert!((stable_sigmoid(4.5_f64) - 0.989_013_057_369_4).abs() < 1e-12);
        let tiny = stable_sigmoid(-100.0_f64);
        assert!(tiny > 0.0 && tiny < 1e-40);
        assert!(stable_sigmoid(1000.0_f64).is_finite());
        assert!(stable_sigmoid(-1000.0_f64).is_finite());
        assert_eq!(stable_sigmoid(0.0_f32), 0.5);
    }

    #[test]
    fn log_sigmoid_matches_direct() {
        for &x in &[-30.0, -2.0, 0.0, 0.5, 3.0, 30.0] {
            let direct = stable_sigmoid(x).ln();
            assert!((log_sigmoid(x) - direct).abs() < 1e-12, "{x}");
        }
        assert!((log_sigmoid(-800.0_f64) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(stable_softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = stable_softmax(&[1.0_f64, 2.0]).unwrap();
        let e1 = 1.0_f64.exp();
        let e2 = 2.0_f64.exp();
        assert!((p[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((p[0] - 0.26894).abs() < 1e-5);
        assert!((p[1] - 0.73106).abs() < 1e-5);
        assert!(stable_softmax::<f64>(&[]).is_err());
    }

    proptest! {
        #[test]
        fn clip_is_bounded_and_idempotent(x in -100.0..100.0_f64, kappa in 0.01..20.0_f64) {
            let y = clip_phi(x, kappa).unwrap();
            prop_assert!(y.abs() <= kappa);
            prop_assert_eq!(clip_phi(y, kappa).unwrap(), y);
        }

        #[test]
        fn sigmoid_symmetry(x in -50.0..50.0_f64) {
            prop_assert!((stable_sigmoid(x) + stable_sigmoid(-x) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(
            v in proptest::collection::vec(-30.0..30.0_f64, 1..12),
            c in -500.0..500.0_f64,
        ) {
            let a = stable_softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = stable_softmax(&shifted).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_preserves_order(v in proptest::collection::vec(-30.0..30.0_f64, 2..8)) {
            let p = stable_softmax(&v).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(p[i] <= p[j]);
                    }
                }
            }
        }
    }
}
