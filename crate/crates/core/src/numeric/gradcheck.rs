use crate::error::{Error, Result};
use crate::numeric::Real;

/// Central-difference gradient of `f` at `theta`.
///
/// Evaluates `(f(θ + h·e_j) − f(θ − h·e_j)) / 2h` for every coordinate `j`.
/// A non-finite evaluation, or an error from `f`, aborts with
/// [`Error::OracleFailure`] naming the coordinate.
pub fn finite_diff_grad<T, F>(mut f: F, theta: &[T], h: T) -> Result<Vec<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::invalid(format!("step h must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    let two_h = h + h;
    for j in 0..theta.len() {
        let orig = probe[j];
        let mut eval = |x: T, probe: &mut Vec<T>| -> Result<T> {
            probe[j] = x;
            let v = f(probe).map_err(|e| Error::OracleFailure(format!("coordinate {j}: {e}")))?;
            if !v.is_finite() {
                return Err(Error::OracleFailure(format!(
                    "non-finite evaluation at coordinate {j}"
                )));
            }
            Ok(v)
        };
        let plus = eval(orig + h, &mut probe)?;
        let minus = eval(orig - h, &mut probe)?;
        probe[j] = orig;
        grad.push((plus - minus) / two_h);
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`; zero when both vectors are identical.
pub fn relative_error<T: Real>(a: &[T], b: &[T], floor: T) -> T {
    debug_assert_eq!(a.len(), b.len());
    let diff: T = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt();
    if diff == T::zero() {
        return T::zero();
    }
    let na = super::l2_norm(a);
    let nb = super::l2_norm(b);
    diff / na.max(nb).max(floor)
}
