//! Monte Carlo estimators and deterministic parallel reductions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A Monte Carlo (or exact) estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate<T> {
    pub value: T,
    pub std_error: T,
    pub n: usize,
}

impl<T: Scalar> Estimate<T> {
    pub fn exact(value: T) -> Self {
        Estimate { value, std_error: T::zero(), n: 0 }
    }

    /// Sample mean and standard error of the mean.
    pub fn from_samples(samples: &[T]) -> Self {
        let n = samples.len();
        let (mean, var) = mean_var(samples);
        let se = if n > 0 { (var / T::of_usize(n)).sqrt() } else { T::nan() };
        Estimate { value: mean, std_error: se, n }
    }

    /// `|self - other| / sqrt(se1^2 + se2^2)`; infinite when both are exact
    /// and differ.
    pub fn z_score(&self, other: &Estimate<T>) -> T {
        let diff = (self.value - other.value).abs();
        let se = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        if se > T::zero() {
            diff / se
        } else if diff == T::zero() {
            T::zero()
        } else {
            T::infinity()
        }
    }

    /// True when `|value - target| <= k * std_error`.
    pub fn within(&self, target: T, k: T) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }

    /// `|self - other| <= k * combined SE + ROUNDOFF * max(1, |self|, |other|)`.
    /// The floor keeps near-deterministic estimates from failing on rounding.
    pub fn agrees(&self, other: &Estimate<T>, k: T) -> bool {
        let se = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        let mag = T::one().max(self.value.abs()).max(other.value.abs());
        (self.value - other.value).abs() <= k * se + T::of(ROUNDOFF) * mag
    }
}

/// Relative rounding floor for comparisons of estimates.
pub const ROUNDOFF: f64 = 1e-10;

/// Mean and unbiased variance, accumulated in a fixed order.
pub fn mean_var<T: Scalar>(samples: &[T]) -> (T, T) {
    let n = samples.len();
    if n == 0 {
        return (T::nan(), T::nan());
    }
    // Welford
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, x) in samples.iter().enumerate() {
        let x = x.as_f64();
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (T::of(mean), T::of(var))
}

/// Ratio estimator `mean(num) / mean(den)` with a delta-method standard error.
pub fn ratio_estimate<T: Scalar>(num: &[T], den: &[T]) -> Option<Estimate<T>> {
    assert_eq!(num.len(), den.len());
    let n = num.len();
    let (mn, _) = mean_var(num);
    let (md, _) = mean_var(den);
    if !(md > T::zero()) {
        return None;
    }
    let ratio = mn / md;
    let lin: Vec<T> = num.iter().zip(den).map(|(&a, &b)| (a - ratio * b) / md).collect();
    let (_, v) = mean_var(&lin);
    Some(Estimate { value: ratio, std_error: (v / T::of_usize(n)).sqrt(), n })
}

/// Maps `f` over `0..n` in parallel and returns results in index order.
pub fn par_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Fallible variant of [`par_map`]; the first error by index wins.
pub fn try_par_map<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Least-squares slope of `y` against `x`.
pub fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se() {
        let e = Estimate::from_samples(&[1.0f64, 2.0, 3.0, 4.0]);
        assert!((e.value - 2.5).abs() < 1e-15);
        // var = 5/3, se = sqrt(5/12)
        assert!((e.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ratio_of_proportional_samples_is_exact() {
        let den = [1.0f64, 2.0, 3.0];
        let num = [2.0, 4.0, 6.0];
        let r = ratio_estimate(&num, &den).unwrap();
        assert!((r.value - 2.0).abs() < 1e-15);
        assert!(r.std_error < 1e-15);
        assert!(ratio_estimate(&[1.0], &[-1.0]).is_none());
    }

    #[test]
    fn z_scores() {
        let a = Estimate { value: 1.0f64, std_error: 0.3, n: 10 };
        let b = Estimate { value: 1.5, std_error: 0.4, n: 10 };
        assert!((a.z_score(&b) - 1.0).abs() < 1e-12);
        assert_eq!(Estimate::exact(1.0).z_score(&Estimate::exact(1.0)), 0.0);
        assert!(Estimate::exact(1.0f64).z_score(&Estimate::exact(2.0)).is_infinite());
        assert!(a.agrees(&b, 1.0) && !a.agrees(&b, 0.9));
        assert!(Estimate::exact(5.0f64).agrees(&Estimate { value: 5.0 + 1e-13, std_error: 1e-17, n: 2 }, 3.0));
    }

    #[test]
    fn par_map_keeps_order() {
        let v = par_map(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 3.0, 5.0];
        assert!((regression_slope(&x, &y) - 2.0).abs() < 1e-14);
    }
}
