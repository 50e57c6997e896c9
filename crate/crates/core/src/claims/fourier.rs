//! Characteristic exponent of a one-dimensional Lévy process with finitely
//! many jump atoms, and Fourier inversion of expectations.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::market::LevyMeasure;
use crate::scalar::Scalar;

/// `eta_t = alpha0 t + sigma0 B(t) + sum_a zeta_a Ñ_a(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharTriple<T> {
    pub alpha0: T,
    pub sigma0: T,
    pub levy: LevyMeasure<T>,
}

/// `Psi(u)` with `E[exp(i u eta_t)] = exp(t Psi(u))`:
/// `i alpha0 u - sigma0^2 u^2 / 2 + sum_a lambda_a (e^{i u zeta_a} - 1 - i u zeta_a)`.
pub fn characteristic_exponent<T: Scalar>(triple: &CharTriple<T>, u: T) -> Complex<T> {
    let i = Complex::new(T::zero(), T::one());
    let mut psi = i * triple.alpha0 * u - Complex::from(T::half() * triple.sigma0 * triple.sigma0 * u * u);
    for a in 0..triple.levy.n_atoms() {
        let atom = triple.levy.atom(a);
        let x = u * atom.mark;
        let term = Complex::new(x.cos() - T::one(), x.sin() - x);
        psi = psi + term * atom.intensity;
    }
    psi
}

/// Uniform trapezoidal rule on `[lower, upper]` with `nodes` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature<T> {
    pub lower: T,
    pub upper: T,
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierResult<T> {
    pub value: T,
    /// Imaginary part of the quadrature sum; close to zero for real `f`.
    pub imag_residual: T,
}

/// `E[f(eta_t)] = (2 pi)^{-1/2} int f_hat(y) exp(t Psi(y)) dy`, where
/// `f_hat(y) = (2 pi)^{-1/2} int f(x) e^{-i x y} dx`.
pub fn fourier_expectation<T, F>(f_hat: F, triple: &CharTriple<T>, t: T, quad: Quadrature<T>) -> Result<FourierResult<T>>
where
    T: Scalar,
    F: Fn(T) -> Complex<T>,
{
    if quad.nodes < 2 || !(quad.upper > quad.lower) {
        return Err(Error::InvalidInput("quadrature needs at least 2 nodes on a nonempty interval".into()));
    }
    let h = (quad.upper - quad.lower) / T::of_usize(quad.nodes - 1);
    let mut sum = Complex::new(T::zero(), T::zero());
    for k in 0..quad.nodes {
        let y = quad.lower + h * T::of_usize(k);
        let w = if k == 0 || k == quad.nodes - 1 { T::half() } else { T::one() };
        sum = sum + f_hat(y) * (characteristic_exponent(triple, y) * t).exp() * w;
    }
    let scale = h / T::TAU().sqrt();
    let (value, imag) = (sum.re * scale, sum.im * scale);
    if !value.is_finite() || !imag.is_finite() {
        return Err(Error::NonFinite("Fourier quadrature".into()));
    }
    Ok(FourierResult { value, imag_residual: imag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::Atom;
    use std::f64::consts::PI;

    fn gaussian() -> CharTriple<f64> {
        CharTriple { alpha0: 0.0, sigma0: 1.0, levy: LevyMeasure::none() }
    }

    #[test]
    fn exponent_examples() {
        assert!((characteristic_exponent(&gaussian(), 2.0) - Complex::new(-2.0, 0.0)).norm() < 1e-15);
        let jump = CharTriple {
            alpha0: 0.0,
            sigma0: 0.0,
            levy: LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap(),
        };
        assert!((characteristic_exponent(&jump, PI) - Complex::new(-4.0, -2.0 * PI)).norm() < 1e-12);
        assert_eq!(characteristic_exponent(&jump, 0.0), Complex::new(0.0, 0.0));
    }

    #[test]
    fn exponent_is_additive_over_atoms() {
        let a = Atom { mark: 0.7, intensity: 1.5 };
        let b = Atom { mark: -0.4, intensity: 0.5 };
        let triple = |atoms: Vec<Atom<f64>>, alpha0, sigma0| CharTriple {
            alpha0,
            sigma0,
            levy: LevyMeasure::single_channel(atoms).unwrap(),
        };
        let both = characteristic_exponent(&triple(vec![a, b], 0.1, 0.3), 1.7);
        let parts = characteristic_exponent(&triple(vec![a], 0.0, 0.0), 1.7)
            + characteristic_exponent(&triple(vec![b], 0.0, 0.0), 1.7)
            + characteristic_exponent(&CharTriple { alpha0: 0.1, sigma0: 0.3, levy: LevyMeasure::none() }, 1.7);
        assert!((both - parts).norm() < 1e-14);
    }

    #[test]
    fn gaussian_inversion() {
        let f_hat = |y: f64| Complex::new((-0.5 * y * y).exp(), 0.0);
        let q = Quadrature { lower: -40.0, upper: 40.0, nodes: 4001 };
        let r = fourier_expectation(f_hat, &gaussian(), 1.0, q).unwrap();
        assert!((r.value - 0.5f64.sqrt()).abs() < 1e-6);
        assert!(r.imag_residual.abs() < 1e-12);
        let r0 = fourier_expectation(f_hat, &gaussian(), 0.0, q).unwrap();
        assert!((r0.value - 1.0).abs() < 1e-6);
        let zero = fourier_expectation(|_| Complex::new(0.0, 0.0), &gaussian(), 1.0, q).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn inversion_agrees_with_direct_integration_under_jumps() {
        // f(x) = exp(-x^2/2) against a Gaussian-plus-one-atom law
        let triple = CharTriple {
            alpha0: 0.0,
            sigma0: 0.5,
            levy: LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 1.0 }]).unwrap(),
        };
        let f_hat = |y: f64| Complex::new((-0.5 * y * y).exp(), 0.0);
        let q = Quadrature { lower: -40.0, upper: 40.0, nodes: 8001 };
        let r = fourier_expectation(f_hat, &triple, 1.0, q).unwrap();
        // eta_1 = 0.5 Z + N - 1 with N ~ Poisson(1)
        let mut direct = 0.0;
        let mut p = (-1.0f64).exp();
        for n in 0..40 {
            let mean = n as f64 - 1.0;
            let v = 0.25;
            direct += p * (-(mean * mean) / (2.0 * (1.0 + v))).exp() / (1.0 + v).sqrt();
            p /= (n + 1) as f64;
        }
        assert!((r.value - direct).abs() < 1e-6, "{} vs {direct}", r.value);
    }
}
