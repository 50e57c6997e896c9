//! Terminal claims and their martingale (Itô–Lévy) representations.

mod call;
mod fourier;

pub use call::{clark_ocone_call_beta, clark_ocone_call_kappa, lognormal_call, CallRepresentation};
pub use fourier::{characteristic_exponent, fourier_expectation, CharTriple, FourierResult, Quadrature};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{LevyMeasure, MarketCoefficients, PathState};
use crate::scalar::{dot, Scalar};

/// Measure under which the value process `E[F | F_t]` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Physical,
    /// The minimal-variance measure with kernel `(G sigma, G gamma)`; its
    /// value process makes the feedback hedge mean-variance optimal.
    #[default]
    MinimalVariance,
}

/// Per-step Girsanov kernel `(G sigma, G gamma)` of the minimal-variance
/// measure, or zero under the physical measure.
pub(crate) fn measure_kernel<T: Scalar>(
    coeffs: &MarketCoefficients<T>,
    measure: Measure,
    step: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    match measure {
        Measure::Physical => Ok((vec![T::zero(); coeffs.m()], vec![T::zero(); coeffs.n_atoms()])),
        Measure::MinimalVariance => {
            let g = coeffs.gain(step)?;
            let theta1: Vec<T> = coeffs.gamma(step).iter().map(|&x| g * x).collect();
            for (atom, &t) in theta1.iter().enumerate() {
                if !(t > -T::one()) {
                    return Err(Error::DensityNotPositive { step, atom, value: t.as_f64() });
                }
            }
            Ok((coeffs.sigma(step).iter().map(|&x| g * x).collect(), theta1))
        }
    }
}

/// How the jump terms of a linear claim are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountConvention {
    /// `F = F0 + phi.B(T) + sum psi_a N_a(T)` with raw Poisson counts.
    #[default]
    Raw,
    /// `F = F0 + phi.B(T) + sum psi_a (N_a(T) - lambda_a T)`.
    Compensated,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Claim<T> {
    Constant(T),
    LinearLevy { f0: T, phi: Vec<T>, psi: Vec<T>, convention: CountConvention },
    Call { strike: T },
}

impl<T: Scalar> Claim<T> {
    pub fn constant(value: T) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!("constant claim must be finite, got {value}")));
        }
        Ok(Claim::Constant(value))
    }

    /// Linear claim; `phi` has one entry per Brownian channel and `psi` one
    /// per atom (flat order).
    pub fn linear(f0: T, phi: Vec<T>, psi: Vec<T>, convention: CountConvention) -> Result<Self> {
        if !f0.is_finite() || phi.iter().chain(&psi).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("linear claim coefficients must be finite".into()));
        }
        Ok(Claim::LinearLevy { f0, phi, psi, convention })
    }

    pub fn call(strike: T) -> Result<Self> {
        if !(strike > T::zero()) || !strike.is_finite() {
            return Err(Error::InvalidInput(format!("call strike must be positive, got {strike}")));
        }
        Ok(Claim::Call { strike })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Claim::Constant(_) => "constant",
            Claim::LinearLevy { .. } => "linear",
            Claim::Call { .. } => "call",
        }
    }

    /// Checks the claim's dimensions against a market.
    pub fn check_dims(&self, coeffs: &MarketCoefficients<T>) -> Result<()> {
        if let Claim::LinearLevy { phi, psi, .. } = self {
            if phi.len() != coeffs.m() || psi.len() != coeffs.n_atoms() {
                return Err(Error::DimensionMismatch(format!(
                    "linear claim has {} Brownian and {} jump loadings, market has {} and {}",
                    phi.len(),
                    psi.len(),
                    coeffs.m(),
                    coeffs.n_atoms()
                )));
            }
        }
        Ok(())
    }

    /// Terminal payoff from `S(T)`, `B(T)` and raw counts `N(T)`.
    pub fn payoff(&self, s_t: T, b_t: &[T], n_t: &[T], levy: &LevyMeasure<T>, horizon: T) -> T {
        match self {
            Claim::Constant(v) => *v,
            Claim::Call { strike } => (s_t - *strike).max(T::zero()),
            Claim::LinearLevy { f0, phi, psi, convention } => {
                let mut f = *f0 + dot(phi, b_t) + dot(psi, n_t);
                if *convention == CountConvention::Compensated {
                    for (a, &p) in psi.iter().enumerate() {
                        f = f - p * levy.atom(a).intensity * horizon;
                    }
                }
                f
            }
        }
    }

    /// Payoff evaluated at a terminal [`PathState`].
    pub fn payoff_at(&self, state: &PathState<'_, T>, levy: &LevyMeasure<T>) -> T {
        self.payoff(state.price, state.brownian, state.counts, levy, state.time)
    }

    /// Exact representation for constant and linear claims.
    ///
    /// Internally drivers are compensated: a raw-count linear claim gets
    /// `F0 + sum psi_a lambda_a T` as its mean.
    pub fn ito_representation(&self, coeffs: &MarketCoefficients<T>) -> Result<ItoRepresentation<T>> {
        self.check_dims(coeffs)?;
        let lambda = coeffs.levy().intensities();
        match self {
            Claim::Constant(v) => Ok(ItoRepresentation {
                f0: *v,
                beta: vec![T::zero(); coeffs.m()],
                kappa: vec![T::zero(); coeffs.n_atoms()],
                intensities: lambda,
                shift: Vec::new(),
            }),
            Claim::LinearLevy { f0, phi, psi, convention } => {
                let shift = match convention {
                    CountConvention::Raw => dot(psi, &lambda) * coeffs.grid().horizon(),
                    CountConvention::Compensated => T::zero(),
                };
                Ok(ItoRepresentation {
                    f0: *f0 + shift,
                    beta: phi.clone(),
                    kappa: psi.clone(),
                    intensities: lambda,
                    shift: Vec::new(),
                })
            }
            Claim::Call { .. } => Err(Error::UseClarkOconeCall),
        }
    }

    /// Value process `E[F | F_t]` under `measure` with its integrands against
    /// `dB` and `dÑ` (both taken under the physical measure).
    ///
    /// Constant and linear claims are exact; calls use a Poisson mixture of
    /// lognormal prices.
    pub fn representation(
        &self,
        coeffs: &MarketCoefficients<T>,
        measure: Measure,
    ) -> Result<Box<dyn MartingaleRepresentation<T>>> {
        match self {
            Claim::Call { strike } => Ok(Box::new(CallRepresentation::new(coeffs, *strike, measure)?)),
            _ => {
                let mut rep = self.ito_representation(coeffs)?;
                if measure != Measure::Physical && rep.beta.iter().chain(&rep.kappa).any(|&x| x != T::zero()) {
                    // E_Q[F | F_t] adds the kernel drift of B and Ñ up to T
                    let dt = coeffs.grid().dt();
                    let n = coeffs.n_steps();
                    let mut shift = vec![T::zero(); n + 1];
                    for step in (0..n).rev() {
                        let (theta0, theta1) = measure_kernel(coeffs, measure, step)?;
                        let mut rate = dot(&rep.beta, &theta0);
                        for (a, (&k, &t1)) in rep.kappa.iter().zip(&theta1).enumerate() {
                            rate = rate + k * rep.intensities[a] * t1;
                        }
                        shift[step] = shift[step + 1] + rate * dt;
                    }
                    rep.shift = shift;
                }
                Ok(Box::new(rep))
            }
        }
    }
}

/// Conditional-expectation process `F(t) = E[F | F_t]` with its integrands
/// `dF = beta.dB + sum_a kappa_a dÑ_a`, evaluated at grid nodes.
pub trait MartingaleRepresentation<T: Scalar>: Send + Sync {
    /// `F(0) = E[F]`.
    fn initial_value(&self) -> T;

    fn value(&self, state: &PathState<'_, T>) -> T;

    /// Brownian integrand at the node, written into `out` (length `m`).
    fn beta(&self, state: &PathState<'_, T>, out: &mut [T]);

    /// Jump integrand for atom `atom` (flat index) at the node.
    fn kappa(&self, state: &PathState<'_, T>, atom: usize) -> T;

    /// `F` itself, read from a terminal state.
    fn payoff(&self, state: &PathState<'_, T>) -> T;
}

/// Constant integrands: `F(t) = F0 + beta.B(t) + sum kappa_a (N_a(t) - lambda_a t)`,
/// plus a deterministic per-node shift when the value is taken under an
/// equivalent measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoRepresentation<T> {
    pub f0: T,
    pub beta: Vec<T>,
    pub kappa: Vec<T>,
    intensities: Vec<T>,
    shift: Vec<T>,
}

impl<T: Scalar> ItoRepresentation<T> {
    fn shift(&self, step: usize) -> T {
        self.shift.get(step).copied().unwrap_or(T::zero())
    }
}

impl<T: Scalar> MartingaleRepresentation<T> for ItoRepresentation<T> {
    fn initial_value(&self) -> T {
        self.f0 + self.shift(0)
    }

    fn value(&self, state: &PathState<'_, T>) -> T {
        let mut v = self.f0 + self.shift(state.step) + dot(&self.beta, state.brownian);
        for (a, &k) in self.kappa.iter().enumerate() {
            v = v + k * (state.counts[a] - self.intensities[a] * state.time);
        }
        v
    }

    fn beta(&self, _: &PathState<'_, T>, out: &mut [T]) {
        out.copy_from_slice(&self.beta);
    }

    fn kappa(&self, _: &PathState<'_, T>, atom: usize) -> T {
        self.kappa[atom]
    }

    fn payoff(&self, state: &PathState<'_, T>) -> T {
        let mut v = self.f0 + dot(&self.beta, state.brownian);
        for (a, &k) in self.kappa.iter().enumerate() {
            v = v + k * (state.counts[a] - self.intensities[a] * state.time);
        }
        v
    }
}

/// Claim specification file: `{"type": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "lowercase")]
pub enum ClaimFile {
    Constant {
        value: f64,
    },
    Linear {
        #[serde(rename = "F0")]
        f0: f64,
        #[serde(default)]
        phi0: Loadings,
        #[serde(default)]
        psi0: Loadings,
        #[serde(default)]
        convention: CountConvention,
    },
    Call {
        #[serde(rename = "K")]
        strike: f64,
    },
}

/// One loading for every channel, or one per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Loadings {
    Scalar(f64),
    PerChannel(Vec<f64>),
}

impl Default for Loadings {
    fn default() -> Self {
        Loadings::Scalar(0.0)
    }
}

impl Loadings {
    fn expand<T: Scalar>(&self, n: usize, what: &str) -> Result<Vec<T>> {
        match self {
            Loadings::Scalar(x) => Ok(vec![T::of(*x); n]),
            Loadings::PerChannel(v) if v.len() == n => Ok(v.iter().map(|&x| T::of(x)).collect()),
            Loadings::PerChannel(v) => Err(Error::DimensionMismatch(format!("{what}: {} entries, expected {n}", v.len()))),
        }
    }
}

impl ClaimFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("claim file: {e}")))
    }

    pub fn to_claim<T: Scalar>(&self, coeffs: &MarketCoefficients<T>) -> Result<Claim<T>> {
        match self {
            ClaimFile::Constant { value } => Claim::constant(T::of(*value)),
            ClaimFile::Call { strike } => Claim::call(T::of(*strike)),
            ClaimFile::Linear { f0, phi0, psi0, convention } => Claim::linear(
                T::of(*f0),
                phi0.expand(coeffs.m(), "phi0")?,
                psi0.expand(coeffs.n_atoms(), "psi0")?,
                *convention,
            ),
        }
    }
}
