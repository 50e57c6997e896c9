//! European call: lognormal Poisson-mixture valuation and nested Monte Carlo
//! Clark–Ocone estimators.

use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{measure_kernel, MartingaleRepresentation, Measure};
use crate::error::{Error, Result};
use crate::market::{MarketCoefficients, PathState};
use crate::rng::{derive_seed, path_stream};
use crate::scalar::{dot, norm_sq, normal_cdf, Scalar};
use crate::stats::{par_map, Estimate};

/// Relative Poisson-weight mass dropped from the mixture series.
const SERIES_TAIL: f64 = 1e-14;

/// `E[(f e^{sqrt(v) Z - v/2} - K)^+]` and `E[f e^{..} 1{.. >= K}]` for a
/// lognormal with forward `f` and total variance `v`.
pub fn lognormal_call<T: Scalar>(forward: T, strike: T, variance: T) -> (T, T) {
    if variance <= T::zero() {
        return if forward >= strike { (forward - strike, forward) } else { (T::zero(), T::zero()) };
    }
    if strike <= T::zero() {
        return (forward - strike, forward);
    }
    let sd = variance.sqrt();
    let d1 = ((forward / strike).ln() + T::half() * variance) / sd;
    let d2 = d1 - sd;
    let itm_mean = forward * normal_cdf(d1);
    (itm_mean - strike * normal_cdf(d2), itm_mean)
}

/// Poisson-mixture weights and log jump multipliers over the remaining
/// horizon.
#[derive(Debug, Clone)]
struct Mixture<T> {
    terms: Vec<(T, T)>,
    log_drift: T,
    variance: T,
}

impl<T: Scalar> Mixture<T> {
    /// `means[a]` is the expected number of jumps of atom `a` left, and
    /// `log_drift` the forward's log growth excluding jumps.
    fn build(means: &[f64], gamma: &[T], log_drift: T, variance: T) -> Self {
        let mut terms = vec![(1.0f64, 0.0f64)];
        for (&mu, &g) in means.iter().zip(gamma) {
            if mu <= 0.0 {
                continue;
            }
            let lg = g.as_f64().ln_1p();
            let mut pmf = Vec::new();
            let (mut p, mut cum, mut k) = ((-mu).exp(), 0.0, 0usize);
            while cum < 1.0 - SERIES_TAIL && k < 1000 {
                pmf.push(p);
                cum += p;
                k += 1;
                p *= mu / k as f64;
            }
            let mut next = Vec::with_capacity(terms.len() * pmf.len());
            for &(w, lm) in &terms {
                for (k, &q) in pmf.iter().enumerate() {
                    if w * q > SERIES_TAIL * 1e-4 {
                        next.push((w * q, lm + k as f64 * lg));
                    }
                }
            }
            terms = next;
        }
        Mixture { terms: terms.into_iter().map(|(w, l)| (T::of(w), T::of(l))).collect(), log_drift, variance }
    }

    /// `(E[(S_T - K)^+], E[S_T 1{S_T >= K}])` given `S_t = s`.
    fn evaluate(&self, s: T, strike: T) -> (T, T) {
        let base = s.ln() + self.log_drift;
        self.terms.iter().fold((T::zero(), T::zero()), |(c, m), &(w, lm)| {
            let (call, itm) = lognormal_call((base + lm).exp(), strike, self.variance);
            (c + w * call, m + w * itm)
        })
    }
}

/// `F(t) = E[(S(T) - K)^+ | S(t)]` under the chosen measure, computed as a
/// Poisson mixture of lognormal prices. Integrands against the physical
/// drivers are `beta = sigma S dF/dS` and `kappa_a = F(t, S(1 + gamma_a)) - F(t, S)`.
///
/// Needs jump sizes constant in time; drift, volatility and (under the
/// minimal-variance measure) jump intensities may vary across steps.
#[derive(Debug, Clone)]
pub struct CallRepresentation<T> {
    strike: T,
    n_steps: usize,
    sigma: Vec<Vec<T>>,
    gamma: Vec<T>,
    mixtures: Vec<Mixture<T>>,
    initial: T,
}

impl<T: Scalar> CallRepresentation<T> {
    pub fn new(coeffs: &MarketCoefficients<T>, strike: T, measure: Measure) -> Result<Self> {
        let n = coeffs.n_steps();
        let gamma = coeffs.gamma(0).to_vec();
        if (1..n).any(|s| coeffs.gamma(s) != gamma.as_slice()) {
            return Err(Error::Unsupported("call representation requires time-independent jump sizes".into()));
        }
        let lambda = coeffs.levy().intensities();
        let dt = coeffs.grid().dt();
        let mut means = vec![0.0f64; lambda.len()];
        let (mut drift, mut var) = (T::zero(), T::zero());
        let mut mixtures = Vec::with_capacity(n + 1);
        mixtures.push(Mixture::build(&means, &gamma, T::zero(), T::zero()));
        for step in (0..n).rev() {
            let (theta0, theta1) = measure_kernel(coeffs, measure, step)?;
            let s2 = norm_sq(coeffs.sigma(step));
            // drift of dS/S under the measure, before compensating jumps
            let mut rate = coeffs.alpha(step) + dot(coeffs.sigma(step), &theta0);
            for (a, (&g, &t1)) in gamma.iter().zip(&theta1).enumerate() {
                let intensity = lambda[a] * (T::one() + t1);
                rate = rate + g * lambda[a] * t1 - g * intensity;
                means[a] += (intensity * dt).as_f64();
            }
            drift = drift + rate * dt;
            var = var + s2 * dt;
            mixtures.push(Mixture::build(&means, &gamma, drift, var));
        }
        mixtures.reverse();
        let initial = mixtures[0].evaluate(coeffs.s0(), strike).0;
        Ok(CallRepresentation {
            strike,
            n_steps: n,
            sigma: (0..n).map(|s| coeffs.sigma(s).to_vec()).collect(),
            gamma,
            mixtures,
            initial,
        })
    }

    /// `E[(S(T) - K)^+ | S(t_step) = s]`.
    pub fn value_at(&self, step: usize, s: T) -> T {
        self.mixtures[step].evaluate(s, self.strike).0
    }
}

impl<T: Scalar> MartingaleRepresentation<T> for CallRepresentation<T> {
    fn initial_value(&self) -> T {
        self.initial
    }

    fn value(&self, state: &PathState<'_, T>) -> T {
        self.value_at(state.step, state.price)
    }

    fn beta(&self, state: &PathState<'_, T>, out: &mut [T]) {
        if state.step >= self.n_steps {
            out.iter_mut().for_each(|b| *b = T::zero());
            return;
        }
        let itm = self.mixtures[state.step].evaluate(state.price, self.strike).1;
        for (b, &s) in out.iter_mut().zip(&self.sigma[state.step]) {
            *b = s * itm;
        }
    }

    fn kappa(&self, state: &PathState<'_, T>, atom: usize) -> T {
        let jumped = state.price * (T::one() + self.gamma[atom]);
        self.value_at(state.step, jumped) - self.value_at(state.step, state.price)
    }

    fn payoff(&self, state: &PathState<'_, T>) -> T {
        (state.price - self.strike).max(T::zero())
    }
}

fn check_nested<T: Scalar>(coeffs: &MarketCoefficients<T>, t: T, inner_paths: usize) -> Result<T> {
    let horizon = coeffs.grid().horizon();
    if !(t < horizon) || t < T::zero() {
        return Err(Error::TimeOutOfRange { t: t.as_f64(), horizon: horizon.as_f64() });
    }
    if !coeffs.is_time_homogeneous() {
        return Err(Error::Unsupported("Clark-Ocone estimators need constant coefficients".into()));
    }
    if inner_paths < 2 {
        return Err(Error::InvalidInput("inner_paths must be at least 2".into()));
    }
    Ok(horizon - t)
}

/// `S(T)` samples started from `s` at `T - tau`, drawn exactly.
fn terminal_samples<T: Scalar>(coeffs: &MarketCoefficients<T>, tau: T, s: T, inner_paths: usize, seed: u64) -> Vec<f64> {
    let sigma_norm = norm_sq(coeffs.sigma(0)).as_f64().sqrt();
    let tau = tau.as_f64();
    let drift = (coeffs.alpha(0) - T::half() * norm_sq(coeffs.sigma(0)) - coeffs.compensator_rate(0)).as_f64() * tau;
    let jumps: Vec<(Option<Poisson<f64>>, f64)> = coeffs
        .gamma(0)
        .iter()
        .enumerate()
        .map(|(a, &g)| {
            let mu = coeffs.levy().atom(a).intensity.as_f64() * tau;
            (Poisson::new(mu).ok(), g.as_f64().ln_1p())
        })
        .collect();
    let s = s.as_f64();
    par_map(inner_paths, |i| {
        let mut rng = path_stream(seed, i as u64);
        let z: f64 = StandardNormal.sample(&mut rng);
        let mut log = drift + sigma_norm * tau.sqrt() * z;
        for (dist, lg) in &jumps {
            if let Some(d) = dist {
                log += d.sample(&mut rng) * lg;
            }
        }
        s * log.exp()
    })
}

fn estimate<T: Scalar>(samples: &[f64]) -> Estimate<T> {
    let e = Estimate::from_samples(samples);
    Estimate { value: T::of(e.value), std_error: T::of(e.std_error), n: e.n }
}

/// Nested Monte Carlo estimate of `beta(t) = E[1{S(T) >= K} sigma S(T) | S(t) = s]`,
/// one entry per Brownian channel.
pub fn clark_ocone_call_beta<T: Scalar>(
    coeffs: &MarketCoefficients<T>,
    t: T,
    s: T,
    strike: T,
    inner_paths: usize,
    seed: u64,
) -> Result<Vec<Estimate<T>>> {
    let tau = check_nested(coeffs, t, inner_paths)?;
    let inner = derive_seed(seed, &[t.as_f64().to_bits(), s.as_f64().to_bits(), strike.as_f64().to_bits(), 0xBE7A]);
    let k = strike.as_f64();
    let samples: Vec<f64> = terminal_samples(coeffs, tau, s, inner_paths, inner)
        .into_iter()
        .map(|x| if x >= k { x } else { 0.0 })
        .collect();
    let e: Estimate<T> = estimate(&samples);
    Ok(coeffs
        .sigma(0)
        .iter()
        .map(|&sig| Estimate { value: sig * e.value, std_error: sig.abs() * e.std_error, n: e.n })
        .collect())
}

/// Nested Monte Carlo estimate of the indicator-difference expectation
/// `E[1{S(T)(1 + gamma_a) >= K} - 1{S(T) >= K} | S(t) = s]` for atom
/// `atom` of `channel`.
///
/// This is the jump sensitivity of the in-the-money probability; the jump
/// integrand of the call price itself is `F(t, s(1 + gamma)) - F(t, s)`,
/// which [`CallRepresentation`] uses.
#[allow(clippy::too_many_arguments)]
pub fn clark_ocone_call_kappa<T: Scalar>(
    coeffs: &MarketCoefficients<T>,
    t: T,
    s: T,
    strike: T,
    channel: usize,
    atom: usize,
    inner_paths: usize,
    seed: u64,
) -> Result<Estimate<T>> {
    let tau = check_nested(coeffs, t, inner_paths)?;
    let flat = coeffs
        .levy()
        .flat_index(crate::market::AtomRef { channel, atom })
        .ok_or_else(|| Error::InvalidInput(format!("no atom {atom} in channel {channel}")))?;
    let gamma = coeffs.gamma(0)[flat].as_f64();
    if gamma == 0.0 {
        return Ok(Estimate { value: T::zero(), std_error: T::zero(), n: inner_paths });
    }
    let inner = derive_seed(
        seed,
        &[t.as_f64().to_bits(), s.as_f64().to_bits(), strike.as_f64().to_bits(), flat as u64, 0x4A77A],
    );
    let k = strike.as_f64();
    let ind = |x: f64| if x >= k { 1.0 } else { 0.0 };
    let samples: Vec<f64> = terminal_samples(coeffs, tau, s, inner_paths, inner)
        .into_iter()
        .map(|x| ind(x * (1.0 + gamma)) - ind(x))
        .collect();
    Ok(estimate(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Atom, LevyMeasure, TimeGrid};

    fn bs(n: usize) -> MarketCoefficients<f64> {
        let grid = TimeGrid::new(1.0, n).unwrap();
        MarketCoefficients::constant(grid, 1.0, 0.05, vec![0.2], LevyMeasure::none(), vec![]).unwrap()
    }

    fn merton(n: usize) -> MarketCoefficients<f64> {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], levy, vec![0.5]).unwrap()
    }

    #[test]
    fn lognormal_limits() {
        let (c, m) = lognormal_call(1.2f64, 1.0, 0.0);
        assert!((c - 0.2).abs() < 1e-15 && m == 1.2);
        assert_eq!(lognormal_call(0.8f64, 1.0, 0.0), (0.0f64, 0.0));
        let (c, m) = lognormal_call(1.0f64, 0.0, 0.04);
        assert_eq!((c, m), (1.0, 1.0));
        // at-the-money forward, 20% vol: 2 Phi(0.1) - 1
        let (c, _) = lognormal_call(1.0f64, 1.0, 0.04);
        assert!((c - 0.0796556745).abs() < 1e-9);
    }

    #[test]
    fn beta_with_zero_strike_is_sigma_times_mean() {
        let m = bs(4);
        let b = clark_ocone_call_beta(&m, 0.25, 1.1, 1e-12, 20_000, 3).unwrap();
        let target = 0.2 * 1.1 * (0.05f64 * 0.75).exp();
        assert!(b[0].within(target, 3.0), "{:?} vs {target}", b[0]);
        let mj = merton(4);
        let b = clark_ocone_call_beta(&mj, 0.5, 1.0, 1e-12, 40_000, 4).unwrap();
        assert!(b[0].within(0.2 * (0.1f64 * 0.5).exp(), 3.0), "{:?}", b[0]);
    }

    #[test]
    fn beta_deep_out_of_the_money_vanishes() {
        let b = clark_ocone_call_beta(&bs(4), 0.9, 1.0, 10.0, 5_000, 5).unwrap();
        assert!(b[0].value.abs() < 1e-12);
    }

    #[test]
    fn beta_matches_lognormal_in_black_scholes() {
        let m = bs(10);
        for &(t, s) in &[(0.0, 1.0), (0.5, 0.9), (0.8, 1.2)] {
            let tau = 1.0 - t;
            let f = s * (0.05f64 * tau).exp();
            let (_, itm) = lognormal_call(f, 1.0, 0.04 * tau);
            let b = clark_ocone_call_beta(&m, t, s, 1.0, 20_000, 6).unwrap();
            assert!(b[0].within(0.2 * itm, 3.0), "t={t} s={s}: {:?} vs {}", b[0], 0.2 * itm);
        }
    }

    #[test]
    fn kappa_cases() {
        let m = merton(4);
        let k = clark_ocone_call_kappa(&m, 0.5, 1.0, 1e-12, 0, 0, 5_000, 7).unwrap();
        assert_eq!(k.value, 0.0);
        let k = clark_ocone_call_kappa(&m, 0.5, 1.0, 1.2, 0, 0, 20_000, 7).unwrap();
        assert!(k.value >= 0.0 && k.value <= 1.0);
        assert!(k.value > 3.0 * k.std_error);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        let flat = MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], levy, vec![0.0]).unwrap();
        assert_eq!(clark_ocone_call_kappa(&flat, 0.5, 1.0, 1.0, 0, 0, 100, 1).unwrap().value, 0.0);
        assert!(clark_ocone_call_kappa(&m, 0.5, 1.0, 1.0, 0, 3, 100, 1).is_err());
    }

    #[test]
    fn horizon_is_rejected() {
        assert_eq!(
            clark_ocone_call_beta(&bs(4), 1.0, 1.0, 1.0, 100, 1),
            Err(Error::TimeOutOfRange { t: 1.0, horizon: 1.0 })
        );
    }

    #[test]
    fn mixture_value_matches_black_scholes_and_monte_carlo() {
        let m = bs(10);
        let rep = CallRepresentation::new(&m, 1.0, Measure::Physical).unwrap();
        let (c, _) = lognormal_call(0.05f64.exp(), 1.0, 0.04);
        assert!((rep.initial_value() - c).abs() < 1e-12);

        let mj = merton(10);
        let rep = CallRepresentation::new(&mj, 1.0, Measure::Physical).unwrap();
        let samples: Vec<f64> = terminal_samples(&mj, 1.0, 1.0, 200_000, 11)
            .into_iter()
            .map(|x| (x - 1.0).max(0.0))
            .collect();
        let e = Estimate::from_samples(&samples);
        assert!(e.within(rep.initial_value(), 3.0), "{e:?} vs {}", rep.initial_value());
    }

    #[test]
    fn minimal_variance_value_is_risk_neutral_in_black_scholes() {
        let rep = CallRepresentation::new(&bs(10), 1.0, Measure::MinimalVariance).unwrap();
        let (c, _) = lognormal_call(1.0f64, 1.0, 0.04);
        assert!((rep.initial_value() - c).abs() < 1e-12);
    }

    #[test]
    fn mixture_terminal_value_is_payoff() {
        let rep = CallRepresentation::new(&merton(5), 1.0, Measure::Physical).unwrap();
        assert!((rep.value_at(5, 1.3) - 0.3).abs() < 1e-12);
        assert_eq!(rep.value_at(5, 0.7), 0.0);
    }
}
