//! Minimal-variance price by the explicit ratio formula, by the `Q*`
//! expectation and in closed form, plus the quadratic cost functional.

use serde::Serialize;

use crate::claims::{Claim, CountConvention, MartingaleRepresentation, Measure};
use crate::emm::{minimal_variance_kernel, weighted_terminal_mean};
use crate::error::{Error, Result};
use crate::hedging::{build_aux, integrating_factor_path, AuxCoefficients};
use crate::market::{simulate_market_drivers, simulate_wealth, DriverPath, MarketCoefficients, PathCursor, Policy, SimConfig};
use crate::oracle::{tree_emm_prices, PriceInterval, ScenarioTree};
use crate::scalar::Scalar;
use crate::stats::{ratio_estimate, try_par_map, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DirectFormula,
    EmmStar,
    ClosedForm,
    Theorem1,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DirectFormula => "direct_formula",
            Method::EmmStar => "emm_star",
            Method::ClosedForm => "closed_form",
            Method::Theorem1 => "theorem1",
            Method::Oracle => "oracle",
        }
    }

    /// Exact methods carry no sampling error.
    pub fn is_exact(self) -> bool {
        matches!(self, Method::ClosedForm | Method::Oracle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriceEstimate<T> {
    pub value: T,
    pub std_error: T,
    pub method: Method,
    pub n_paths: usize,
}

impl<T: Scalar> PriceEstimate<T> {
    pub fn exact(value: T, method: Method) -> Self {
        PriceEstimate { value, std_error: T::zero(), method, n_paths: 0 }
    }

    pub fn from_estimate(e: Estimate<T>, method: Method) -> Self {
        PriceEstimate { value: e.value, std_error: e.std_error, method, n_paths: e.n }
    }

    pub fn estimate(&self) -> Estimate<T> {
        Estimate { value: self.value, std_error: self.std_error, n: self.n_paths }
    }

    /// Difference over the combined standard error; infinite when both are
    /// exact and differ.
    pub fn z_score(&self, other: &PriceEstimate<T>) -> T {
        self.estimate().z_score(&other.estimate())
    }

    pub fn within(&self, target: T, k: T) -> bool {
        self.estimate().within(target, k)
    }
}

/// Terminal payoff of `claim` on each driver.
pub fn terminal_payoffs<T: Scalar>(coeffs: &MarketCoefficients<T>, claim: &Claim<T>, drivers: &[DriverPath<T>]) -> Result<Vec<T>> {
    claim.check_dims(coeffs)?;
    try_par_map(drivers.len(), |i| {
        let mut cur = PathCursor::new(coeffs, &drivers[i])?;
        while cur.advance() {}
        Ok(claim.payoff_at(&cur.state(), coeffs.levy()))
    })
}

/// `E[(X_{z,pi}(T) - F)^2 / 2]` on the given drivers.
pub fn cost_j<T, P>(z: T, coeffs: &MarketCoefficients<T>, claim: &Claim<T>, policy: &P, drivers: &[DriverPath<T>]) -> Result<Estimate<T>>
where
    T: Scalar,
    P: Policy<T> + Sync + ?Sized,
{
    let payoffs = terminal_payoffs(coeffs, claim, drivers)?;
    let samples = try_par_map(drivers.len(), |i| {
        let w = simulate_wealth(coeffs, policy, z, &drivers[i])?;
        let e = *w.values.last().expect("wealth has a terminal node") - payoffs[i];
        Ok::<T, Error>(T::half() * e * e)
    })?;
    Ok(Estimate::from_samples(&samples))
}

/// `cost_j` on freshly simulated drivers.
pub fn cost_j_sim<T, P>(z: T, coeffs: &MarketCoefficients<T>, claim: &Claim<T>, policy: &P, sim: SimConfig) -> Result<Estimate<T>>
where
    T: Scalar,
    P: Policy<T> + Sync + ?Sized,
{
    let drivers = simulate_market_drivers(coeffs, sim)?;
    cost_j(z, coeffs, claim, policy, &drivers)
}

/// Vertex of the parabola through three `(z, J)` points, with its leading
/// coefficient.
pub fn parabola_vertex(z: [f64; 3], j: [f64; 3]) -> Option<(f64, f64)> {
    let d1 = (j[1] - j[0]) / (z[1] - z[0]);
    let d2 = (j[2] - j[1]) / (z[2] - z[1]);
    let a = (d2 - d1) / (z[2] - z[0]);
    if !(a.is_finite() && a != 0.0) {
        return None;
    }
    let b = d1 - a * (z[0] + z[1]);
    Some((-b / (2.0 * a), a))
}

/// Ratio formula `E[R (F - X̂_0(T))] / E[R^2]` with `R = exp(-Â_T)` on the
/// given drivers; numerator and denominator share the paths.
pub fn price_direct_on<T: Scalar>(
    aux: &AuxCoefficients<T>,
    rep: &dyn MartingaleRepresentation<T>,
    drivers: &[DriverPath<T>],
) -> Result<PriceEstimate<T>> {
    let pairs = try_par_map(drivers.len(), |i| {
        let ifp = integrating_factor_path(aux, &drivers[i], rep)?;
        let n = ifp.n_steps();
        let r = (-ifp.a_hat[n]).exp();
        Ok::<(T, T), Error>((r * (ifp.payoff - r * ifp.integral[n]), r * r))
    })?;
    let (num, den): (Vec<T>, Vec<T>) = pairs.into_iter().unzip();
    let e = ratio_estimate(&num, &den).ok_or_else(|| Error::NonFinite("ratio formula denominator is not positive".into()))?;
    Ok(PriceEstimate::from_estimate(e, Method::DirectFormula))
}

pub fn price_direct<T: Scalar>(coeffs: &MarketCoefficients<T>, claim: &Claim<T>, sim: SimConfig) -> Result<PriceEstimate<T>> {
    let aux = build_aux(coeffs)?;
    let rep = claim.representation(coeffs, Measure::default())?;
    let drivers = simulate_market_drivers(coeffs, sim)?;
    price_direct_on(&aux, rep.as_ref(), &drivers)
}

/// `E[F Z*(T)]` on the given drivers.
pub fn price_emm_star_on<T: Scalar>(coeffs: &MarketCoefficients<T>, claim: &Claim<T>, drivers: &[DriverPath<T>]) -> Result<PriceEstimate<T>> {
    claim.check_dims(coeffs)?;
    let kernel = minimal_variance_kernel(coeffs)?;
    let q = weighted_terminal_mean(&kernel, coeffs, drivers, |st| claim.payoff_at(st, coeffs.levy()))?;
    Ok(PriceEstimate::from_estimate(q.estimate, Method::EmmStar))
}

pub fn price_emm_star<T: Scalar>(coeffs: &MarketCoefficients<T>, claim: &Claim<T>, sim: SimConfig) -> Result<PriceEstimate<T>> {
    let drivers = simulate_market_drivers(coeffs, sim)?;
    price_emm_star_on(coeffs, claim, &drivers)
}

/// One Brownian motion, one jump atom, `F = F0 + phi0 B(T) + psi0 N(T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MertonMixedParams<T> {
    pub alpha0: T,
    pub sigma0: T,
    pub lambda: T,
    pub gamma0: T,
    pub horizon: T,
    pub f0: T,
    pub phi0: T,
    pub psi0: T,
}

/// `F0 + (G sigma0 phi0 + lambda (1 + G gamma0) psi0) T` with
/// `G = -alpha0 / (sigma0^2 + lambda gamma0^2)`.
pub fn price_closed_form_merton_mixed<T: Scalar>(p: &MertonMixedParams<T>) -> Result<PriceEstimate<T>> {
    let d = p.sigma0 * p.sigma0 + p.lambda * p.gamma0 * p.gamma0;
    if !(d > T::zero()) {
        return Err(Error::MarketDegenerate { step: 0 });
    }
    let g = -p.alpha0 / d;
    if !(g * p.gamma0 > -T::one()) && p.lambda > T::zero() {
        return Err(Error::DensityNotPositive { step: 0, atom: 0, value: (g * p.gamma0).as_f64() });
    }
    let z = p.f0 + (g * p.sigma0 * p.phi0 + p.lambda * (T::one() + g * p.gamma0) * p.psi0) * p.horizon;
    Ok(PriceEstimate::exact(z, Method::ClosedForm))
}

/// Closed form where one exists: constant claims, and linear claims with raw
/// counts on a constant-coefficient market with one Brownian motion and one
/// jump atom.
pub fn price_closed_form<T: Scalar>(coeffs: &MarketCoefficients<T>, claim: &Claim<T>) -> Result<PriceEstimate<T>> {
    claim.check_dims(coeffs)?;
    match claim {
        Claim::Constant(v) => Ok(PriceEstimate::exact(*v, Method::ClosedForm)),
        Claim::LinearLevy { f0, phi, psi, convention: CountConvention::Raw }
            if coeffs.m() == 1 && coeffs.n_atoms() == 1 && coeffs.is_time_homogeneous() =>
        {
            price_closed_form_merton_mixed(&MertonMixedParams {
                alpha0: coeffs.alpha(0),
                sigma0: coeffs.sigma(0)[0],
                lambda: coeffs.levy().atom(0).intensity,
                gamma0: coeffs.gamma(0)[0],
                horizon: coeffs.grid().horizon(),
                f0: *f0,
                phi0: phi[0],
                psi0: psi[0],
            })
        }
        _ => Err(Error::Unsupported(format!(
            "no closed form for a {} claim on this market; it needs one Brownian motion, one jump atom and raw counts",
            claim.kind()
        ))),
    }
}

/// `[p_b, p_s]` over the martingale measures of a scenario tree.
pub fn price_bounds<T: Scalar>(tree: &ScenarioTree<T>, leaf_values: &[T]) -> Result<PriceInterval<T>> {
    Ok(tree_emm_prices(tree, leaf_values)?.interval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Atom, ConstantFraction, LevyMeasure, TimeGrid};

    fn merton(n: usize) -> MarketCoefficients<f64> {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], levy, vec![0.5]).unwrap()
    }

    const MERTON: MertonMixedParams<f64> =
        MertonMixedParams { alpha0: 0.1, sigma0: 0.2, lambda: 2.0, gamma0: 0.5, horizon: 1.0, f0: 10.0, phi0: 1.0, psi0: 0.5 };

    #[test]
    fn closed_form_examples() {
        // G = -0.1/0.54; z = 10 + G*0.2 + 2(1 + 0.5G)*0.5
        let g = -0.1 / 0.54;
        let z = price_closed_form_merton_mixed(&MERTON).unwrap();
        assert!((z.value - (10.0 + 0.2 * g + (1.0 + 0.5 * g))).abs() < 1e-14);
        assert!((z.value - 10.870_370_37).abs() < 1e-8 && z.std_error == 0.0);
        let flat = MertonMixedParams { phi0: 0.0, psi0: 0.0, ..MERTON };
        assert_eq!(price_closed_form_merton_mixed(&flat).unwrap().value, 10.0);
        let driftless = MertonMixedParams { alpha0: 0.0, ..MERTON };
        assert!((price_closed_form_merton_mixed(&driftless).unwrap().value - 11.0).abs() < 1e-14);
        let degenerate = MertonMixedParams { sigma0: 0.0, lambda: 0.0, ..MERTON };
        assert!(price_closed_form_merton_mixed(&degenerate).is_err());
    }

    #[test]
    fn constant_claim_prices() {
        let m = merton(20);
        let c = Claim::constant(3.0).unwrap();
        let d = price_direct(&m, &c, SimConfig::new(2_000, 1)).unwrap();
        assert!((d.value - 3.0).abs() < 1e-12, "{d:?}");
        let e = price_emm_star(&m, &c, SimConfig::new(20_000, 1)).unwrap();
        assert!(e.within(3.0, 3.0), "{e:?}");
    }

    #[test]
    fn cost_examples() {
        let m = merton(10);
        let c = Claim::constant(2.0).unwrap();
        let drivers = simulate_market_drivers(&m, SimConfig::new(100, 5)).unwrap();
        let flat = ConstantFraction(0.0);
        assert_eq!(cost_j(2.0, &m, &c, &flat, &drivers).unwrap().value, 0.0);
        let j = cost_j(2.7, &m, &c, &flat, &drivers).unwrap();
        assert!((j.value - 0.245).abs() < 1e-12 && j.std_error < 1e-12);
    }

    #[test]
    fn merton_linear_methods_agree() {
        let m = merton(50);
        let claim = Claim::linear(10.0, vec![1.0], vec![0.5], CountConvention::Raw).unwrap();
        let drivers = simulate_market_drivers(&m, SimConfig::new(20_000, 9)).unwrap();
        let aux = build_aux(&m).unwrap();
        let rep = claim.representation(&m, Measure::default()).unwrap();
        let d = price_direct_on(&aux, rep.as_ref(), &drivers).unwrap();
        let e = price_emm_star_on(&m, &claim, &drivers).unwrap();
        let exact = price_closed_form_merton_mixed(&MERTON).unwrap();
        assert!(d.z_score(&exact).abs() < 3.0, "{d:?}");
        assert!(e.z_score(&exact).abs() < 3.0, "{e:?}");
        assert!(d.z_score(&e).abs() < 3.0);
    }

    #[test]
    fn closed_form_dispatch() {
        let m = merton(7);
        let claim = Claim::linear(10.0, vec![1.0], vec![0.5], CountConvention::Raw).unwrap();
        assert!((price_closed_form(&m, &claim).unwrap().value - 10.870_370_37).abs() < 1e-8);
        assert_eq!(price_closed_form(&m, &Claim::constant(2.0).unwrap()).unwrap().value, 2.0);
        assert!(matches!(price_closed_form(&m, &Claim::call(1.0).unwrap()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn vertex_of_parabola() {
        let f = |z: f64| 2.0 * (z - 1.5) * (z - 1.5) + 0.3;
        let (v, a) = parabola_vertex([0.0, 1.0, 3.0], [f(0.0), f(1.0), f(3.0)]).unwrap();
        assert!((v - 1.5).abs() < 1e-12 && (a - 2.0).abs() < 1e-12);
        assert!(parabola_vertex([0.0, 1.0, 2.0], [1.0, 1.0, 1.0]).is_none());
    }
}
