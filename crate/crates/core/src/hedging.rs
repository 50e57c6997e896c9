//! Optimal feedback hedge and the explicit optimal wealth.
//!
//! The optimal exposure is affine in wealth, `pi X = G X + C(t)`, so the
//! wealth equation `dX = C dLambda + X dGamma` is linear and can be solved
//! with the integrating factor `exp(Â_t)`:
//! `X̂_z(t) = e^{-Â_t} (z + int_0^t e^{Â_s} C(s) d(K + Lambda)_s)`.

use serde::Serialize;

use crate::claims::MartingaleRepresentation;
use crate::error::{Error, Result};
use crate::market::{check_compatible, simulate_wealth, DriverPath, MarketCoefficients, PathCursor, PathState, Policy};
use crate::scalar::{dot, Scalar};

/// Feedback gain `G(t) = -alpha / (sigma.sigma + sum gamma^2 lambda)` at `step`.
pub fn gain_g<T: Scalar>(coeffs: &MarketCoefficients<T>, step: usize) -> Result<T> {
    coeffs.gain(step)
}

/// `(sigma.beta + sum gamma kappa lambda) / D`, the claim's hedge ratio in
/// units of exposure.
fn hedge_intercept<T: Scalar>(coeffs: &MarketCoefficients<T>, step: usize, beta: &[T], kappa: &[T]) -> Result<T> {
    let d = coeffs.variance_rate(step);
    if !(d > T::zero()) {
        return Err(Error::MarketDegenerate { step });
    }
    let mut num = dot(coeffs.sigma(step), beta);
    for (a, (&g, &k)) in coeffs.gamma(step).iter().zip(kappa).enumerate() {
        num = num + g * k * coeffs.levy().atom(a).intensity;
    }
    Ok(num / d)
}

/// Optimal dollar exposure `pi X = G (X - F_t) + (sigma.beta + sum gamma kappa lambda) / D`.
pub fn optimal_exposure<T: Scalar>(
    coeffs: &MarketCoefficients<T>,
    step: usize,
    wealth: T,
    f_t: T,
    beta: &[T],
    kappa: &[T],
) -> Result<T> {
    let g = coeffs.gain(step)?;
    Ok(g * (wealth - f_t) + hedge_intercept(coeffs, step, beta, kappa)?)
}

/// Optimal fraction
/// `pi = (F_t alpha + sigma.beta + sum gamma kappa lambda - X alpha) / (X D)`.
pub fn optimal_portfolio<T: Scalar>(
    coeffs: &MarketCoefficients<T>,
    step: usize,
    wealth: T,
    f_t: T,
    beta: &[T],
    kappa: &[T],
) -> Result<T> {
    if wealth == T::zero() {
        return Err(Error::ZeroWealth);
    }
    let d = coeffs.variance_rate(step);
    if !(d > T::zero()) {
        return Err(Error::MarketDegenerate { step });
    }
    let alpha = coeffs.alpha(step);
    let mut num = f_t * alpha + dot(coeffs.sigma(step), beta) - wealth * alpha;
    for (a, (&g, &k)) in coeffs.gamma(step).iter().zip(kappa).enumerate() {
        num = num + g * k * coeffs.levy().atom(a).intensity;
    }
    Ok(num / (wealth * d))
}

/// Per-step coefficients of the integrating factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxCoefficients<T> {
    coeffs: MarketCoefficients<T>,
    g: Vec<T>,
    alpha1: Vec<T>,
    sigma1: Vec<T>,
    gamma1: Vec<T>,
    rho_hat: Vec<T>,
    theta_hat: Vec<T>,
}

/// Builds `G`, `(alpha1, sigma1, gamma1) = G (alpha, sigma, gamma)`,
/// `lambda_hat = -sigma1`, `theta_hat = -ln(1 + gamma1)` and
/// `rho_hat = -[alpha1 - |sigma1|^2 / 2 + sum (ln(1 + gamma1) - gamma1) lambda]`.
pub fn build_aux<T: Scalar>(coeffs: &MarketCoefficients<T>) -> Result<AuxCoefficients<T>> {
    let n = coeffs.n_steps();
    let (m, k) = (coeffs.m(), coeffs.n_atoms());
    let mut aux = AuxCoefficients {
        coeffs: coeffs.clone(),
        g: Vec::with_capacity(n),
        alpha1: Vec::with_capacity(n),
        sigma1: Vec::with_capacity(n * m),
        gamma1: Vec::with_capacity(n * k),
        rho_hat: Vec::with_capacity(n),
        theta_hat: Vec::with_capacity(n * k),
    };
    for step in 0..n {
        let g = coeffs.gain(step)?;
        let alpha1 = g * coeffs.alpha(step);
        let mut half_sq = T::zero();
        for &s in coeffs.sigma(step) {
            aux.sigma1.push(g * s);
            half_sq = half_sq + T::half() * g * s * g * s;
        }
        let mut jump = T::zero();
        for (atom, &gamma) in coeffs.gamma(step).iter().enumerate() {
            let g1 = g * gamma;
            if !(T::one() + g1 > T::zero()) {
                return Err(Error::IntegratingFactorUndefined { step, atom, value: (T::one() + g1).as_f64() });
            }
            let log = g1.ln_1p();
            aux.gamma1.push(g1);
            aux.theta_hat.push(-log);
            jump = jump + (log - g1) * coeffs.levy().atom(atom).intensity;
        }
        aux.g.push(g);
        aux.alpha1.push(alpha1);
        aux.rho_hat.push(-(alpha1 - half_sq + jump));
    }
    Ok(aux)
}

impl<T: Scalar> AuxCoefficients<T> {
    pub fn coeffs(&self) -> &MarketCoefficients<T> {
        &self.coeffs
    }

    pub fn g(&self, step: usize) -> T {
        self.g[step]
    }

    pub fn alpha1(&self, step: usize) -> T {
        self.alpha1[step]
    }

    pub fn sigma1(&self, step: usize) -> &[T] {
        let m = self.coeffs.m();
        &self.sigma1[step * m..(step + 1) * m]
    }

    /// `lambda_hat = -sigma1`.
    pub fn lambda_hat(&self, step: usize) -> Vec<T> {
        self.sigma1(step).iter().map(|&x| -x).collect()
    }

    pub fn gamma1(&self, step: usize) -> &[T] {
        let k = self.coeffs.n_atoms();
        &self.gamma1[step * k..(step + 1) * k]
    }

    pub fn theta_hat(&self, step: usize) -> &[T] {
        let k = self.coeffs.n_atoms();
        &self.theta_hat[step * k..(step + 1) * k]
    }

    pub fn rho_hat(&self, step: usize) -> T {
        self.rho_hat[step]
    }
}

/// Pathwise integrating factor and the pieces of the explicit wealth.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratingFactorPath<T> {
    /// `Â_t` per node.
    pub a_hat: Vec<T>,
    /// Cumulative `K_t` per node.
    pub k: Vec<T>,
    /// Cumulative `Lambda_t = int alpha dt + sigma dB + gamma dÑ` per node.
    pub lambda: Vec<T>,
    /// Exposure intercept `C(t) = (F alpha + sigma.beta + sum gamma kappa lambda) / D`
    /// per step (left node).
    pub c: Vec<T>,
    /// `int_0^t e^{Â_s} C(s) d(K + Lambda)_s` per node.
    pub integral: Vec<T>,
    /// Asset price per node.
    pub price: Vec<T>,
    /// Claim value process `F(t)` per node.
    pub claim_value: Vec<T>,
    /// Terminal payoff `F`.
    pub payoff: T,
}

impl<T: Scalar> IntegratingFactorPath<T> {
    /// `Ŷ_t = exp(Â_t)`.
    pub fn y_hat(&self, node: usize) -> T {
        self.a_hat[node].exp()
    }

    pub fn n_steps(&self) -> usize {
        self.a_hat.len() - 1
    }
}

/// Accumulates `Â`, `K`, `Lambda`, `C` and the wealth integral along one
/// driver path, with the claim's value process supplied by `rep`.
///
/// Integrands are frozen at the left node of each step; jump terms use the
/// realised counts exactly.
pub fn integrating_factor_path<T: Scalar>(
    aux: &AuxCoefficients<T>,
    driver: &DriverPath<T>,
    rep: &dyn MartingaleRepresentation<T>,
) -> Result<IntegratingFactorPath<T>> {
    let coeffs = aux.coeffs();
    check_compatible(coeffs, driver)?;
    let n = coeffs.n_steps();
    let dt = coeffs.grid().dt();
    let lambda_atoms = coeffs.levy().intensities();
    let mut cur = PathCursor::new(coeffs, driver)?;
    let mut out = IntegratingFactorPath {
        a_hat: Vec::with_capacity(n + 1),
        k: Vec::with_capacity(n + 1),
        lambda: Vec::with_capacity(n + 1),
        c: Vec::with_capacity(n),
        integral: Vec::with_capacity(n + 1),
        price: Vec::with_capacity(n + 1),
        claim_value: Vec::with_capacity(n + 1),
        payoff: T::zero(),
    };
    let (mut a, mut k, mut lam, mut integral) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut beta = vec![T::zero(); coeffs.m()];
    let mut kappa = vec![T::zero(); coeffs.n_atoms()];
    for step in 0..n {
        let state = cur.state();
        let f_t = rep.value(&state);
        rep.beta(&state, &mut beta);
        for (atom, kp) in kappa.iter_mut().enumerate() {
            *kp = rep.kappa(&state, atom);
        }
        let c = f_t * coeffs.alpha(step) / coeffs.variance_rate(step) + hedge_intercept(coeffs, step, &beta, &kappa)?;
        out.a_hat.push(a);
        out.k.push(k);
        out.lambda.push(lam);
        out.integral.push(integral);
        out.price.push(state.price);
        out.claim_value.push(f_t);
        out.c.push(c);

        let sigma = coeffs.sigma(step);
        let sigma1 = aux.sigma1(step);
        let gamma = coeffs.gamma(step);
        let gamma1 = aux.gamma1(step);
        let db = driver.brownian(step);
        let sig_db = dot(sigma, db);
        let compensator = coeffs.compensator_rate(step);
        // dLambda = alpha dt + sigma dB + gamma dÑ
        let mut d_lam = (coeffs.alpha(step) - compensator) * dt + sig_db;
        // dK with lambda_hat = -sigma1 and e^{theta_hat} - 1 = -gamma1 / (1 + gamma1)
        let mut d_k = -dot(sigma1, sigma) * dt;
        // dÂ = -[(alpha1 - |sigma1|^2/2 - sum gamma1 lambda) dt + sigma1 dB + sum ln(1 + gamma1) dN]
        let mut d_a = -((aux.alpha1(step) - T::half() * dot(sigma1, sigma1)) * dt + dot(sigma1, db));
        for (atom, &g1) in gamma1.iter().enumerate() {
            d_a = d_a + g1 * lambda_atoms[atom] * dt;
        }
        for j in driver.jumps(step) {
            let (g, g1) = (gamma[j.atom], gamma1[j.atom]);
            d_lam = d_lam + g;
            d_k = d_k - g1 * g / (T::one() + g1);
            d_a = d_a - g1.ln_1p();
        }
        // e^{Â} d(K + Lambda) = (D / alpha) d(e^{Â}); the increment of e^{Â} is exact on the step
        let alpha = coeffs.alpha(step);
        let weight = if alpha != T::zero() {
            a.exp() * d_a.exp_m1() * coeffs.variance_rate(step) / alpha
        } else {
            a.exp() * (d_k + d_lam)
        };
        integral = integral + c * weight;
        a = a + d_a;
        k = k + d_k;
        lam = lam + d_lam;
        cur.advance();
    }
    let state = cur.state();
    out.a_hat.push(a);
    out.k.push(k);
    out.lambda.push(lam);
    out.integral.push(integral);
    out.price.push(state.price);
    out.claim_value.push(rep.value(&state));
    out.payoff = rep.payoff(&state);
    if !a.is_finite() || !integral.is_finite() {
        return Err(Error::NonFinite("integrating factor path".into()));
    }
    Ok(out)
}

/// `X̂_z(t)` per node from the integrating factor.
pub fn optimal_wealth_explicit<T: Scalar>(z: T, ifp: &IntegratingFactorPath<T>) -> Vec<T> {
    ifp.a_hat.iter().zip(&ifp.integral).map(|(&a, &i)| (-a).exp() * (z + i)).collect()
}

/// `dX̂_z(t)/dz = exp(-Â_t)` at node `node`.
pub fn wealth_z_sensitivity<T: Scalar>(ifp: &IntegratingFactorPath<T>, node: usize) -> T {
    (-ifp.a_hat[node]).exp()
}

/// The optimal feedback hedge as a [`Policy`] for [`crate::market::simulate_wealth`].
pub struct OptimalPolicy<'a, T> {
    coeffs: &'a MarketCoefficients<T>,
    rep: &'a dyn MartingaleRepresentation<T>,
}

impl<'a, T: Scalar> OptimalPolicy<'a, T> {
    pub fn new(coeffs: &'a MarketCoefficients<T>, rep: &'a dyn MartingaleRepresentation<T>) -> Self {
        OptimalPolicy { coeffs, rep }
    }

    fn inputs(&self, state: &PathState<'_, T>) -> (usize, T, Vec<T>, Vec<T>) {
        let step = state.step.min(self.coeffs.n_steps() - 1);
        let mut beta = vec![T::zero(); self.coeffs.m()];
        self.rep.beta(state, &mut beta);
        let kappa = (0..self.coeffs.n_atoms()).map(|a| self.rep.kappa(state, a)).collect();
        (step, self.rep.value(state), beta, kappa)
    }
}

impl<T: Scalar> Policy<T> for OptimalPolicy<'_, T> {
    fn fraction(&self, state: &PathState<'_, T>, wealth: T) -> T {
        let (step, f_t, beta, kappa) = self.inputs(state);
        optimal_portfolio(self.coeffs, step, wealth, f_t, &beta, &kappa).unwrap_or(T::nan())
    }

    fn exposure(&self, state: &PathState<'_, T>, wealth: T) -> T {
        let (step, f_t, beta, kappa) = self.inputs(state);
        optimal_exposure(self.coeffs, step, wealth, f_t, &beta, &kappa).unwrap_or(T::nan())
    }

    fn name(&self) -> &str {
        "optimal-feedback"
    }
}

/// One row of a hedge report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HedgeRow<T> {
    pub path: usize,
    pub t: T,
    #[serde(rename = "S")]
    pub s: T,
    #[serde(rename = "X_hat")]
    pub x_hat: T,
    /// Optimal fraction; `NaN` where wealth is zero.
    pub pi_hat: T,
    /// Optimal exposure `pi X`.
    pub exposure: T,
    #[serde(rename = "A_hat")]
    pub a_hat: T,
}

/// Per-node hedge table for one path started from `z`: wealth and
/// positions come from trading the feedback rule on the grid, `Â` from the
/// integrating factor of the same path.
pub fn hedge_rows<T: Scalar>(
    aux: &AuxCoefficients<T>,
    rep: &dyn MartingaleRepresentation<T>,
    driver: &DriverPath<T>,
    z: T,
    path: usize,
) -> Result<Vec<HedgeRow<T>>> {
    let coeffs = aux.coeffs();
    let ifp = integrating_factor_path(aux, driver, rep)?;
    let policy = OptimalPolicy::new(coeffs, rep);
    let wealth = simulate_wealth(coeffs, &policy, z, driver)?.values;
    let mut cur = PathCursor::new(coeffs, driver)?;
    let mut rows = Vec::with_capacity(coeffs.n_steps() + 1);
    loop {
        let state = cur.state();
        let node = state.step;
        let exposure = policy.exposure(&state, wealth[node]);
        let pi_hat = if wealth[node] == T::zero() { T::nan() } else { exposure / wealth[node] };
        rows.push(HedgeRow {
            path,
            t: state.time,
            s: state.price,
            x_hat: wealth[node],
            pi_hat,
            exposure,
            a_hat: ifp.a_hat[node],
        });
        if !cur.advance() {
            break;
        }
    }
    Ok(rows)
}

/// Pathwise agreement of the explicit wealth with the traded wealth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WealthAgreement {
    /// Mean over paths of `sup_t |X_explicit - X_traded|`.
    pub mean_sup_abs: f64,
    /// `mean_sup_abs` over the mean of `sup_t |X_traded|`.
    pub relative: f64,
}

pub fn explicit_vs_traded<T: Scalar>(
    aux: &AuxCoefficients<T>,
    rep: &dyn MartingaleRepresentation<T>,
    drivers: &[DriverPath<T>],
    z: T,
) -> Result<WealthAgreement> {
    let coeffs = aux.coeffs();
    let policy = OptimalPolicy::new(coeffs, rep);
    let pairs = crate::stats::try_par_map(drivers.len(), |i| {
        let ifp = integrating_factor_path(aux, &drivers[i], rep)?;
        let explicit = optimal_wealth_explicit(z, &ifp);
        let traded = simulate_wealth(coeffs, &policy, z, &drivers[i])?.values;
        let diff = explicit.iter().zip(&traded).fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs().as_f64()));
        let size = traded.iter().fold(0.0f64, |m, &b| m.max(b.abs().as_f64()));
        Ok::<(f64, f64), Error>((diff, size))
    })?;
    let n = pairs.len().max(1) as f64;
    let mean_sup_abs = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_size = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(WealthAgreement { mean_sup_abs, relative: mean_sup_abs / mean_size.max(f64::MIN_POSITIVE) })
}

/// Relative gap between the central difference of `X̂_z(T)` in `z` (step
/// `h`) and `exp(-Â_T)`.
pub fn affinity_residual<T: Scalar>(ifp: &IntegratingFactorPath<T>, z: T, h: T) -> T {
    let n = ifp.n_steps();
    let up = optimal_wealth_explicit(z + h, ifp)[n];
    let down = optimal_wealth_explicit(z - h, ifp)[n];
    let exact = wealth_z_sensitivity(ifp, n);
    ((up - down) / (T::two() * h) - exact).abs() / exact
}
