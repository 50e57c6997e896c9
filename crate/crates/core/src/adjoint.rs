//! Adjoint processes `(p, q, r)` of the hedging problem by least-squares
//! Monte Carlo, first-order conditions, and the pricing identity
//! `z = E_Q[F] + E_Q[int q dB + sum int r dÑ]`.

use serde::Serialize;

use crate::claims::MartingaleRepresentation;
use crate::emm::{density_path, solve_m0_system, GirsanovKernel, M0Solution};
use crate::error::{Error, Result};
use crate::hedging::OptimalPolicy;
use crate::linalg::{lstsq, Matrix};
use crate::market::{simulate_wealth, DriverPath, MarketCoefficients, PathCursor};
use crate::scalar::{dot, Scalar};
use crate::stats::{par_map, try_par_map, Estimate, ROUNDOFF};

/// Paths per block when assembling normal equations; blocks are summed in
/// index order so results do not depend on the thread count.
const BLOCK: usize = 512;

/// `x pi (alpha p + sigma.q + sum gamma r lambda)` at `step`.
pub fn hamiltonian<T: Scalar>(coeffs: &MarketCoefficients<T>, step: usize, x: T, pi: T, p: T, q: &[T], r: &[T]) -> Result<T> {
    if q.len() != coeffs.m() || r.len() != coeffs.n_atoms() {
        return Err(Error::DimensionMismatch(format!("q needs {} and r {} entries", coeffs.m(), coeffs.n_atoms())));
    }
    Ok(x * pi * first_order_term(coeffs, step, p, q, r))
}

fn first_order_term<T: Scalar>(coeffs: &MarketCoefficients<T>, step: usize, p: T, q: &[T], r: &[T]) -> T {
    let mut h = coeffs.alpha(step) * p + dot(coeffs.sigma(step), q);
    for (a, (&g, &ra)) in coeffs.gamma(step).iter().zip(r).enumerate() {
        h = h + g * ra * coeffs.levy().atom(a).intensity;
    }
    h
}

/// Paths traded with the optimal feedback from `z`, stored node-major.
#[derive(Debug, Clone)]
pub struct HedgedEnsemble<T> {
    pub z: T,
    n_paths: usize,
    n_steps: usize,
    m: usize,
    k: usize,
    drivers: Vec<DriverPath<T>>,
    price: Vec<T>,
    wealth: Vec<T>,
    claim_value: Vec<T>,
    payoff: Vec<T>,
    db: Vec<T>,
    dn: Vec<T>,
}

impl<T: Scalar> HedgedEnsemble<T> {
    /// Simulates wealth under the optimal feedback for `rep` on every driver.
    pub fn simulate(
        coeffs: &MarketCoefficients<T>,
        rep: &dyn MartingaleRepresentation<T>,
        drivers: Vec<DriverPath<T>>,
        z: T,
    ) -> Result<Self> {
        let (n, n_paths, m, k) = (coeffs.n_steps(), drivers.len(), coeffs.m(), coeffs.n_atoms());
        if n_paths == 0 {
            return Err(Error::InvalidInput("ensemble needs at least one path".into()));
        }
        let policy = OptimalPolicy::new(coeffs, rep);
        let dt = coeffs.grid().dt();
        let lambda = coeffs.levy().intensities();
        let per_path = try_par_map(n_paths, |i| {
            let driver = &drivers[i];
            let wealth = simulate_wealth(coeffs, &policy, z, driver)?.values;
            let mut cur = PathCursor::new(coeffs, driver)?;
            let mut price = Vec::with_capacity(n + 1);
            let mut value = Vec::with_capacity(n + 1);
            loop {
                let st = cur.state();
                price.push(st.price);
                value.push(rep.value(&st));
                if !cur.advance() {
                    break;
                }
            }
            let payoff = rep.payoff(&cur.state());
            Ok::<_, Error>((wealth, price, value, payoff))
        })?;
        let mut ens = HedgedEnsemble {
            z,
            n_paths,
            n_steps: n,
            m,
            k,
            price: vec![T::zero(); (n + 1) * n_paths],
            wealth: vec![T::zero(); (n + 1) * n_paths],
            claim_value: vec![T::zero(); (n + 1) * n_paths],
            payoff: Vec::with_capacity(n_paths),
            db: vec![T::zero(); n * n_paths * m],
            dn: vec![T::zero(); n * n_paths * k],
            drivers: Vec::new(),
        };
        for (i, (wealth, price, value, payoff)) in per_path.into_iter().enumerate() {
            for node in 0..=n {
                ens.wealth[node * n_paths + i] = wealth[node];
                ens.price[node * n_paths + i] = price[node];
                ens.claim_value[node * n_paths + i] = value[node];
            }
            ens.payoff.push(payoff);
            for step in 0..n {
                let row = step * n_paths + i;
                ens.db[row * m..(row + 1) * m].copy_from_slice(drivers[i].brownian(step));
                for (a, c) in drivers[i].step_counts(step).into_iter().enumerate() {
                    ens.dn[row * k + a] = c - lambda[a] * dt;
                }
            }
        }
        ens.drivers = drivers;
        Ok(ens)
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn drivers(&self) -> &[DriverPath<T>] {
        &self.drivers
    }

    pub fn price(&self, node: usize, path: usize) -> T {
        self.price[node * self.n_paths + path]
    }

    pub fn wealth(&self, node: usize, path: usize) -> T {
        self.wealth[node * self.n_paths + path]
    }

    pub fn claim_value(&self, node: usize, path: usize) -> T {
        self.claim_value[node * self.n_paths + path]
    }

    pub fn payoff(&self, path: usize) -> T {
        self.payoff[path]
    }

    /// Brownian increment of `step` on `path`.
    pub fn db(&self, step: usize, path: usize) -> &[T] {
        let row = step * self.n_paths + path;
        &self.db[row * self.m..(row + 1) * self.m]
    }

    /// Compensated jump counts of `step` on `path`.
    pub fn dn(&self, step: usize, path: usize) -> &[T] {
        let row = step * self.n_paths + path;
        &self.dn[row * self.k..(row + 1) * self.k]
    }

    /// Terminal hedging error `X(T) - F` per path.
    pub fn terminal_error(&self) -> Vec<T> {
        (0..self.n_paths).map(|i| self.wealth(self.n_steps, i) - self.payoff[i]).collect()
    }
}

/// Regression features: monomials up to `degree` in the standardised state
/// `(S, X, F(t))`, plus `1{S > K}` when a strike is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BasisSpec<T> {
    pub degree: usize,
    pub claim_value: bool,
    pub moneyness_strike: Option<T>,
}

impl<T: Scalar> Default for BasisSpec<T> {
    fn default() -> Self {
        BasisSpec { degree: 2, claim_value: true, moneyness_strike: None }
    }
}

impl<T: Scalar> BasisSpec<T> {
    fn exponents(&self) -> Vec<Vec<usize>> {
        let n_features = if self.claim_value { 3 } else { 2 };
        let mut out = vec![vec![0; n_features]];
        let mut frontier = out.clone();
        for _ in 0..self.degree {
            let mut next = Vec::new();
            for e in &frontier {
                // extend only at or after the last raised feature to avoid duplicates
                let start = e.iter().rposition(|&x| x > 0).unwrap_or(0);
                for f in start..n_features {
                    let mut e2 = e.clone();
                    e2[f] += 1;
                    next.push(e2);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    pub fn n_functions(&self) -> usize {
        self.exponents().len() + usize::from(self.moneyness_strike.is_some())
    }
}

/// Basis values per path at one node.
fn basis_at<T: Scalar>(ens: &HedgedEnsemble<T>, node: usize, spec: &BasisSpec<T>, exps: &[Vec<usize>]) -> Vec<Vec<T>> {
    let n = ens.n_paths;
    let mut raw: Vec<Vec<T>> = vec![
        (0..n).map(|i| ens.price(node, i)).collect(),
        (0..n).map(|i| ens.wealth(node, i)).collect(),
    ];
    if spec.claim_value {
        raw.push((0..n).map(|i| ens.claim_value(node, i)).collect());
    }
    let standardised: Vec<Vec<T>> = raw
        .iter()
        .map(|col| {
            let (mean, var) = crate::stats::mean_var(col);
            let sd = var.sqrt();
            let scale = T::one().max(mean.abs());
            if sd > T::of(1e-12) * scale {
                col.iter().map(|&x| (x - mean) / sd).collect()
            } else {
                vec![T::zero(); n]
            }
        })
        .collect();
    par_map(n, |i| {
        let mut row: Vec<T> = exps
            .iter()
            .map(|e| e.iter().enumerate().fold(T::one(), |acc, (f, &p)| acc * standardised[f][i].powi(p as i32)))
            .collect();
        if let Some(k) = spec.moneyness_strike {
            row.push(if ens.price(node, i) > k { T::one() } else { T::zero() });
        }
        row
    })
}

/// Estimated `(p, q, r)`: `p` per node and path, `q` per step, path and
/// Brownian channel, `r` per step, path and atom.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTriple<T> {
    n_paths: usize,
    m: usize,
    k: usize,
    pub p: Vec<Vec<T>>,
    pub q: Vec<Vec<T>>,
    pub r: Vec<Vec<T>>,
}

impl<T: Scalar> AdjointTriple<T> {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.q.len()
    }

    pub fn q_at(&self, step: usize, path: usize) -> &[T] {
        &self.q[step][path * self.m..(path + 1) * self.m]
    }

    pub fn r_at(&self, step: usize, path: usize) -> &[T] {
        &self.r[step][path * self.k..(path + 1) * self.k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    /// In-sample `R^2` of the step regression.
    pub r2: f64,
    /// Root mean square regression residual.
    pub residual_rms: f64,
    pub rank: usize,
    pub columns: usize,
    /// Sample mean of `alpha p + sigma.q + sum gamma r lambda`.
    pub cond_residual: f64,
}

#[derive(Debug, Clone)]
pub struct AdjointSolution<T> {
    pub triple: AdjointTriple<T>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Backward regression: at each step the next value of `p` is regressed on
/// `[phi, phi * dB_j, phi * dÑ_a]` with `phi` the basis at the left node.
/// The three coefficient blocks give `p`, `q_j` and `r_a` as functions of
/// the state.
pub fn solve_adjoint_lsmc<T: Scalar>(
    coeffs: &MarketCoefficients<T>,
    ens: &HedgedEnsemble<T>,
    basis: &BasisSpec<T>,
) -> Result<AdjointSolution<T>> {
    if ens.n_steps != coeffs.n_steps() || ens.m != coeffs.m() || ens.k != coeffs.n_atoms() {
        return Err(Error::DimensionMismatch("ensemble does not match the market".into()));
    }
    let (n, np, m, k) = (ens.n_steps, ens.n_paths, ens.m, ens.k);
    let exps = basis.exponents();
    let nb = basis.n_functions();
    let cols = nb * (1 + m + k);
    let mut p = vec![Vec::new(); n + 1];
    let mut q = vec![Vec::new(); n];
    let mut r = vec![Vec::new(); n];
    p[n] = ens.terminal_error();
    let mut diagnostics = Vec::with_capacity(n);
    for step in (0..n).rev() {
        let phi = basis_at(ens, step, basis, &exps);
        let y = &p[step + 1];
        let design_row = |i: usize| -> Vec<T> {
            let mut row = Vec::with_capacity(cols);
            row.extend_from_slice(&phi[i]);
            for &d in ens.db(step, i).iter().chain(ens.dn(step, i)) {
                row.extend(phi[i].iter().map(|&f| f * d));
            }
            row
        };
        let blocks = par_map(np.div_ceil(BLOCK), |b| {
            let mut ata = vec![T::zero(); cols * cols];
            let mut aty = vec![T::zero(); cols];
            for i in b * BLOCK..((b + 1) * BLOCK).min(np) {
                let row = design_row(i);
                for (u, &ru) in row.iter().enumerate() {
                    aty[u] = aty[u] + ru * y[i];
                    for (v, &rv) in row.iter().enumerate().skip(u) {
                        ata[u * cols + v] = ata[u * cols + v] + ru * rv;
                    }
                }
            }
            (ata, aty)
        });
        let mut normal = Matrix::zeros(cols, cols);
        let mut rhs = vec![T::zero(); cols];
        for (ata, aty) in &blocks {
            for u in 0..cols {
                rhs[u] = rhs[u] + aty[u];
                for v in u..cols {
                    normal.add_to(u, v, ata[u * cols + v]);
                }
            }
        }
        for u in 0..cols {
            for v in 0..u {
                normal.set(u, v, normal.get(v, u));
            }
        }
        if (0..cols).any(|u| !normal.get(u, u).is_finite()) || rhs.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularRegression { step, reason: "non-finite design".into() });
        }
        let ls = lstsq(&normal, &rhs, T::of(1e-13));
        if ls.rank == 0 {
            return Err(Error::SingularRegression { step, reason: "design has rank zero".into() });
        }
        let coef = ls.x;
        let (c_p, rest) = coef.split_at(nb);
        let mut p_step = Vec::with_capacity(np);
        let mut q_step = Vec::with_capacity(np * m);
        let mut r_step = Vec::with_capacity(np * k);
        let mut ss_res = 0.0;
        for i in 0..np {
            let f = &phi[i];
            p_step.push(dot(f, c_p));
            for j in 0..m {
                q_step.push(dot(f, &rest[j * nb..(j + 1) * nb]));
            }
            for a in 0..k {
                r_step.push(dot(f, &rest[(m + a) * nb..(m + a + 1) * nb]));
            }
            let fit = dot(&design_row(i), &coef);
            ss_res += (y[i] - fit).as_f64().powi(2);
        }
        let (_, var_y) = crate::stats::mean_var(y);
        let ss_tot = var_y.as_f64() * (np.max(2) - 1) as f64;
        let cond: Vec<T> = (0..np)
            .map(|i| first_order_term(coeffs, step, p_step[i], &q_step[i * m..(i + 1) * m], &r_step[i * k..(i + 1) * k]))
            .collect();
        diagnostics.push(StepDiagnostics {
            step,
            t: (coeffs.grid().node(step)).as_f64(),
            r2: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
            residual_rms: (ss_res / np as f64).sqrt(),
            rank: ls.rank,
            columns: cols,
            cond_residual: crate::stats::mean_var(&cond).0.as_f64(),
        });
        p[step] = p_step;
        q[step] = q_step;
        r[step] = r_step;
    }
    diagnostics.reverse();
    Ok(AdjointSolution { triple: AdjointTriple { n_paths: np, m, k, p, q, r }, diagnostics })
}

/// First-order checks of the optimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstOrderResiduals<T> {
    /// `p(0)`: the regression value at the root.
    pub p0: Estimate<T>,
    /// Sample mean of `p(T) = X(T) - F`, the tower-property version of `p(0)`.
    pub terminal_mean: Estimate<T>,
    /// Per-step sample mean of `alpha p + sigma.q + sum gamma r lambda`.
    pub cond_residual: Vec<Estimate<T>>,
    /// Time integral of the same quantity per path, averaged.
    pub cond_integral: Estimate<T>,
    /// Time integral of the mean absolute sizes of the three terms; the
    /// yardstick for `cond_integral` when its sampling error degenerates.
    pub cond_scale: T,
}

impl<T: Scalar> FirstOrderResiduals<T> {
    /// `|cond_integral| <= k SE + rel * cond_scale + ROUNDOFF`.
    pub fn cond_holds(&self, k: T, rel: T) -> bool {
        let c = &self.cond_integral;
        c.value.abs() <= k * c.std_error + rel * self.cond_scale + T::of(ROUNDOFF)
    }
}

pub fn first_order_residuals<T: Scalar>(triple: &AdjointTriple<T>, coeffs: &MarketCoefficients<T>) -> FirstOrderResiduals<T> {
    let (n, np) = (triple.n_steps(), triple.n_paths);
    let dt = coeffs.grid().dt();
    let mut integral = vec![T::zero(); np];
    let mut per_step = Vec::with_capacity(n);
    let mut scale = T::zero();
    for step in 0..n {
        let vals: Vec<T> = (0..np)
            .map(|i| first_order_term(coeffs, step, triple.p[step][i], triple.q_at(step, i), triple.r_at(step, i)))
            .collect();
        let mut size = T::zero();
        for i in 0..np {
            size = size + (coeffs.alpha(step) * triple.p[step][i]).abs();
            size = size + coeffs.sigma(step).iter().zip(triple.q_at(step, i)).fold(T::zero(), |a, (&s, &q)| a + (s * q).abs());
            for (a, (&g, &r)) in coeffs.gamma(step).iter().zip(triple.r_at(step, i)).enumerate() {
                size = size + (g * r * coeffs.levy().atom(a).intensity).abs();
            }
        }
        scale = scale + size / T::of_usize(np) * dt;
        for (acc, &v) in integral.iter_mut().zip(&vals) {
            *acc = *acc + v * dt;
        }
        per_step.push(Estimate::from_samples(&vals));
    }
    // the root value is shared by all paths; its error is that of the mean it regresses
    let terminal_mean = Estimate::from_samples(&triple.p[n]);
    let p0 = Estimate { value: triple.p[0][0], std_error: terminal_mean.std_error, n: np };
    FirstOrderResiduals { p0, terminal_mean, cond_residual: per_step, cond_integral: Estimate::from_samples(&integral), cond_scale: scale }
}

/// Per-step sample means of the `p` increments; near zero when `p` is a
/// martingale.
pub fn martingale_increments<T: Scalar>(triple: &AdjointTriple<T>) -> Vec<Estimate<T>> {
    (0..triple.n_steps())
        .map(|s| {
            let d: Vec<T> = triple.p[s + 1].iter().zip(&triple.p[s]).map(|(&a, &b)| a - b).collect();
            Estimate::from_samples(&d)
        })
        .collect()
}

/// Martingale measure used by [`price_theorem1`].
#[derive(Debug, Clone, Copy)]
pub enum KernelChoice<'a, T> {
    Shared(&'a GirsanovKernel<T>),
    /// One kernel table per path, e.g. from [`m0_kernels`].
    PerPath(&'a [GirsanovKernel<T>]),
}

/// `E_Q[F + sum q dB + sum r dÑ]` on the ensemble's paths, with `Q` given by
/// its density on each path.
pub fn price_theorem1<T: Scalar>(
    coeffs: &MarketCoefficients<T>,
    kernels: KernelChoice<'_, T>,
    triple: &AdjointTriple<T>,
    ens: &HedgedEnsemble<T>,
) -> Result<Estimate<T>> {
    if triple.n_paths != ens.n_paths || triple.n_steps() != ens.n_steps {
        return Err(Error::DimensionMismatch("triple and ensemble differ".into()));
    }
    if let KernelChoice::PerPath(ks) = kernels {
        if ks.len() != ens.n_paths {
            return Err(Error::DimensionMismatch("one kernel per path required".into()));
        }
    }
    let samples = try_par_map(ens.n_paths, |i| {
        let kernel = match kernels {
            KernelChoice::Shared(k) => k,
            KernelChoice::PerPath(ks) => &ks[i],
        };
        let z = *density_path(kernel, coeffs, &ens.drivers[i])?.last().expect("density has nodes");
        let mut integral = T::zero();
        for step in 0..ens.n_steps {
            integral = integral + dot(triple.q_at(step, i), ens.db(step, i)) + dot(triple.r_at(step, i), ens.dn(step, i));
        }
        Ok::<T, Error>(z * (ens.payoff(i) + integral))
    })?;
    Ok(Estimate::from_samples(&samples))
}

/// Per-path kernels solving the M0 system with the estimated `(q, r)`;
/// non-unique systems take the minimum-norm member.
pub fn m0_kernels<T: Scalar>(coeffs: &MarketCoefficients<T>, triple: &AdjointTriple<T>) -> Result<Vec<GirsanovKernel<T>>> {
    try_par_map(triple.n_paths, |i| {
        let mut theta0 = Vec::with_capacity(triple.n_steps());
        let mut theta1 = Vec::with_capacity(triple.n_steps());
        for step in 0..triple.n_steps() {
            let sol = solve_m0_system(coeffs, triple.q_at(step, i), triple.r_at(step, i), step)?;
            match sol {
                M0Solution::Inconsistent { residual } => {
                    return Err(Error::InvalidInput(format!(
                        "M0 system inconsistent on path {i} at step {step} (residual {})",
                        residual.as_f64()
                    )))
                }
                _ => {
                    let (t0, t1) = sol.representative().expect("consistent system");
                    theta0.push(t0.to_vec());
                    theta1.push(t1.to_vec());
                }
            }
        }
        GirsanovKernel::new(theta0, theta1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{Claim, CountConvention, Measure};
    use crate::emm::minimal_variance_kernel;
    use crate::market::{simulate_market_drivers, Atom, LevyMeasure, SimConfig, TimeGrid};

    fn merton(n: usize) -> MarketCoefficients<f64> {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], levy, vec![0.5]).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        let c: MarketCoefficients<f64> = MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], levy, vec![0.5]).unwrap();
        assert!((hamiltonian(&c, 0, 1.0, 1.0, 2.0, &[1.0], &[0.3]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(hamiltonian(&c, 0, 1.0, 0.0, 2.0, &[1.0], &[0.3]).unwrap(), 0.0);
        assert_eq!(hamiltonian(&c, 0, 3.0, 0.4, 0.0, &[0.0], &[0.0]).unwrap(), 0.0);
        assert!(hamiltonian(&c, 0, 1.0, 1.0, 2.0, &[1.0, 2.0], &[0.3]).is_err());
    }

    #[test]
    fn basis_sizes() {
        let b: BasisSpec<f64> = BasisSpec::default();
        assert_eq!(b.n_functions(), 10);
        let b = BasisSpec { degree: 2, claim_value: false, moneyness_strike: Some(1.0) };
        assert_eq!(b.n_functions(), 7);
        let b: BasisSpec<f64> = BasisSpec { degree: 1, claim_value: true, moneyness_strike: None };
        assert_eq!(b.n_functions(), 4);
    }

    #[test]
    fn constant_claim_triple_vanishes() {
        let m = merton(10);
        let claim = Claim::constant(2.0).unwrap();
        let rep = claim.representation(&m, Measure::default()).unwrap();
        let drivers = simulate_market_drivers(&m, SimConfig::new(2_000, 3)).unwrap();
        let ens = HedgedEnsemble::simulate(&m, rep.as_ref(), drivers, 2.0).unwrap();
        let sol = solve_adjoint_lsmc(&m, &ens, &BasisSpec::default()).unwrap();
        assert!(sol.triple.p.iter().flatten().all(|x| x.abs() < 1e-12));
        assert!(sol.triple.q.iter().chain(&sol.triple.r).flatten().all(|x| x.abs() < 1e-12));
        let fo = first_order_residuals(&sol.triple, &m);
        assert!(fo.p0.value.abs() < 1e-12 && fo.cond_integral.value.abs() < 1e-12);
    }

    #[test]
    fn linear_claim_first_order_conditions() {
        let m = merton(20);
        let claim = Claim::linear(10.0, vec![1.0], vec![0.5], CountConvention::Raw).unwrap();
        let rep = claim.representation(&m, Measure::default()).unwrap();
        let drivers = simulate_market_drivers(&m, SimConfig::new(10_000, 4)).unwrap();
        let ens = HedgedEnsemble::simulate(&m, rep.as_ref(), drivers, rep.initial_value()).unwrap();
        let sol = solve_adjoint_lsmc(&m, &ens, &BasisSpec::default()).unwrap();
        // terminal consistency
        for i in 0..ens.n_paths() {
            assert_eq!(sol.triple.p[20][i], ens.wealth(20, i) - ens.payoff(i));
        }
        let fo = first_order_residuals(&sol.triple, &m);
        assert!(fo.terminal_mean.within(0.0, 3.0), "{fo:?}");
        assert!(fo.cond_integral.within(0.0, 3.0), "{:?}", fo.cond_integral);
        assert!((fo.p0.value - fo.terminal_mean.value).abs() < 3.0 * fo.terminal_mean.std_error);
        assert!(sol.diagnostics.iter().all(|d| d.r2 > 0.5), "{:?}", sol.diagnostics);
    }

    #[test]
    fn suboptimal_start_shows_in_p0() {
        let m = merton(20);
        let claim = Claim::linear(10.0, vec![1.0], vec![0.5], CountConvention::Raw).unwrap();
        let rep = claim.representation(&m, Measure::default()).unwrap();
        let drivers = simulate_market_drivers(&m, SimConfig::new(5_000, 5)).unwrap();
        let ens = HedgedEnsemble::simulate(&m, rep.as_ref(), drivers, rep.initial_value() + 1.0).unwrap();
        let sol = solve_adjoint_lsmc(&m, &ens, &BasisSpec::default()).unwrap();
        let fo = first_order_residuals(&sol.triple, &m);
        assert!(fo.terminal_mean.value.abs() > 5.0 * fo.terminal_mean.std_error, "{fo:?}");
    }

    #[test]
    fn adjoint_price_under_two_kernels_and_m0() {
        let m = merton(20);
        let claim = Claim::linear(10.0, vec![1.0], vec![0.5], CountConvention::Raw).unwrap();
        let rep = claim.representation(&m, Measure::default()).unwrap();
        let drivers = simulate_market_drivers(&m, SimConfig::new(10_000, 6)).unwrap();
        let z = rep.initial_value();
        let ens = HedgedEnsemble::simulate(&m, rep.as_ref(), drivers, z).unwrap();
        let sol = solve_adjoint_lsmc(&m, &ens, &BasisSpec::default()).unwrap();
        let q_star = minimal_variance_kernel(&m).unwrap();
        let other = GirsanovKernel::constant(&m, vec![-0.1], vec![-0.08]).unwrap();
        assert!(crate::emm::emm_residual(&other, &m, 0).abs() < 1e-15);
        let a = price_theorem1(&m, KernelChoice::Shared(&q_star), &sol.triple, &ens).unwrap();
        let b = price_theorem1(&m, KernelChoice::Shared(&other), &sol.triple, &ens).unwrap();
        assert!(a.z_score(&b).abs() < 3.0, "{a:?} {b:?}");
        assert!(a.within(z, 3.0), "{a:?} vs {z}");
        let m0 = m0_kernels(&m, &sol.triple).unwrap();
        for (i, k) in m0.iter().enumerate().take(50) {
            for step in 0..20 {
                let (r1, r2) =
                    crate::emm::m0_residuals(&m, sol.triple.q_at(step, i), sol.triple.r_at(step, i), step, k.theta0(step), k.theta1(step));
                assert!(r1.abs() < 1e-10 && r2.abs() < 1e-10);
            }
        }
    }
}
