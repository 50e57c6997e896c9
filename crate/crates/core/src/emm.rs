//! Girsanov kernels, density processes and equivalent martingale measures.
//!
//! A kernel `(theta0, theta1)` with `alpha + theta0.sigma + sum theta1 gamma lambda = 0`
//! defines `dZ = Z [theta0 dB + sum theta1 dÑ]`, and `dQ = Z(T) dP` makes the
//! price a martingale.

use serde::Serialize;

use crate::claims::Claim;
use crate::error::{Error, Result};
use crate::linalg::{lstsq, Matrix};
use crate::market::{check_compatible, simulate_market_drivers, DriverPath, MarketCoefficients, PathCursor, PathState, SimConfig};
use crate::scalar::{dot, norm_sq, Scalar};
use crate::stats::{try_par_map, Estimate};

/// Rank tolerance of the per-step M0 systems.
pub const M0_RTOL: f64 = 1e-10;

/// Piecewise-constant kernel: `theta0` per step (length `m`), `theta1` per
/// step and atom.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovKernel<T> {
    m: usize,
    k: usize,
    theta0: Vec<T>,
    theta1: Vec<T>,
}

impl<T: Scalar> GirsanovKernel<T> {
    pub fn new(theta0: Vec<Vec<T>>, theta1: Vec<Vec<T>>) -> Result<Self> {
        if theta0.len() != theta1.len() || theta0.is_empty() {
            return Err(Error::DimensionMismatch("theta0 and theta1 need the same positive number of steps".into()));
        }
        let (m, k) = (theta0[0].len(), theta1[0].len());
        if theta0.iter().any(|r| r.len() != m) || theta1.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch("kernel rows differ in length".into()));
        }
        for (step, row) in theta1.iter().enumerate() {
            for (atom, &t) in row.iter().enumerate() {
                if !(t > -T::one()) || !t.is_finite() {
                    return Err(Error::KernelInvalid { step, atom, value: t.as_f64() });
                }
            }
        }
        if theta0.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("theta0 must be finite".into()));
        }
        Ok(GirsanovKernel { m, k, theta0: theta0.into_iter().flatten().collect(), theta1: theta1.into_iter().flatten().collect() })
    }

    /// The same `(theta0, theta1)` on every step of `coeffs`.
    pub fn constant(coeffs: &MarketCoefficients<T>, theta0: Vec<T>, theta1: Vec<T>) -> Result<Self> {
        let n = coeffs.n_steps();
        Self::new(vec![theta0; n], vec![theta1; n])
    }

    /// `P` itself.
    pub fn zero(coeffs: &MarketCoefficients<T>) -> Self {
        Self::constant(coeffs, vec![T::zero(); coeffs.m()], vec![T::zero(); coeffs.n_atoms()]).expect("zero kernel is valid")
    }

    pub fn n_steps(&self) -> usize {
        self.theta0.len().checked_div(self.m).or_else(|| self.theta1.len().checked_div(self.k)).unwrap_or(0)
    }

    pub fn theta0(&self, step: usize) -> &[T] {
        &self.theta0[step * self.m..(step + 1) * self.m]
    }

    pub fn theta1(&self, step: usize) -> &[T] {
        &self.theta1[step * self.k..(step + 1) * self.k]
    }

    fn check_dims(&self, coeffs: &MarketCoefficients<T>) -> Result<()> {
        if self.m != coeffs.m() || self.k != coeffs.n_atoms() || self.n_steps() != coeffs.n_steps() {
            return Err(Error::DimensionMismatch("kernel does not match the market".into()));
        }
        Ok(())
    }
}

/// `alpha + theta0.sigma + sum theta1 gamma lambda` at `step`; zero exactly
/// when the kernel removes the drift.
pub fn emm_residual<T: Scalar>(kernel: &GirsanovKernel<T>, coeffs: &MarketCoefficients<T>, step: usize) -> T {
    let mut r = coeffs.alpha(step) + dot(kernel.theta0(step), coeffs.sigma(step));
    for (a, (&t, &g)) in kernel.theta1(step).iter().zip(coeffs.gamma(step)).enumerate() {
        r = r + t * g * coeffs.levy().atom(a).intensity;
    }
    r
}

/// Kernel of the minimal-variance measure `Q*`: `theta0 = G sigma`,
/// `theta1 = G gamma`.
pub fn minimal_variance_kernel<T: Scalar>(coeffs: &MarketCoefficients<T>) -> Result<GirsanovKernel<T>> {
    let n = coeffs.n_steps();
    let mut theta0 = Vec::with_capacity(n);
    let mut theta1 = Vec::with_capacity(n);
    for step in 0..n {
        let g = coeffs.gain(step)?;
        let t1: Vec<T> = coeffs.gamma(step).iter().map(|&x| g * x).collect();
        for (atom, &t) in t1.iter().enumerate() {
            if !(t > -T::one()) {
                return Err(Error::DensityNotPositive { step, atom, value: t.as_f64() });
            }
        }
        theta0.push(coeffs.sigma(step).iter().map(|&x| g * x).collect());
        theta1.push(t1);
    }
    GirsanovKernel::new(theta0, theta1)
}

/// `Z(t)` per node along one driver path.
pub fn density_path<T: Scalar>(kernel: &GirsanovKernel<T>, coeffs: &MarketCoefficients<T>, driver: &DriverPath<T>) -> Result<Vec<T>> {
    kernel.check_dims(coeffs)?;
    check_compatible(coeffs, driver)?;
    let dt = coeffs.grid().dt();
    let mut log_z = T::zero();
    let mut out = Vec::with_capacity(coeffs.n_steps() + 1);
    out.push(T::one());
    for step in 0..coeffs.n_steps() {
        log_z = log_z + log_density_increment(kernel, coeffs, driver, step, dt);
        out.push(log_z.exp());
    }
    Ok(out)
}

fn log_density_increment<T: Scalar>(
    kernel: &GirsanovKernel<T>,
    coeffs: &MarketCoefficients<T>,
    driver: &DriverPath<T>,
    step: usize,
    dt: T,
) -> T {
    let theta0 = kernel.theta0(step);
    let theta1 = kernel.theta1(step);
    let mut d = dot(theta0, driver.brownian(step)) - T::half() * norm_sq(theta0) * dt;
    for (a, &t) in theta1.iter().enumerate() {
        d = d - t * coeffs.levy().atom(a).intensity * dt;
    }
    for j in driver.jumps(step) {
        d = d + theta1[j.atom].ln_1p();
    }
    d
}

/// Outcome of the exponential-moment sufficient condition for `Z` to be a
/// true martingale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsCheck {
    pub holds: bool,
    /// `ln E[exp(1/2 int |theta0|^2 dt + sum int theta1^2 dN)]`.
    pub log_bound: f64,
}

/// Evaluates the bound in closed form: for deterministic kernels and Poisson
/// counts, `E[exp(sum theta1^2 dN)] = exp(sum lambda (e^{theta1^2} - 1) dt)`.
pub fn kallsen_shiryaev_check<T: Scalar>(kernel: &GirsanovKernel<T>, coeffs: &MarketCoefficients<T>) -> KsCheck {
    let dt = coeffs.grid().dt().as_f64();
    let mut log_bound = 0.0;
    for step in 0..kernel.n_steps() {
        log_bound += 0.5 * norm_sq(kernel.theta0(step)).as_f64() * dt;
        for (a, &t) in kernel.theta1(step).iter().enumerate() {
            let lambda = coeffs.levy().atom(a).intensity.as_f64();
            log_bound += lambda * (t.as_f64().powi(2).exp() - 1.0) * dt;
        }
    }
    KsCheck { holds: log_bound.is_finite(), log_bound }
}

/// Monte Carlo estimate of `E_Q[f] = E[f Z(T)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QExpectation<T> {
    pub estimate: Estimate<T>,
    /// False when the martingale property of `Z` could not be verified;
    /// the estimate is still reported.
    pub martingale_verified: bool,
}

/// `E[f(terminal state) Z(T)]` over the given drivers.
pub fn weighted_terminal_mean<T, F>(
    kernel: &GirsanovKernel<T>,
    coeffs: &MarketCoefficients<T>,
    drivers: &[DriverPath<T>],
    f: F,
) -> Result<QExpectation<T>>
where
    T: Scalar,
    F: Fn(&PathState<'_, T>) -> T + Sync,
{
    kernel.check_dims(coeffs)?;
    let ks = kallsen_shiryaev_check(kernel, coeffs);
    let dt = coeffs.grid().dt();
    let samples = try_par_map(drivers.len(), |i| {
        let driver = &drivers[i];
        let mut cur = PathCursor::new(coeffs, driver)?;
        let mut log_z = T::zero();
        for step in 0..coeffs.n_steps() {
            log_z = log_z + log_density_increment(kernel, coeffs, driver, step, dt);
            cur.advance();
        }
        Ok::<T, Error>(f(&cur.state()) * log_z.exp())
    })?;
    Ok(QExpectation { estimate: Estimate::from_samples(&samples), martingale_verified: ks.holds })
}

/// `E_Q[F]` for a claim, on freshly simulated drivers.
pub fn expectation_under_q<T: Scalar>(
    claim: &Claim<T>,
    kernel: &GirsanovKernel<T>,
    coeffs: &MarketCoefficients<T>,
    sim: SimConfig,
) -> Result<QExpectation<T>> {
    claim.check_dims(coeffs)?;
    let drivers = simulate_market_drivers(coeffs, sim)?;
    weighted_terminal_mean(kernel, coeffs, &drivers, |st| claim.payoff_at(st, coeffs.levy()))
}

/// Solution set of the per-step M0 system
/// `alpha + theta0.sigma + sum theta1 gamma lambda = 0`,
/// `theta0.q + sum theta1 r lambda = 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum M0Solution<T> {
    Unique { theta0: Vec<T>, theta1: Vec<T> },
    /// Affine family: minimum-norm member plus a basis of the nullspace
    /// (vectors over `(theta0, theta1)`).
    NonUnique { theta0: Vec<T>, theta1: Vec<T>, nullspace: Vec<Vec<T>> },
    Inconsistent { residual: T },
}

impl<T: Scalar> M0Solution<T> {
    /// Kernel entries of the unique or minimum-norm solution.
    pub fn representative(&self) -> Option<(&[T], &[T])> {
        match self {
            M0Solution::Unique { theta0, theta1 } | M0Solution::NonUnique { theta0, theta1, .. } => {
                Some((theta0, theta1))
            }
            M0Solution::Inconsistent { .. } => None,
        }
    }
}

/// Residuals of both M0 equations for a candidate `(theta0, theta1)`.
pub fn m0_residuals<T: Scalar>(
    coeffs: &MarketCoefficients<T>,
    q_hat: &[T],
    r_hat: &[T],
    step: usize,
    theta0: &[T],
    theta1: &[T],
) -> (T, T) {
    let mut first = coeffs.alpha(step) + dot(theta0, coeffs.sigma(step));
    let mut second = dot(theta0, q_hat);
    for (a, ((&t, &g), &r)) in theta1.iter().zip(coeffs.gamma(step)).zip(r_hat).enumerate() {
        let lambda = coeffs.levy().atom(a).intensity;
        first = first + t * g * lambda;
        second = second + t * r * lambda;
    }
    (first, second)
}

/// Solves the M0 system at `step` for adjoint integrands `q_hat` (length
/// `m`) and `r_hat` (one per atom).
pub fn solve_m0_system<T: Scalar>(coeffs: &MarketCoefficients<T>, q_hat: &[T], r_hat: &[T], step: usize) -> Result<M0Solution<T>> {
    let (m, k) = (coeffs.m(), coeffs.n_atoms());
    if q_hat.len() != m || r_hat.len() != k {
        return Err(Error::DimensionMismatch(format!("q_hat needs {m} and r_hat {k} entries")));
    }
    let mut a = Matrix::zeros(2, m + k);
    for j in 0..m {
        a.set(0, j, coeffs.sigma(step)[j]);
        a.set(1, j, q_hat[j]);
    }
    for j in 0..k {
        let lambda = coeffs.levy().atom(j).intensity;
        a.set(0, m + j, coeffs.gamma(step)[j] * lambda);
        a.set(1, m + j, r_hat[j] * lambda);
    }
    let rhs = [-coeffs.alpha(step), T::zero()];
    let ls = lstsq(&a, &rhs, T::of(M0_RTOL));
    let scale = T::one().max(coeffs.alpha(step).abs());
    if ls.residual_norm > T::of(M0_RTOL) * scale {
        return Ok(M0Solution::Inconsistent { residual: ls.residual_norm });
    }
    let (theta0, theta1) = (ls.x[..m].to_vec(), ls.x[m..].to_vec());
    if ls.nullspace.is_empty() {
        Ok(M0Solution::Unique { theta0, theta1 })
    } else {
        Ok(M0Solution::NonUnique { theta0, theta1, nullspace: ls.nullspace })
    }
}

/// One row of a kernel dump: time, then `theta0` and `theta1` entries.
pub fn kernel_rows<T: Scalar>(kernel: &GirsanovKernel<T>, coeffs: &MarketCoefficients<T>) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut header = vec!["t".to_string()];
    header.extend((0..kernel.m).map(|j| format!("theta0_{j}")));
    header.extend((0..kernel.k).map(|a| format!("theta1_{a}")));
    let rows = (0..kernel.n_steps())
        .map(|step| {
            let mut row = vec![coeffs.grid().node(step).as_f64()];
            row.extend(kernel.theta0(step).iter().map(|x| x.as_f64()));
            row.extend(kernel.theta1(step).iter().map(|x| x.as_f64()));
            row
        })
        .collect();
    (header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Atom, LevyMeasure, TimeGrid};

    fn merton(n: usize) -> MarketCoefficients<f64> {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], levy, vec![0.5]).unwrap()
    }

    fn bs(n: usize) -> MarketCoefficients<f64> {
        let grid = TimeGrid::new(1.0, n).unwrap();
        MarketCoefficients::constant(grid, 1.0, 0.05, vec![0.2], LevyMeasure::none(), vec![]).unwrap()
    }

    #[test]
    fn residual_examples() {
        let b = bs(4);
        let k = GirsanovKernel::constant(&b, vec![-0.25], vec![]).unwrap();
        assert!(emm_residual(&k, &b, 0).abs() < 1e-15);
        assert_eq!(emm_residual(&GirsanovKernel::zero(&b), &b, 0), 0.05);
        let m = merton(5);
        let q = minimal_variance_kernel(&m).unwrap();
        assert!((0..5).all(|s| emm_residual(&q, &m, s).abs() < 1e-15));
        assert!((q.theta0(0)[0] + 0.037_037_037).abs() < 1e-8);
        assert!((q.theta1(0)[0] + 0.092_592_593).abs() < 1e-8);
        let qb = minimal_variance_kernel(&b).unwrap();
        assert!((qb.theta0(2)[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_drift_gives_zero_kernel() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let m = MarketCoefficients::constant(grid, 1.0, 0.0, vec![0.2], LevyMeasure::none(), vec![]).unwrap();
        assert_eq!(minimal_variance_kernel(&m).unwrap(), GirsanovKernel::zero(&m));
    }

    #[test]
    fn invalid_kernels() {
        let m = merton(2);
        assert!(matches!(
            GirsanovKernel::constant(&m, vec![0.0], vec![-1.0]),
            Err(Error::KernelInvalid { step: 0, atom: 0, .. })
        ));
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        let strong = MarketCoefficients::constant(grid, 1.0, 2.0, vec![0.0], levy, vec![0.9]).unwrap();
        assert!(matches!(minimal_variance_kernel(&strong), Err(Error::DensityNotPositive { .. })));
    }

    #[test]
    fn densities() {
        let m = merton(10);
        let drivers = simulate_market_drivers(&m, SimConfig::new(3, 1)).unwrap();
        let z = density_path(&GirsanovKernel::zero(&m), &m, &drivers[0]).unwrap();
        assert!(z.iter().all(|&x| x == 1.0));
        let q = minimal_variance_kernel(&m).unwrap();
        let z = density_path(&q, &m, &drivers[1]).unwrap();
        assert!(z[0] == 1.0 && z.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn density_martingale_and_emm_property() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let gauss = MarketCoefficients::constant(grid, 1.0, 0.05, vec![0.2], LevyMeasure::none(), vec![]).unwrap();
        let k = GirsanovKernel::constant(&gauss, vec![0.3], vec![]).unwrap();
        let d = simulate_market_drivers(&gauss, SimConfig::new(100_000, 2)).unwrap();
        let e = weighted_terminal_mean(&k, &gauss, &d, |_| 1.0).unwrap();
        assert!(e.estimate.within(1.0, 3.0) && e.martingale_verified, "{e:?}");

        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        let jump: MarketCoefficients<f64> = MarketCoefficients::constant(grid, 1.0, 0.1, vec![], levy, vec![0.5]).unwrap();
        let kj = GirsanovKernel::constant(&jump, vec![], vec![-0.1]).unwrap();
        assert!(emm_residual(&kj, &jump, 0).abs() < 1e-15);
        let d = simulate_market_drivers(&jump, SimConfig::new(100_000, 3)).unwrap();
        let e = weighted_terminal_mean(&kj, &jump, &d, |_| 1.0).unwrap();
        assert!(e.estimate.within(1.0, 3.0), "{e:?}");
        let s = weighted_terminal_mean(&kj, &jump, &d, |st| st.price).unwrap();
        assert!(s.estimate.within(1.0, 3.0), "{s:?}");
    }

    #[test]
    fn constant_claim_under_q() {
        let m = merton(10);
        let q = minimal_variance_kernel(&m).unwrap();
        let e = expectation_under_q(&Claim::constant(7.0).unwrap(), &q, &m, SimConfig::new(20_000, 4)).unwrap();
        assert!(e.estimate.within(7.0, 3.0), "{e:?}");
    }

    #[test]
    fn ks_bound() {
        let m = merton(10);
        assert_eq!(kallsen_shiryaev_check(&GirsanovKernel::zero(&m), &m), KsCheck { holds: true, log_bound: 0.0 });
        let q = minimal_variance_kernel(&m).unwrap();
        let ks = kallsen_shiryaev_check(&q, &m);
        let t0: f64 = -0.1 / 0.54 * 0.2;
        let t1: f64 = -0.1 / 0.54 * 0.5;
        assert!(ks.holds && (ks.log_bound - (0.5 * t0 * t0 + 2.0 * ((t1 * t1).exp() - 1.0))).abs() < 1e-12);
    }

    #[test]
    fn m0_two_brownian() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let m: MarketCoefficients<f64> = MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2, 0.3], LevyMeasure::none(), vec![]).unwrap();
        let sol = solve_m0_system(&m, &[0.5, -0.1], &[], 0).unwrap();
        let M0Solution::Unique { theta0, theta1 } = &sol else { panic!("{sol:?}") };
        let (r1, r2) = m0_residuals(&m, &[0.5, -0.1], &[], 0, theta0, theta1);
        assert!(r1.abs() < 1e-10 && r2.abs() < 1e-10);
        // q proportional to sigma: the equations contradict each other
        assert!(matches!(solve_m0_system(&m, &[0.4, 0.6], &[], 0).unwrap(), M0Solution::Inconsistent { .. }));
        // q = 0: one equation, a line of solutions
        let sol = solve_m0_system(&m, &[0.0, 0.0], &[], 0).unwrap();
        let M0Solution::NonUnique { theta0, nullspace, .. } = &sol else { panic!("{sol:?}") };
        assert_eq!(nullspace.len(), 1);
        assert!((0.1f64 + 0.2 * theta0[0] + 0.3 * theta0[1]).abs() < 1e-12);
    }

    #[test]
    fn m0_merton_and_black_scholes() {
        let m = merton(1);
        // sigma r - q gamma = 0.2 * 0.3 - 0.1 * 0.5 != 0
        let sol = solve_m0_system(&m, &[0.1], &[0.3], 0).unwrap();
        assert!(matches!(sol, M0Solution::Unique { .. }));
        let sol = solve_m0_system(&m, &[0.2], &[0.5], 0).unwrap();
        assert!(matches!(sol, M0Solution::Inconsistent { .. }));
        let b = bs(1);
        let sol = solve_m0_system(&b, &[0.0], &[], 0).unwrap();
        let M0Solution::Unique { theta0, .. } = sol else { panic!() };
        assert!((theta0[0] + 0.25).abs() < 1e-12);
        assert!(solve_m0_system(&b, &[0.0, 1.0], &[], 0).is_err());
    }
}
