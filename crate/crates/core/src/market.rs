//! Jump-diffusion market model: time grid, finite-atom Lévy measure,
//! piecewise-constant coefficients, and simulation of drivers, prices and
//! self-financing wealth.
//!
//! The risky asset follows
//! `dS = S(t-) [alpha dt + sigma . dB + sum_a gamma_a dÑ_a]` with `Ñ_a` the
//! compensated counting process of atom `a`. Coefficients are constant on
//! each grid step; jumps are simulated at exact times.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::path_stream;
use crate::scalar::{dot, norm_sq, Scalar};
use crate::stats::try_par_map;

/// Uniform grid `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    horizon: T,
    n_steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(horizon: T, n_steps: usize) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidInput("n_steps must be at least 1".into()));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> T {
        self.horizon / T::of_usize(self.n_steps)
    }

    /// Time of node `i` (`0 <= i <= n_steps`).
    pub fn node(&self, i: usize) -> T {
        self.horizon * T::of_usize(i) / T::of_usize(self.n_steps)
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }

    /// Step containing time `t` (right-closed at the horizon).
    pub fn step_of(&self, t: T) -> usize {
        let k = (t / self.dt()).floor().to_usize().unwrap_or(0);
        k.min(self.n_steps - 1)
    }
}

/// A jump size `mark` arriving with Poisson rate `intensity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom<T> {
    pub mark: T,
    pub intensity: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpChannel<T> {
    pub atoms: Vec<Atom<T>>,
}

/// Location of an atom: channel index and position inside the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomRef {
    pub channel: usize,
    pub atom: usize,
}

/// Lévy measure made of finitely many atoms per independent channel.
///
/// Atoms are addressed either by [`AtomRef`] or by a flat index running over
/// all channels in order; most per-step arrays use the flat index.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyMeasure<T> {
    channels: Vec<JumpChannel<T>>,
    flat: Vec<AtomRef>,
}

impl<T: Scalar> LevyMeasure<T> {
    pub fn new(channels: Vec<JumpChannel<T>>) -> Result<Self> {
        let mut flat = Vec::new();
        for (c, ch) in channels.iter().enumerate() {
            for (a, atom) in ch.atoms.iter().enumerate() {
                if atom.mark == T::zero() || !atom.mark.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "atom ({c},{a}): mark must be finite and nonzero, got {}",
                        atom.mark
                    )));
                }
                if !(atom.intensity >= T::zero()) || !atom.intensity.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "atom ({c},{a}): intensity must be finite and >= 0, got {}",
                        atom.intensity
                    )));
                }
                flat.push(AtomRef { channel: c, atom: a });
            }
        }
        Ok(LevyMeasure { channels, flat })
    }

    /// No jump channels at all.
    pub fn none() -> Self {
        LevyMeasure { channels: Vec::new(), flat: Vec::new() }
    }

    /// One channel holding the given atoms.
    pub fn single_channel(atoms: Vec<Atom<T>>) -> Result<Self> {
        Self::new(vec![JumpChannel { atoms }])
    }

    pub fn channels(&self) -> &[JumpChannel<T>] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn atom_ref(&self, flat: usize) -> AtomRef {
        self.flat[flat]
    }

    pub fn atom(&self, flat: usize) -> &Atom<T> {
        let r = self.flat[flat];
        &self.channels[r.channel].atoms[r.atom]
    }

    pub fn flat_index(&self, r: AtomRef) -> Option<usize> {
        self.flat.iter().position(|&x| x == r)
    }

    /// Intensities in flat order.
    pub fn intensities(&self) -> Vec<T> {
        (0..self.n_atoms()).map(|i| self.atom(i).intensity).collect()
    }

    pub fn channel_rate(&self, channel: usize) -> T {
        self.channels[channel].atoms.iter().map(|a| a.intensity).sum()
    }
}

/// Deterministic piecewise-constant market coefficients on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketCoefficients<T> {
    grid: TimeGrid<T>,
    s0: T,
    m: usize,
    levy: LevyMeasure<T>,
    alpha: Vec<T>,
    /// `n_steps * m`, row per step
    sigma: Vec<T>,
    /// `n_steps * n_atoms`, row per step
    gamma: Vec<T>,
}

impl<T: Scalar> MarketCoefficients<T> {
    /// Builds per-step coefficients. `sigma[step]` has length `m`,
    /// `gamma[step]` one entry per atom in flat order.
    pub fn new(
        grid: TimeGrid<T>,
        s0: T,
        alpha: Vec<T>,
        sigma: Vec<Vec<T>>,
        levy: LevyMeasure<T>,
        gamma: Vec<Vec<T>>,
    ) -> Result<Self> {
        let n = grid.n_steps();
        if !(s0 > T::zero()) || !s0.is_finite() {
            return Err(Error::InvalidInput(format!("S0 must be positive, got {s0}")));
        }
        if alpha.len() != n || sigma.len() != n || gamma.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} steps, got alpha {}, sigma {}, gamma {}",
                alpha.len(),
                sigma.len(),
                gamma.len()
            )));
        }
        let m = sigma[0].len();
        let k = levy.n_atoms();
        if sigma.iter().any(|row| row.len() != m) {
            return Err(Error::DimensionMismatch("sigma rows differ in length".into()));
        }
        if gamma.iter().any(|row| row.len() != k) {
            return Err(Error::DimensionMismatch(format!("gamma rows must have {k} entries")));
        }
        let finite = alpha.iter().chain(sigma.iter().flatten()).chain(gamma.iter().flatten()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidInput("coefficients must be finite".into()));
        }
        for (step, row) in gamma.iter().enumerate() {
            for (a, &g) in row.iter().enumerate() {
                if !(g > -T::one()) {
                    return Err(Error::InvalidInput(format!(
                        "gamma must exceed -1 (step {step}, atom {a}, value {g})"
                    )));
                }
            }
        }
        Ok(MarketCoefficients {
            grid,
            s0,
            m,
            levy,
            alpha,
            sigma: sigma.into_iter().flatten().collect(),
            gamma: gamma.into_iter().flatten().collect(),
        })
    }

    /// Time-homogeneous coefficients.
    pub fn constant(
        grid: TimeGrid<T>,
        s0: T,
        alpha: T,
        sigma: Vec<T>,
        levy: LevyMeasure<T>,
        gamma: Vec<T>,
    ) -> Result<Self> {
        let n = grid.n_steps();
        Self::new(grid, s0, vec![alpha; n], vec![sigma; n], levy, vec![gamma; n])
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn s0(&self) -> T {
        self.s0
    }

    /// Number of Brownian channels.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_atoms(&self) -> usize {
        self.levy.n_atoms()
    }

    pub fn levy(&self) -> &LevyMeasure<T> {
        &self.levy
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    #[inline]
    pub fn alpha(&self, step: usize) -> T {
        self.alpha[step]
    }

    #[inline]
    pub fn sigma(&self, step: usize) -> &[T] {
        &self.sigma[step * self.m..(step + 1) * self.m]
    }

    #[inline]
    pub fn gamma(&self, step: usize) -> &[T] {
        let k = self.n_atoms();
        &self.gamma[step * k..(step + 1) * k]
    }

    /// `sum_a gamma_a^2 lambda_a` at `step`.
    pub fn jump_variance_rate(&self, step: usize) -> T {
        self.gamma(step)
            .iter()
            .enumerate()
            .map(|(a, &g)| g * g * self.levy.atom(a).intensity)
            .sum()
    }

    /// `sigma.sigma + sum_a gamma_a^2 lambda_a`, the denominator of the
    /// optimal feedback.
    pub fn variance_rate(&self, step: usize) -> T {
        norm_sq(self.sigma(step)) + self.jump_variance_rate(step)
    }

    /// Compensator rate `sum_a gamma_a lambda_a`.
    pub fn compensator_rate(&self, step: usize) -> T {
        self.gamma(step)
            .iter()
            .enumerate()
            .map(|(a, &g)| g * self.levy.atom(a).intensity)
            .sum()
    }

    /// Optimal feedback gain `G = -alpha / (sigma.sigma + sum gamma^2 lambda)`.
    pub fn gain(&self, step: usize) -> Result<T> {
        let d = self.variance_rate(step);
        if !(d > T::zero()) {
            return Err(Error::MarketDegenerate { step });
        }
        Ok(-self.alpha(step) / d)
    }

    pub fn is_time_homogeneous(&self) -> bool {
        let n = self.n_steps();
        (1..n).all(|s| {
            self.alpha(s) == self.alpha(0) && self.sigma(s) == self.sigma(0) && self.gamma(s) == self.gamma(0)
        })
    }

    /// Same time-homogeneous market on a grid with `n_steps` steps.
    pub fn with_steps(&self, n_steps: usize) -> Result<Self> {
        if !self.is_time_homogeneous() {
            return Err(Error::Unsupported("regridding requires time-homogeneous coefficients".into()));
        }
        let grid = TimeGrid::new(self.grid.horizon(), n_steps)?;
        Self::constant(grid, self.s0, self.alpha(0), self.sigma(0).to_vec(), self.levy.clone(), self.gamma(0).to_vec())
    }

    /// Same coefficients with a different initial price.
    pub fn with_s0(&self, s0: T) -> Result<Self> {
        if !(s0 > T::zero()) {
            return Err(Error::InvalidInput(format!("S0 must be positive, got {s0}")));
        }
        let mut out = self.clone();
        out.s0 = s0;
        Ok(out)
    }
}

/// Per-step nondegeneracy report: `true` where
/// `sigma.sigma + sum gamma^2 lambda > 0`.
pub fn check_nondegeneracy<T: Scalar>(coeffs: &MarketCoefficients<T>) -> Vec<bool> {
    (0..coeffs.n_steps()).map(|s| coeffs.variance_rate(s) > T::zero()).collect()
}

/// A jump of atom `atom` (flat index) at absolute time `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent<T> {
    pub time: T,
    pub atom: usize,
}

/// One realisation of all Brownian increments and jump events on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverPath<T> {
    grid: TimeGrid<T>,
    m: usize,
    n_atoms: usize,
    brownian: Vec<T>,
    jumps: Vec<JumpEvent<T>>,
    offsets: Vec<usize>,
}

impl<T: Scalar> DriverPath<T> {
    /// Assembles a path from increments (`n_steps * m`, row per step) and
    /// jump events anywhere in `(0, T]`.
    pub fn from_parts(
        grid: TimeGrid<T>,
        m: usize,
        n_atoms: usize,
        brownian: Vec<T>,
        mut jumps: Vec<JumpEvent<T>>,
    ) -> Result<Self> {
        if brownian.len() != grid.n_steps() * m {
            return Err(Error::DimensionMismatch(format!(
                "expected {} Brownian increments, got {}",
                grid.n_steps() * m,
                brownian.len()
            )));
        }
        if jumps.iter().any(|j| j.atom >= n_atoms || !(j.time >= T::zero()) || j.time > grid.horizon()) {
            return Err(Error::InvalidInput("jump event outside the grid or atom range".into()));
        }
        jumps.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap_or(std::cmp::Ordering::Equal));
        let mut offsets = vec![0; grid.n_steps() + 1];
        for j in &jumps {
            offsets[grid.step_of(j.time) + 1] += 1;
        }
        for i in 1..offsets.len() {
            offsets[i] += offsets[i - 1];
        }
        Ok(DriverPath { grid, m, n_atoms, brownian, jumps, offsets })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// Brownian increments over step `step`.
    #[inline]
    pub fn brownian(&self, step: usize) -> &[T] {
        &self.brownian[step * self.m..(step + 1) * self.m]
    }

    /// Jump events inside step `step`, in time order.
    #[inline]
    pub fn jumps(&self, step: usize) -> &[JumpEvent<T>] {
        &self.jumps[self.offsets[step]..self.offsets[step + 1]]
    }

    pub fn all_jumps(&self) -> &[JumpEvent<T>] {
        &self.jumps
    }

    /// Raw jump counts per atom inside `step`.
    pub fn step_counts(&self, step: usize) -> Vec<T> {
        let mut c = vec![T::zero(); self.n_atoms];
        for j in self.jumps(step) {
            c[j.atom] = c[j.atom] + T::one();
        }
        c
    }

    /// Total raw jump count per atom over the horizon.
    pub fn total_counts(&self) -> Vec<T> {
        let mut c = vec![T::zero(); self.n_atoms];
        for j in &self.jumps {
            c[j.atom] = c[j.atom] + T::one();
        }
        c
    }

    /// `B(T)` per channel.
    pub fn terminal_brownian(&self) -> Vec<T> {
        let mut b = vec![T::zero(); self.m];
        for step in 0..self.n_steps() {
            for (acc, &d) in b.iter_mut().zip(self.brownian(step)) {
                *acc = *acc + d;
            }
        }
        b
    }

    /// The same realisation on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let n = self.n_steps();
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(Error::InvalidInput(format!("cannot coarsen {n} steps by {factor}")));
        }
        let grid = TimeGrid::new(self.grid.horizon(), n / factor)?;
        let mut brownian = vec![T::zero(); grid.n_steps() * self.m];
        for step in 0..n {
            let coarse = step / factor;
            for (c, &d) in self.brownian(step).iter().enumerate() {
                brownian[coarse * self.m + c] = brownian[coarse * self.m + c] + d;
            }
        }
        Self::from_parts(grid, self.m, self.n_atoms, brownian, self.jumps.clone())
    }
}

/// Monte Carlo sample size and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        SimConfig { n_paths, seed }
    }
}

/// Driver path number `index` for `seed`; pure function of its inputs.
pub fn simulate_driver<T: Scalar>(
    grid: &TimeGrid<T>,
    m: usize,
    levy: &LevyMeasure<T>,
    seed: u64,
    index: u64,
) -> DriverPath<T> {
    let mut rng = path_stream(seed, index);
    let n = grid.n_steps();
    let sqdt = grid.dt().as_f64().sqrt();
    let brownian: Vec<T> = (0..n * m)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z * sqdt)
        })
        .collect();
    let horizon = grid.horizon().as_f64();
    let mut jumps = Vec::new();
    let mut base = 0;
    for (c, ch) in levy.channels().iter().enumerate() {
        let rate = levy.channel_rate(c).as_f64();
        if rate > 0.0 {
            let exp = Exp::new(rate).expect("positive rate");
            let mut t = 0.0;
            loop {
                t += exp.sample(&mut rng);
                if t > horizon {
                    break;
                }
                let u: f64 = rng.random::<f64>() * rate;
                let mut acc = 0.0;
                let mut pick = ch.atoms.len() - 1;
                for (a, atom) in ch.atoms.iter().enumerate() {
                    acc += atom.intensity.as_f64();
                    if u < acc {
                        pick = a;
                        break;
                    }
                }
                jumps.push(JumpEvent { time: T::of(t), atom: base + pick });
            }
        }
        base += ch.atoms.len();
    }
    DriverPath::from_parts(*grid, m, levy.n_atoms(), brownian, jumps).expect("simulated driver is well formed")
}

/// `n_paths` independent driver paths, path `i` drawn from stream `(seed, i)`.
pub fn simulate_drivers<T: Scalar>(
    grid: &TimeGrid<T>,
    m: usize,
    levy: &LevyMeasure<T>,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<DriverPath<T>>> {
    if m == 0 && levy.is_empty() {
        return Err(Error::DegenerateDriver);
    }
    if n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be at least 1".into()));
    }
    try_par_map(n_paths, |i| Ok(simulate_driver(grid, m, levy, seed, i as u64)))
}

/// Drivers matching the dimensions of `coeffs`.
pub fn simulate_market_drivers<T: Scalar>(coeffs: &MarketCoefficients<T>, sim: SimConfig) -> Result<Vec<DriverPath<T>>> {
    simulate_drivers(coeffs.grid(), coeffs.m(), coeffs.levy(), sim.n_paths, sim.seed)
}

pub(crate) fn check_compatible<T: Scalar>(coeffs: &MarketCoefficients<T>, driver: &DriverPath<T>) -> Result<()> {
    if driver.m() != coeffs.m() || driver.n_atoms() != coeffs.n_atoms() || driver.n_steps() != coeffs.n_steps() {
        return Err(Error::DimensionMismatch(format!(
            "driver (m={}, atoms={}, steps={}) vs market (m={}, atoms={}, steps={})",
            driver.m(),
            driver.n_atoms(),
            driver.n_steps(),
            coeffs.m(),
            coeffs.n_atoms(),
            coeffs.n_steps()
        )));
    }
    Ok(())
}

/// Filtration state at a grid node: everything a Markov claim or a
/// feedback policy may look at.
#[derive(Debug, Clone, Copy)]
pub struct PathState<'a, T> {
    pub step: usize,
    pub time: T,
    pub price: T,
    /// Cumulative `B(t)` per channel.
    pub brownian: &'a [T],
    /// Cumulative raw jump counts per atom.
    pub counts: &'a [T],
}

/// Walks a driver path node by node, keeping `S(t)`, `B(t)` and counts.
///
/// Prices use the exact exponential solution between events, so `S > 0`
/// whenever `gamma > -1`.
#[derive(Debug, Clone)]
pub struct PathCursor<'a, T> {
    coeffs: &'a MarketCoefficients<T>,
    driver: &'a DriverPath<T>,
    step: usize,
    log_price: T,
    brownian: Vec<T>,
    counts: Vec<T>,
}

impl<'a, T: Scalar> PathCursor<'a, T> {
    pub fn new(coeffs: &'a MarketCoefficients<T>, driver: &'a DriverPath<T>) -> Result<Self> {
        check_compatible(coeffs, driver)?;
        Ok(PathCursor {
            coeffs,
            driver,
            step: 0,
            log_price: coeffs.s0().ln(),
            brownian: vec![T::zero(); coeffs.m()],
            counts: vec![T::zero(); coeffs.n_atoms()],
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn price(&self) -> T {
        self.log_price.exp()
    }

    pub fn state(&self) -> PathState<'_, T> {
        PathState {
            step: self.step,
            time: self.coeffs.grid().node(self.step),
            price: self.price(),
            brownian: &self.brownian,
            counts: &self.counts,
        }
    }

    /// Moves to the next node. Returns `false` once the horizon is reached.
    pub fn advance(&mut self) -> bool {
        let step = self.step;
        if step >= self.coeffs.n_steps() {
            return false;
        }
        let c = self.coeffs;
        let dt = c.grid().dt();
        let sigma = c.sigma(step);
        let db = self.driver.brownian(step);
        let mut dlog = (c.alpha(step) - T::half() * norm_sq(sigma) - c.compensator_rate(step)) * dt + dot(sigma, db);
        let gamma = c.gamma(step);
        for j in self.driver.jumps(step) {
            dlog = dlog + gamma[j.atom].ln_1p();
            self.counts[j.atom] = self.counts[j.atom] + T::one();
        }
        for (b, &d) in self.brownian.iter_mut().zip(db) {
            *b = *b + d;
        }
        self.log_price = self.log_price + dlog;
        self.step += 1;
        true
    }
}

/// Asset price at every node of the driver's grid.
pub fn simulate_asset<T: Scalar>(coeffs: &MarketCoefficients<T>, driver: &DriverPath<T>) -> Result<Vec<T>> {
    let mut cur = PathCursor::new(coeffs, driver)?;
    let mut out = Vec::with_capacity(coeffs.n_steps() + 1);
    out.push(cur.price());
    while cur.advance() {
        out.push(cur.price());
    }
    Ok(out)
}

/// Portfolio rule: fraction of wealth held in the risky asset.
pub trait Policy<T: Scalar>: Sync {
    fn fraction(&self, state: &PathState<'_, T>, wealth: T) -> T;

    /// Amount held in the risky asset, `pi X`.
    fn exposure(&self, state: &PathState<'_, T>, wealth: T) -> T {
        self.fraction(state, wealth) * wealth
    }

    fn name(&self) -> &str {
        "custom"
    }
}

impl<T: Scalar, F> Policy<T> for F
where
    F: Fn(&PathState<'_, T>, T) -> T + Sync,
{
    fn fraction(&self, state: &PathState<'_, T>, wealth: T) -> T {
        self(state, wealth)
    }
}

/// Constant fraction `pi`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFraction<T>(pub T);

impl<T: Scalar> Policy<T> for ConstantFraction<T> {
    fn fraction(&self, _: &PathState<'_, T>, _: T) -> T {
        self.0
    }

    fn name(&self) -> &str {
        "constant-fraction"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WealthPath<T> {
    pub values: Vec<T>,
    pub policy_used: String,
}

/// Self-financing wealth under `policy` started at `z`.
///
/// The dollar exposure `u` is frozen at the left node of each step and
/// earns the step's return: `X += u (alpha dt + sigma.dB + sum gamma dÑ)`.
pub fn simulate_wealth<T: Scalar, P: Policy<T> + ?Sized>(
    coeffs: &MarketCoefficients<T>,
    policy: &P,
    z: T,
    driver: &DriverPath<T>,
) -> Result<WealthPath<T>> {
    if !z.is_finite() {
        return Err(Error::InvalidInput(format!("initial wealth must be finite, got {z}")));
    }
    let mut cur = PathCursor::new(coeffs, driver)?;
    let dt = coeffs.grid().dt();
    let mut x = z;
    let mut values = Vec::with_capacity(coeffs.n_steps() + 1);
    values.push(x);
    for step in 0..coeffs.n_steps() {
        let u = policy.exposure(&cur.state(), x);
        if !u.is_finite() {
            return Err(Error::NonFinitePolicy { step });
        }
        let cont = (coeffs.alpha(step) - coeffs.compensator_rate(step)) * dt + dot(coeffs.sigma(step), driver.brownian(step));
        let gamma = coeffs.gamma(step);
        let jumps = driver.jumps(step).iter().fold(T::zero(), |acc, j| acc + gamma[j.atom]);
        let next = x + u * (cont + jumps);
        x = next;
        values.push(x);
        cur.advance();
    }
    Ok(WealthPath { values, policy_used: policy.name().to_string() })
}

/// Market specification file. Scalars broadcast to every step; see
/// [`StepSeries`] and [`MatrixSeries`] for the accepted shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketFile {
    #[serde(rename = "S0")]
    pub s0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
    pub alpha: StepSeries,
    #[serde(default)]
    pub sigma: Option<MatrixSeries>,
    #[serde(default)]
    pub jump_channels: Vec<ChannelFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomFile {
    pub zeta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFile {
    pub atoms: Vec<AtomFile>,
    pub gamma: MatrixSeries,
}

/// A per-step scalar: one number for all steps, or one per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSeries {
    Scalar(f64),
    PerStep(Vec<f64>),
}

/// A per-step vector: a number (one component, all steps), a flat list
/// (components, all steps), or a list of rows (one row, or one per step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSeries {
    Scalar(f64),
    Row(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl StepSeries {
    fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            StepSeries::Scalar(x) => Ok(vec![*x; n]),
            StepSeries::PerStep(v) if v.len() == 1 => Ok(vec![v[0]; n]),
            StepSeries::PerStep(v) if v.len() == n => Ok(v.clone()),
            StepSeries::PerStep(v) => Err(Error::DimensionMismatch(format!("{what}: {} entries for {n} steps", v.len()))),
        }
    }

    fn is_broadcast(&self) -> bool {
        matches!(self, StepSeries::Scalar(_)) || matches!(self, StepSeries::PerStep(v) if v.len() == 1)
    }
}

impl MatrixSeries {
    fn expand(&self, n: usize, width: Option<usize>, what: &str) -> Result<Vec<Vec<f64>>> {
        let rows = match self {
            MatrixSeries::Scalar(x) => vec![vec![*x; width.unwrap_or(1)]; n],
            MatrixSeries::Row(r) => vec![r.clone(); n],
            MatrixSeries::Rows(r) if r.len() == 1 => vec![r[0].clone(); n],
            MatrixSeries::Rows(r) if r.len() == n => r.clone(),
            MatrixSeries::Rows(r) => {
                return Err(Error::DimensionMismatch(format!("{what}: {} rows for {n} steps", r.len())))
            }
        };
        if let Some(w) = width {
            if rows.iter().any(|r| r.len() != w) {
                return Err(Error::DimensionMismatch(format!("{what}: rows must have {w} entries")));
            }
        }
        Ok(rows)
    }

    fn is_broadcast(&self) -> bool {
        match self {
            MatrixSeries::Scalar(_) | MatrixSeries::Row(_) => true,
            MatrixSeries::Rows(r) => r.len() == 1,
        }
    }
}

impl MarketFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("market file: {e}")))
    }

    /// True when every coefficient is given as a broadcast value, so the
    /// step count can be overridden freely.
    pub fn is_broadcast(&self) -> bool {
        self.alpha.is_broadcast()
            && self.sigma.as_ref().is_none_or(MatrixSeries::is_broadcast)
            && self.jump_channels.iter().all(|c| c.gamma.is_broadcast())
    }

    /// Builds coefficients, optionally overriding `n_steps`.
    pub fn to_coefficients<T: Scalar>(&self, n_steps: Option<usize>) -> Result<MarketCoefficients<T>> {
        let n = match n_steps {
            Some(n) if n != self.n_steps && !self.is_broadcast() => {
                return Err(Error::InvalidInput(
                    "cannot override n_steps for a market with per-step coefficients".into(),
                ))
            }
            Some(n) => n,
            None => self.n_steps,
        };
        let grid = TimeGrid::new(T::of(self.horizon), n)?;
        let alpha = self.alpha.expand(n, "alpha")?;
        let sigma = match &self.sigma {
            Some(s) => s.expand(n, None, "sigma")?,
            None => vec![Vec::new(); n],
        };
        let mut channels = Vec::new();
        let mut gamma: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (c, ch) in self.jump_channels.iter().enumerate() {
            channels.push(JumpChannel {
                atoms: ch.atoms.iter().map(|a| Atom { mark: T::of(a.zeta), intensity: T::of(a.lambda) }).collect(),
            });
            let g = ch.gamma.expand(n, Some(ch.atoms.len()), &format!("jump_channels[{c}].gamma"))?;
            for (row, extra) in gamma.iter_mut().zip(g) {
                row.extend(extra);
            }
        }
        let conv = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
        MarketCoefficients::new(
            grid,
            T::of(self.s0),
            conv(alpha),
            sigma.into_iter().map(conv).collect(),
            LevyMeasure::new(channels)?,
            gamma.into_iter().map(conv).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn merton(n: usize) -> MarketCoefficients<f64> {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], levy, vec![0.5]).unwrap()
    }

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(1.0f64, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.step_of(0.3), 1);
        assert_eq!(g.step_of(1.0), 3);
        assert!(TimeGrid::new(0.0f64, 3).is_err());
        assert!(TimeGrid::new(1.0f64, 0).is_err());
    }

    #[test]
    fn levy_validation() {
        assert!(LevyMeasure::single_channel(vec![Atom { mark: 0.0, intensity: 1.0 }]).is_err());
        assert!(LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: -1.0 }]).is_err());
        let l = LevyMeasure::new(vec![
            JumpChannel { atoms: vec![Atom { mark: 1.0f64, intensity: 1.0 }, Atom { mark: -0.5, intensity: 0.5 }] },
            JumpChannel { atoms: vec![Atom { mark: 2.0, intensity: 3.0 }] },
        ])
        .unwrap();
        assert_eq!(l.n_atoms(), 3);
        assert_eq!(l.atom_ref(2), AtomRef { channel: 1, atom: 0 });
        assert_eq!(l.flat_index(AtomRef { channel: 0, atom: 1 }), Some(1));
        assert!((l.channel_rate(0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn gamma_at_or_below_minus_one_rejected() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 1.0 }]).unwrap();
        assert!(MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], levy, vec![-1.0]).is_err());
    }

    #[test]
    fn nondegeneracy_examples() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let bs = MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.2], LevyMeasure::none(), vec![]).unwrap();
        assert_eq!(check_nondegeneracy(&bs), vec![true, true]);
        let flat = MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.0], LevyMeasure::none(), vec![]).unwrap();
        assert_eq!(check_nondegeneracy(&flat), vec![false, false]);
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        let jumps: MarketCoefficients<f64> =
            MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.0], levy.clone(), vec![0.5]).unwrap();
        assert!((jumps.variance_rate(0) - 0.5).abs() < 1e-15);
        assert_eq!(check_nondegeneracy(&jumps), vec![true, true]);
        let zero = MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.0], levy, vec![0.0]).unwrap();
        assert_eq!(check_nondegeneracy(&zero), vec![false, false]);
    }

    #[test]
    fn degenerate_driver_rejected() {
        let g = TimeGrid::new(1.0f64, 4).unwrap();
        assert_eq!(simulate_drivers(&g, 0, &LevyMeasure::none(), 1, 0), Err(Error::DegenerateDriver));
    }

    #[test]
    fn drivers_are_deterministic() {
        let c = merton(20);
        let a = simulate_market_drivers(&c, SimConfig::new(5, 42)).unwrap();
        let b = simulate_market_drivers(&c, SimConfig::new(5, 42)).unwrap();
        assert_eq!(a, b);
        let d = simulate_market_drivers(&c, SimConfig::new(5, 43)).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn deterministic_ode_case() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let c = MarketCoefficients::constant(grid, 1.0, 0.1, vec![0.0], LevyMeasure::none(), vec![]).unwrap();
        let d = simulate_market_drivers(&c, SimConfig::new(1, 1)).unwrap();
        let s = simulate_asset(&c, &d[0]).unwrap();
        assert!((s[10] - 0.1f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn single_jump_multiplies_price() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let levy = LevyMeasure::single_channel(vec![Atom { mark: 1.0, intensity: 2.0 }]).unwrap();
        let c = MarketCoefficients::constant(grid, 1.0, 0.0, vec![], levy, vec![0.5]).unwrap();
        let d = DriverPath::from_parts(grid, 0, 1, vec![], vec![JumpEvent { time: 0.6, atom: 0 }]).unwrap();
        let s = simulate_asset(&c, &d).unwrap();
        let drift = (-0.5f64 * 2.0 * 0.25).exp();
        assert!((s[1] / s[0] - drift).abs() < 1e-14);
        assert!((s[3] / s[2] - 1.5 * drift).abs() < 1e-14);
    }

    #[test]
    fn zero_policy_and_zero_wealth() {
        let c = merton(50);
        let d = simulate_market_drivers(&c, SimConfig::new(3, 9)).unwrap();
        for drv in &d {
            let w = simulate_wealth(&c, &ConstantFraction(0.0), 3.0, drv).unwrap();
            assert!(w.values.iter().all(|&x| x == 3.0));
            let w = simulate_wealth(&c, &ConstantFraction(0.7), 0.0, drv).unwrap();
            assert!(w.values.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn non_finite_policy_reports_step() {
        let c = merton(10);
        let d = simulate_market_drivers(&c, SimConfig::new(1, 9)).unwrap();
        let bad = |s: &PathState<'_, f64>, _x: f64| if s.step == 3 { f64::NAN } else { 0.0 };
        assert_eq!(simulate_wealth(&c, &bad, 1.0, &d[0]), Err(Error::NonFinitePolicy { step: 3 }));
    }

    #[test]
    fn coarsening_preserves_totals() {
        let c = merton(20);
        let d = simulate_market_drivers(&c, SimConfig::new(1, 5)).unwrap().remove(0);
        let coarse = d.coarsen(4).unwrap();
        assert_eq!(coarse.n_steps(), 5);
        assert!((coarse.terminal_brownian()[0] - d.terminal_brownian()[0]).abs() < 1e-12);
        assert_eq!(coarse.total_counts(), d.total_counts());
        let fine_s = simulate_asset(&c, &d).unwrap();
        let coarse_s = simulate_asset(&c.with_steps(5).unwrap(), &coarse).unwrap();
        assert!((fine_s[20] - coarse_s[5]).abs() < 1e-12);
        assert!(d.coarsen(3).is_err());
    }

    #[test]
    fn market_file_broadcasts() {
        let text = r#"{"S0": 1.0, "T": 1.0, "n_steps": 4, "alpha": 0.1, "sigma": 0.2,
            "jump_channels": [{"atoms": [{"zeta": 1.0, "lambda": 2.0}], "gamma": 0.5}]}"#;
        let f = MarketFile::from_json(text).unwrap();
        let c: MarketCoefficients<f64> = f.to_coefficients(None).unwrap();
        assert_eq!(c, merton(4));
        let c8: MarketCoefficients<f64> = f.to_coefficients(Some(8)).unwrap();
        assert_eq!(c8.n_steps(), 8);
        let two = r#"{"S0": 1.0, "T": 1.0, "n_steps": 2, "alpha": [0.1, 0.2], "sigma": [[0.2, 0.1]]}"#;
        let c: MarketCoefficients<f64> = MarketFile::from_json(two).unwrap().to_coefficients(None).unwrap();
        assert_eq!(c.m(), 2);
        assert_eq!(c.alpha(1), 0.2);
        assert!(MarketFile::from_json(two).unwrap().to_coefficients::<f64>(Some(3)).is_err());
        assert!(MarketFile::from_json("{\"S0\": 1}").is_err());
    }

    #[test]
    fn single_precision_path() {
        let grid = TimeGrid::new(1.0f32, 10).unwrap();
        let c = MarketCoefficients::constant(grid, 1.0f32, 0.1, vec![0.2], LevyMeasure::none(), vec![]).unwrap();
        let d = simulate_market_drivers(&c, SimConfig::new(2, 3)).unwrap();
        let s = simulate_asset(&c, &d[0]).unwrap();
        assert!(s.iter().all(|&x| x > 0.0 && x.is_finite()));
    }
}
