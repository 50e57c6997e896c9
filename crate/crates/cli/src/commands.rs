//! The `price`, `hedge` and `verify` pipelines.

use minvar::adjoint::{first_order_residuals, price_theorem1, solve_adjoint_lsmc, BasisSpec, HedgedEnsemble, KernelChoice};
use minvar::claims::{MartingaleRepresentation, Measure};
use minvar::emm::{emm_residual, kallsen_shiryaev_check, minimal_variance_kernel, weighted_terminal_mean};
use minvar::hedging::{affinity_residual, build_aux, explicit_vs_traded, hedge_rows, integrating_factor_path};
use minvar::market::{check_nondegeneracy, simulate_driver, simulate_market_drivers, SimConfig};
use minvar::oracle::{tree_price, PriceInterval};
use minvar::stats::Estimate;
use minvar::pricing::{price_closed_form, price_direct_on, price_emm_star_on, Method, PriceEstimate};
use minvar::{Aux, Claim, Driver, Market};
use serde::Serialize;

use crate::report::{emit, emit_json, load, meta, Meta};
use crate::{CliError, HedgeArgs, MethodArg, PriceArgs, VerifyArgs};

/// Budget for the first-order residual per unit of `dt / T`, in units of the
/// size of its terms. The frozen-exposure step leaves an O(dt) bias.
const COND_DT_BUDGET: f64 = 20.0;

fn basis_for(claim: &Claim) -> BasisSpec<f64> {
    match claim {
        Claim::Call { strike } => BasisSpec { moneyness_strike: Some(*strike), ..BasisSpec::default() },
        _ => BasisSpec::default(),
    }
}

fn theorem1(
    market: &Market,
    aux: &Aux,
    rep: &dyn MartingaleRepresentation<f64>,
    claim: &Claim,
    drivers: Vec<Driver>,
) -> Result<PriceEstimate<f64>, CliError> {
    let z = price_direct_on(aux, rep, &drivers)?.value;
    let ens = HedgedEnsemble::simulate(market, rep, drivers, z)?;
    let sol = solve_adjoint_lsmc(market, &ens, &basis_for(claim))?;
    let kernel = minimal_variance_kernel(market)?;
    let e = price_theorem1(market, KernelChoice::Shared(&kernel), &sol.triple, &ens)?;
    Ok(PriceEstimate::from_estimate(e, Method::Theorem1))
}

#[derive(Debug, Serialize)]
struct ZScore {
    a: Method,
    b: Method,
    z: Option<f64>,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    depth: usize,
    bounds: PriceInterval<f64>,
    inside_bounds: bool,
    j_star: f64,
}

#[derive(Debug, Serialize)]
struct PriceReport {
    meta: Meta,
    n_paths: u64,
    n_steps: usize,
    estimates: Vec<PriceEstimate<f64>>,
    z_scores: Vec<ZScore>,
    oracle: Option<OracleReport>,
}

pub fn price(args: &PriceArgs) -> Result<(), CliError> {
    let inputs = load(&args.common)?;
    let (market, claim) = (&inputs.market, &inputs.claim);
    let mut methods = args.methods.clone();
    if methods.is_empty() {
        methods = vec![MethodArg::Direct, MethodArg::EmmStar];
    }
    methods.dedup();
    let sim = SimConfig::new(args.paths as usize, args.common.seed);
    let needs_paths = methods.iter().any(|m| matches!(m, MethodArg::Direct | MethodArg::EmmStar | MethodArg::Theorem1));
    let drivers = if needs_paths { simulate_market_drivers(market, sim)? } else { Vec::new() };
    let mut estimates = Vec::new();
    let mut oracle = None;
    for method in &methods {
        let est = match method {
            MethodArg::Direct => {
                let aux = build_aux(market)?;
                let rep = claim.representation(market, Measure::default())?;
                price_direct_on(&aux, rep.as_ref(), &drivers)?
            }
            MethodArg::EmmStar => price_emm_star_on(market, claim, &drivers)?,
            MethodArg::ClosedForm => price_closed_form(market, claim)?,
            MethodArg::Theorem1 => {
                let aux = build_aux(market)?;
                let rep = claim.representation(market, Measure::default())?;
                theorem1(market, &aux, rep.as_ref(), claim, drivers.clone())?
            }
            MethodArg::Oracle => {
                let t = tree_price(market, claim, args.tree_depth)?;
                oracle = Some(OracleReport { depth: args.tree_depth, bounds: t.bounds, inside_bounds: t.inside_bounds, j_star: t.j_star });
                t.price
            }
        };
        estimates.push(est);
    }
    let mut z_scores = Vec::new();
    for i in 0..estimates.len() {
        for j in i + 1..estimates.len() {
            let z = estimates[i].z_score(&estimates[j]);
            z_scores.push(ZScore { a: estimates[i].method, b: estimates[j].method, z: z.is_finite().then_some(z) });
        }
    }
    let report = PriceReport {
        meta: meta("price", args, args.common.seed, &inputs),
        n_paths: args.paths,
        n_steps: market.n_steps(),
        estimates,
        z_scores,
        oracle,
    };
    emit_json(args.common.out.as_deref(), &report)
}

pub fn hedge(args: &HedgeArgs) -> Result<(), CliError> {
    let inputs = load(&args.common)?;
    let (market, claim) = (&inputs.market, &inputs.claim);
    let aux = build_aux(market)?;
    let rep = claim.representation(market, Measure::default())?;
    let z = args.z.unwrap_or_else(|| rep.initial_value());
    let mut writer = csv::Writer::from_writer(Vec::new());
    for path in 0..args.paths as usize {
        let driver = simulate_driver(market.grid(), market.m(), market.levy(), args.common.seed, path as u64);
        for row in hedge_rows(&aux, rep.as_ref(), &driver, z, path)? {
            writer.serialize(row).map_err(|e| CliError::Failed(format!("csv: {e}")))?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Failed(format!("csv: {e}")))?;
    emit(args.common.out.as_deref(), &bytes)
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    /// `None` when the check could not run on this input.
    passed: Option<bool>,
    hard: bool,
    value: Option<f64>,
    threshold: Option<f64>,
    detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Check { name, passed: Some(passed), hard: true, value: Some(value), threshold: Some(threshold), detail: detail.into() }
    }

    fn failed(name: &'static str, detail: impl Into<String>) -> Self {
        Check { name, passed: Some(false), hard: true, value: None, threshold: None, detail: detail.into() }
    }

    fn skipped(name: &'static str, detail: impl Into<String>) -> Self {
        Check { name, passed: None, hard: false, value: None, threshold: None, detail: detail.into() }
    }

    fn soft(mut self) -> Self {
        self.hard = false;
        self
    }
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    meta: Meta,
    n_paths: u64,
    n_steps: usize,
    passed: bool,
    checks: Vec<Check>,
}

fn run_checks(args: &VerifyArgs, market: &Market, claim: &Claim) -> Vec<Check> {
    let mut checks = Vec::new();
    let degenerate: Vec<usize> = check_nondegeneracy(market).iter().enumerate().filter(|(_, ok)| !**ok).map(|(s, _)| s).collect();
    if !degenerate.is_empty() {
        checks.push(Check::failed("nondegeneracy", format!("|sigma|^2 + sum gamma^2 lambda = 0 on {} steps, first {}", degenerate.len(), degenerate[0])));
        return checks;
    }
    checks.push(Check::new("nondegeneracy", true, 0.0, 0.0, "variance rate positive on every step"));

    let kernel = match minimal_variance_kernel(market) {
        Ok(k) => k,
        Err(e) => {
            checks.push(Check::failed("q_star_density", e.to_string()));
            return checks;
        }
    };
    checks.push(Check::new("q_star_density", true, 0.0, -1.0, "G gamma > -1 on every step and atom"));
    let aux = match build_aux(market) {
        Ok(a) => a,
        Err(e) => {
            checks.push(Check::failed("integrating_factor", e.to_string()));
            return checks;
        }
    };

    let max_res = (0..market.n_steps()).map(|s| emm_residual(&kernel, market, s).abs()).fold(0.0, f64::max);
    checks.push(Check::new("emm_residual", max_res < 1e-12, max_res, 1e-12, "max over steps of |alpha + theta0.sigma + sum theta1 gamma lambda|"));
    let ks = kallsen_shiryaev_check(&kernel, market);
    checks.push(Check { threshold: None, ..Check::new("density_martingale", ks.holds, ks.log_bound, 0.0, "log of the exponential-moment bound") });

    let sim = SimConfig::new(args.paths as usize, args.common.seed);
    let drivers = match simulate_market_drivers(market, sim) {
        Ok(d) => d,
        Err(e) => {
            checks.push(Check::failed("simulation", e.to_string()));
            return checks;
        }
    };
    let mut mc = || -> Result<(), minvar::Error> {
        let z1 = weighted_terminal_mean(&kernel, market, &drivers, |_| 1.0)?.estimate;
        let zs = weighted_terminal_mean(&kernel, market, &drivers, |st| st.price)?.estimate;
        let zz = (z1.value - 1.0) / z1.std_error;
        checks.push(Check::new("density_mean", z1.agrees(&Estimate::exact(1.0), 3.0), zz, 3.0, format!("E[Z*(T)] = {:.6} +- {:.6}", z1.value, z1.std_error)));
        let sz = (zs.value - market.s0()) / zs.std_error;
        checks.push(Check::new("discounted_price_mean", zs.agrees(&Estimate::exact(market.s0()), 3.0), sz, 3.0, format!("E[S(T) Z*(T)] = {:.6} +- {:.6}", zs.value, zs.std_error)));

        let rep = claim.representation(market, Measure::default())?;
        let direct = price_direct_on(&aux, rep.as_ref(), &drivers)?;
        let star = price_emm_star_on(market, claim, &drivers)?;
        let z = direct.z_score(&star);
        let z = if z.is_finite() { z } else { 0.0 };
        checks.push(Check::new(
            "direct_vs_emm_star",
            direct.estimate().agrees(&star.estimate(), 3.0),
            z,
            3.0,
            format!("direct {:.6} +- {:.6}, emm-star {:.6} +- {:.6}", direct.value, direct.std_error, star.value, star.std_error),
        ));
        match price_closed_form(market, claim) {
            Ok(exact) => {
                let z = direct.z_score(&exact);
                let z = if z.is_finite() { z } else { 0.0 };
                checks.push(Check::new("direct_vs_closed_form", direct.estimate().agrees(&exact.estimate(), 3.0), z, 3.0, format!("closed form {:.6}", exact.value)));
            }
            Err(_) => checks.push(Check::skipped("direct_vs_closed_form", "no closed form for this market and claim")),
        }

        let mut worst = 0.0f64;
        for d in drivers.iter().take(1000) {
            let ifp = integrating_factor_path(&aux, d, rep.as_ref())?;
            worst = worst.max(affinity_residual(&ifp, direct.value, 1.0));
        }
        checks.push(Check::new("wealth_affinity", worst < 1e-10, worst, 1e-10, "central difference in z against exp(-A_T)"));

        let agreement = explicit_vs_traded(&aux, rep.as_ref(), &drivers[..drivers.len().min(2000)], direct.value)?;
        checks.push(
            Check::new(
                "explicit_vs_traded_wealth",
                agreement.relative < 0.05,
                agreement.relative,
                0.05,
                format!("mean pathwise sup error {:.3e}; shrinks with the grid", agreement.mean_sup_abs),
            )
            .soft(),
        );

        let n_adj = drivers.len().min(20_000);
        let ens = HedgedEnsemble::simulate(market, rep.as_ref(), drivers[..n_adj].to_vec(), direct.value)?;
        let sol = solve_adjoint_lsmc(market, &ens, &basis_for(claim))?;
        let fo = first_order_residuals(&sol.triple, market);
        let p0 = fo.terminal_mean.value / fo.terminal_mean.std_error.max(f64::MIN_POSITIVE);
        let p0 = if fo.terminal_mean.std_error > 0.0 { p0 } else { 0.0 };
        checks.push(Check::new("adjoint_p0", fo.terminal_mean.agrees(&Estimate::exact(0.0), 3.0), p0, 3.0, format!("p(0) = {:.3e} +- {:.3e}", fo.terminal_mean.value, fo.terminal_mean.std_error)));
        let c = &fo.cond_integral;
        let cz = if c.std_error > 0.0 { c.value / c.std_error } else { 0.0 };
        checks.push(Check::new(
            "adjoint_first_order",
            fo.cond_holds(3.0, COND_DT_BUDGET * market.grid().dt() / market.grid().horizon()),
            cz,
            3.0,
            format!(
                "time integral of alpha p + sigma q + sum gamma r lambda = {:.3e} +- {:.3e}, term scale {:.3e}",
                c.value, c.std_error, fo.cond_scale
            ),
        ));
        Ok(())
    };
    if let Err(e) = mc() {
        checks.push(Check::failed("monte_carlo", e.to_string()));
    }

    match tree_price(market, claim, args.tree_depth) {
        Ok(t) => checks.push(Check {
            threshold: None,
            ..Check::new("tree_price_within_bounds", t.inside_bounds, t.price.value, 0.0, format!("tree price {:.6} in [{:.6}, {:.6}]", t.price.value, t.bounds.lower, t.bounds.upper))
        }),
        Err(e) => checks.push(Check::skipped("tree_price_within_bounds", e.to_string())),
    }
    checks
}

pub fn verify(args: &VerifyArgs) -> Result<(), CliError> {
    let inputs = load(&args.common)?;
    let checks = run_checks(args, &inputs.market, &inputs.claim);
    let passed = checks.iter().all(|c| !c.hard || c.passed == Some(true));
    let report = VerifyReport {
        meta: meta("verify", args, args.common.seed, &inputs),
        n_paths: args.paths,
        n_steps: inputs.market.n_steps(),
        passed,
        checks,
    };
    emit_json(args.common.out.as_deref(), &report)?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| c.hard && c.passed != Some(true)).map(|c| c.name).collect();
        Err(CliError::Failed(format!("hard checks failed: {}", failed.join(", "))))
    }
}
