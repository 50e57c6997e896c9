//! Finite scenario trees: exact minimal-variance hedging by backward
//! induction and the range of martingale-measure prices.
//!
//! Trees are non-recombining; every node of a level shares the level's
//! branch set, so node `j` on level `l` has children `j * b_l + i`.

use serde::Serialize;

use crate::claims::Claim;
use crate::error::{Error, Result};
use crate::market::MarketCoefficients;
use crate::pricing::{Method, PriceEstimate};
use crate::scalar::{norm_sq, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch<T> {
    pub prob: T,
    /// Net return `R`; the gross factor is `1 + R`.
    #[serde(rename = "return")]
    pub ret: T,
    /// Brownian increment attributed to the branch.
    pub db: Vec<T>,
    /// Jump counts per atom on the branch.
    pub dn: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioTree<T> {
    pub s0: T,
    pub horizon: T,
    pub levels: Vec<Vec<Branch<T>>>,
}

impl<T: Scalar> ScenarioTree<T> {
    /// Validates probabilities, returns and branch dimensions.
    pub fn new(s0: T, horizon: T, levels: Vec<Vec<Branch<T>>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidInput("tree needs at least one level".into()));
        }
        let tol = T::of(1e-12);
        for (level, branches) in levels.iter().enumerate() {
            if branches.is_empty() {
                return Err(Error::InvalidInput(format!("level {level} has no branches")));
            }
            let total = branches.iter().fold(T::zero(), |a, b| a + b.prob);
            if (total - T::one()).abs() > tol || branches.iter().any(|b| !(b.prob > T::zero())) {
                return Err(Error::InvalidInput(format!("level {level}: probabilities must be positive and sum to 1")));
            }
            if branches.iter().any(|b| !(b.ret > -T::one())) {
                return Err(Error::InvalidInput(format!("level {level}: returns must exceed -1")));
            }
            let (m, k) = (branches[0].db.len(), branches[0].dn.len());
            if branches.iter().any(|b| b.db.len() != m || b.dn.len() != k) {
                return Err(Error::DimensionMismatch(format!("level {level}: branch increments differ in length")));
            }
        }
        Ok(ScenarioTree { s0, horizon, levels })
    }

    /// Single-period tree with the given `(probability, return)` pairs and
    /// no driver increments.
    pub fn one_period(s0: T, branches: &[(T, T)]) -> Result<Self> {
        let level = branches.iter().map(|&(prob, ret)| Branch { prob, ret, db: vec![], dn: vec![] }).collect();
        Self::new(s0, T::one(), vec![level])
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Nodes on level `l` (the root level is 0, leaves are level `depth`).
    pub fn n_nodes(&self, level: usize) -> usize {
        self.levels[..level].iter().map(Vec::len).product()
    }

    pub fn n_leaves(&self) -> usize {
        self.n_nodes(self.depth())
    }

    /// Branch indices from the root to `leaf`.
    pub fn leaf_path(&self, mut leaf: usize) -> Vec<usize> {
        let mut out = vec![0; self.depth()];
        for (l, branches) in self.levels.iter().enumerate().rev() {
            out[l] = leaf % branches.len();
            leaf /= branches.len();
        }
        out
    }

    /// Price, cumulative Brownian increment and counts at `leaf`.
    pub fn leaf_state(&self, leaf: usize) -> (T, Vec<T>, Vec<T>) {
        let first = &self.levels[0][0];
        let (mut s, mut b, mut n) = (self.s0, vec![T::zero(); first.db.len()], vec![T::zero(); first.dn.len()]);
        for (l, i) in self.leaf_path(leaf).into_iter().enumerate() {
            let br = &self.levels[l][i];
            s = s * (T::one() + br.ret);
            b.iter_mut().zip(&br.db).for_each(|(x, &d)| *x = *x + d);
            n.iter_mut().zip(&br.dn).for_each(|(x, &d)| *x = *x + d);
        }
        (s, b, n)
    }

    /// `P` probability of each leaf.
    pub fn leaf_probabilities(&self) -> Vec<T> {
        (0..self.n_leaves())
            .map(|leaf| self.leaf_path(leaf).into_iter().enumerate().fold(T::one(), |p, (l, i)| p * self.levels[l][i].prob))
            .collect()
    }

    /// Claim payoff at every leaf.
    pub fn claim_values(&self, claim: &Claim<T>, coeffs: &MarketCoefficients<T>) -> Result<Vec<T>> {
        claim.check_dims(coeffs)?;
        Ok((0..self.n_leaves())
            .map(|leaf| {
                let (s, b, n) = self.leaf_state(leaf);
                claim.payoff(s, &b, &n, coeffs.levy(), self.horizon)
            })
            .collect())
    }

    pub fn to_json(&self) -> String
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }
}

/// Moment-matched tree with one level per grid step of `coeffs`.
///
/// Each level has two diffusion branches (when `sigma != 0`) and one branch
/// per jump atom with probability `lambda dt`. Returns reproduce the mean
/// `alpha dt` and variance `(|sigma|^2 + sum gamma^2 lambda) dt` of the step
/// exactly. Without a diffusion part the jump returns are scaled to carry
/// the whole variance.
pub fn discretize_market<T: Scalar>(coeffs: &MarketCoefficients<T>) -> Result<ScenarioTree<T>> {
    let dt = coeffs.grid().dt();
    let (m, k) = (coeffs.m(), coeffs.n_atoms());
    let mut levels = Vec::with_capacity(coeffs.n_steps());
    for step in 0..coeffs.n_steps() {
        let sigma = coeffs.sigma(step);
        let gamma = coeffs.gamma(step);
        let sig2 = norm_sq(sigma);
        let probs: Vec<T> = (0..k).map(|a| coeffs.levy().atom(a).intensity * dt).collect();
        let p_jump = probs.iter().fold(T::zero(), |a, &p| a + p);
        let p0 = T::one() - p_jump;
        if !(p0 > T::zero()) || probs.iter().any(|&p| !(p > T::zero())) {
            return Err(Error::RefineGrid(format!("step {step}: jump probabilities lambda dt leave no diffusion mass")));
        }
        let mut level = Vec::with_capacity(k + 2);
        let jump_var = probs.iter().zip(gamma).fold(T::zero(), |a, (&p, &g)| a + p * g * g);
        let jump_mean = probs.iter().zip(gamma).fold(T::zero(), |a, (&p, &g)| a + p * g);
        let mean = coeffs.alpha(step) * dt;
        if sig2 > T::zero() {
            // diffusion branches c +- s around the compensated drift
            let c = mean - jump_mean;
            let s = ((sig2 * dt + jump_mean * jump_mean) / p0).sqrt();
            let unit: Vec<T> = sigma.iter().map(|&x| x / sig2.sqrt()).collect();
            let step_b = (dt / p0).sqrt();
            for sign in [T::one(), -T::one()] {
                level.push(Branch {
                    prob: p0 * T::half(),
                    ret: c + sign * s,
                    db: unit.iter().map(|&u| sign * step_b * u).collect(),
                    dn: vec![T::zero(); k],
                });
            }
            for a in 0..k {
                let mut dn = vec![T::zero(); k];
                dn[a] = T::one();
                level.push(Branch { prob: probs[a], ret: c + gamma[a], db: vec![T::zero(); m], dn });
            }
        } else {
            let centred = jump_var - jump_mean * jump_mean;
            if k == 0 || !(centred > T::zero()) {
                return Err(Error::MarketDegenerate { step });
            }
            let scale = (jump_var / centred).sqrt();
            let c = mean - scale * jump_mean;
            level.push(Branch { prob: p0, ret: c, db: vec![T::zero(); m], dn: vec![T::zero(); k] });
            for a in 0..k {
                let mut dn = vec![T::zero(); k];
                dn[a] = T::one();
                level.push(Branch { prob: probs[a], ret: c + scale * gamma[a], db: vec![T::zero(); m], dn });
            }
        }
        if level.iter().any(|b| !(b.ret > -T::one())) {
            return Err(Error::RefineGrid(format!("step {step}: a branch return is at or below -1")));
        }
        levels.push(level);
    }
    ScenarioTree::new(coeffs.s0(), coeffs.grid().horizon(), levels)
}

/// `a x^2 + b x + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Quadratic<T> {
    a: T,
    b: T,
    c: T,
}

/// Exposure rule `u(x) = slope x + intercept` at a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeRule<T> {
    pub slope: T,
    pub intercept: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinVarianceSolution<T> {
    pub z_star: T,
    pub j_star: T,
    /// Leading coefficient of `J(z)` at the root.
    pub curvature: T,
    /// Feedback rule per level and node.
    pub rules: Vec<Vec<NodeRule<T>>>,
    /// Optimal exposure per level and node along the wealth started at `z_star`.
    pub policy: Vec<Vec<T>>,
    /// Optimal wealth per level and node, leaves included.
    pub wealth: Vec<Vec<T>>,
}

impl<T: Scalar> MinVarianceSolution<T> {
    /// `J(z)` under the optimal policy from `z`.
    pub fn cost(&self, z: T) -> T {
        self.j_star + self.curvature * (z - self.z_star) * (z - self.z_star)
    }
}

/// Exact minimisation of `E[(X(T) - F)^2 / 2]` over initial wealth and
/// Markov exposures, by backward induction on quadratic value functions.
pub fn brute_force_min_variance<T: Scalar>(tree: &ScenarioTree<T>, leaf_values: &[T]) -> Result<MinVarianceSolution<T>> {
    if leaf_values.len() != tree.n_leaves() {
        return Err(Error::DimensionMismatch(format!("{} leaf values for {} leaves", leaf_values.len(), tree.n_leaves())));
    }
    let mut value: Vec<Quadratic<T>> =
        leaf_values.iter().map(|&f| Quadratic { a: T::half(), b: -f, c: T::half() * f * f }).collect();
    let mut rules = vec![Vec::new(); tree.depth()];
    let tiny = T::of(1e-300);
    for l in (0..tree.depth()).rev() {
        let branches = &tree.levels[l];
        let nb = branches.len();
        let mut parent = Vec::with_capacity(tree.n_nodes(l));
        let mut level_rules = Vec::with_capacity(tree.n_nodes(l));
        for node in 0..tree.n_nodes(l) {
            let kids = &value[node * nb..(node + 1) * nb];
            // d/du sum p V_i(x + u R_i) = 0  =>  u = -(sum p R (2 a x + b)) / (2 sum p a R^2)
            let mut den = T::zero();
            let mut s_ar = T::zero();
            let mut s_br = T::zero();
            for (br, v) in branches.iter().zip(kids) {
                den = den + br.prob * v.a * br.ret * br.ret;
                s_ar = s_ar + br.prob * v.a * br.ret;
                s_br = s_br + br.prob * v.b * br.ret;
            }
            let rule = if den > tiny {
                NodeRule { slope: -s_ar / den, intercept: -s_br / (T::two() * den) }
            } else {
                NodeRule { slope: T::zero(), intercept: T::zero() }
            };
            // V(x) = sum p V_i(g_i x + h_i), g_i = 1 + slope R_i, h_i = intercept R_i
            let mut q = Quadratic { a: T::zero(), b: T::zero(), c: T::zero() };
            for (br, v) in branches.iter().zip(kids) {
                let g = T::one() + rule.slope * br.ret;
                let h = rule.intercept * br.ret;
                q.a = q.a + br.prob * v.a * g * g;
                q.b = q.b + br.prob * (T::two() * v.a * g * h + v.b * g);
                q.c = q.c + br.prob * (v.a * h * h + v.b * h + v.c);
            }
            parent.push(q);
            level_rules.push(rule);
        }
        value = parent;
        rules[l] = level_rules;
    }
    let root = value[0];
    if !(root.a > T::zero()) {
        return Err(Error::NonFinite("root cost is not strictly convex in z".into()));
    }
    let z_star = -root.b / (T::two() * root.a);
    let j_star = (root.c - root.b * root.b / (T::of(4.0) * root.a)).max(T::zero());
    let mut wealth = vec![vec![z_star]];
    let mut policy = Vec::with_capacity(tree.depth());
    for (l, branches) in tree.levels.iter().enumerate() {
        let xs = &wealth[l];
        let us: Vec<T> = xs.iter().zip(&rules[l]).map(|(&x, r)| r.slope * x + r.intercept).collect();
        let next = xs.iter().zip(&us).flat_map(|(&x, &u)| branches.iter().map(move |br| x + u * br.ret)).collect();
        policy.push(us);
        wealth.push(next);
    }
    Ok(MinVarianceSolution { z_star, j_star, curvature: root.a, rules, policy, wealth })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriceInterval<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> PriceInterval<T> {
    pub fn width(&self) -> T {
        self.upper - self.lower
    }

    pub fn contains(&self, x: T, tol: T) -> bool {
        x >= self.lower - tol && x <= self.upper + tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeEmmPrices<T> {
    /// `[p_b, p_s]`: extremes of `E_Q[F]` over all martingale measures.
    pub interval: PriceInterval<T>,
    /// Vertices of the one-step martingale polytope per level.
    pub vertices: Vec<Vec<Vec<T>>>,
    pub z_star: T,
    pub z_star_inside: bool,
}

/// Vertices of `{q >= 0, sum q = 1, sum q R = 0}`: pairs of branches with
/// returns of opposite sign, and single branches with zero return.
pub fn martingale_vertices<T: Scalar>(branches: &[Branch<T>]) -> Vec<Vec<T>> {
    let n = branches.len();
    let mut out = Vec::new();
    for i in 0..n {
        if branches[i].ret == T::zero() {
            let mut q = vec![T::zero(); n];
            q[i] = T::one();
            out.push(q);
        }
    }
    for i in 0..n {
        for j in 0..n {
            let (ri, rj) = (branches[i].ret, branches[j].ret);
            if ri < T::zero() && rj > T::zero() {
                let mut q = vec![T::zero(); n];
                q[i] = rj / (rj - ri);
                q[j] = -ri / (rj - ri);
                out.push(q);
            }
        }
    }
    out
}

/// Lowest and highest `E_Q[F]` over martingale measures on the tree, and
/// whether the minimal-variance price lies between them.
///
/// The measures are products of one-step kernels, so both extremes follow
/// from a backward pass that optimises over the vertices of each node's
/// polytope.
pub fn tree_emm_prices<T: Scalar>(tree: &ScenarioTree<T>, leaf_values: &[T]) -> Result<TreeEmmPrices<T>> {
    let solution = brute_force_min_variance(tree, leaf_values)?;
    let vertices: Vec<Vec<Vec<T>>> = tree.levels.iter().map(|b| martingale_vertices(b)).collect();
    if let Some(level) = vertices.iter().position(Vec::is_empty) {
        return Err(Error::TreeArbitrage { level });
    }
    let mut lo = leaf_values.to_vec();
    let mut hi = leaf_values.to_vec();
    for l in (0..tree.depth()).rev() {
        let nb = tree.levels[l].len();
        let fold = |vals: &[T], node: usize, pick: fn(T, T) -> T| {
            vertices[l]
                .iter()
                .map(|q| q.iter().zip(&vals[node * nb..(node + 1) * nb]).fold(T::zero(), |a, (&w, &v)| a + w * v))
                .reduce(pick)
                .expect("at least one vertex")
        };
        lo = (0..tree.n_nodes(l)).map(|node| fold(&lo, node, T::min)).collect();
        hi = (0..tree.n_nodes(l)).map(|node| fold(&hi, node, T::max)).collect();
    }
    let interval = PriceInterval { lower: lo[0], upper: hi[0] };
    let scale = T::one().max(interval.upper.abs()).max(interval.lower.abs());
    let z_star_inside = interval.contains(solution.z_star, T::of(1e-10) * scale);
    Ok(TreeEmmPrices { interval, vertices, z_star: solution.z_star, z_star_inside })
}

/// Exact tree price of `claim` on a `depth`-step moment-matched tree of
/// `coeffs`, with the martingale-measure bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreePrice<T> {
    pub price: PriceEstimate<T>,
    pub j_star: T,
    pub bounds: PriceInterval<T>,
    pub inside_bounds: bool,
}

pub fn tree_price<T: Scalar>(coeffs: &MarketCoefficients<T>, claim: &Claim<T>, depth: usize) -> Result<TreePrice<T>> {
    let coarse = coeffs.with_steps(depth)?;
    let tree = discretize_market(&coarse)?;
    let leaves = tree.claim_values(claim, &coarse)?;
    let sol = brute_force_min_variance(&tree, &leaves)?;
    let emm = tree_emm_prices(&tree, &leaves)?;
    Ok(TreePrice {
        price: PriceEstimate::exact(sol.z_star, Method::Oracle),
        j_star: sol.j_star,
        bounds: emm.interval,
        inside_bounds: emm.z_star_inside,
    })
}
