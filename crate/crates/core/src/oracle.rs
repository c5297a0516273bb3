//! Independent checks for the backward-induction solver.
//!
//! * [`enumerate_game_value`] evaluates every pair of pure stopping rules on a
//!   small lattice and takes inf-sup and sup-inf directly, under either payoff
//!   kernel.
//! * [`american_value`] is a separate Snell-envelope recursion (buyer only).
//! * [`mc_price`] simulates the discrete model, plays a pair of stopping rules
//!   read off a lattice, and pays the kernel on payoffs computed from the
//!   simulated path. [`saddle_check`] uses it to test unilateral deviations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynkin::{
    compensated_sum, extract_strategies, DPResult, FilteredLattice, LatticeBuilder, StoppingRule,
};
use crate::lattice::ModelLattice;
use crate::model::{MertonParams, StepParams};
use crate::payoff::PayoffSpec;

/// Default cap on the number of rule pairs evaluated by [`enumerate_game_value`].
pub const DEFAULT_ENUMERATION_CAP: usize = 1 << 20;

pub const MIN_PATHS: usize = 100;

/// Probability of flipping a node's flag when generating a random deviation.
pub const DEVIATION_FLIP_PROB: f64 = 0.3;

/// Stream id reserved for deviation generation; path streams use the path index.
const DEVIATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("enumeration needs more than {cap} rule pairs ({rules}+ rules per player)")]
    EnumerationCapExceeded { rules: usize, cap: usize },
    #[error("invalid Monte Carlo config: {0}")]
    InvalidConfig(String),
    #[error("rules have {rules} flags but the lattice has {nodes} nodes")]
    RuleMismatch { rules: usize, nodes: usize },
}

/// Payoff kernel of the game, deciding who is paid on simultaneous action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    /// Seller stopping strictly first pays `upper`; otherwise the buyer gets `lower`.
    H,
    /// Stopping together at the horizon pays `lower`; before it, the seller's
    /// cancellation takes precedence on ties.
    J,
}

impl Kernel {
    /// Payoff at a node where at least one player stops, or `None` to continue.
    fn settle(
        self,
        terminal: bool,
        seller: bool,
        buyer: bool,
        lower: f64,
        upper: f64,
    ) -> Option<f64> {
        match self {
            Kernel::H => {
                if buyer || terminal {
                    Some(lower)
                } else if seller {
                    Some(upper)
                } else {
                    None
                }
            }
            Kernel::J => {
                if terminal {
                    Some(lower)
                } else if seller {
                    Some(upper)
                } else if buyer {
                    Some(lower)
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GameBounds {
    pub inf_sup: f64,
    pub sup_inf: f64,
}

/// `E[kernel(sigma, tau)]` by forward propagation of path mass.
pub fn expected_payoff(
    lattice: &FilteredLattice,
    seller: &StoppingRule,
    buyer: &StoppingRule,
    kernel: Kernel,
) -> f64 {
    let mut mass = vec![0.0; lattice.len()];
    expected_payoff_into(lattice, seller, buyer, kernel, &mut mass)
}

fn expected_payoff_into(
    lattice: &FilteredLattice,
    seller: &StoppingRule,
    buyer: &StoppingRule,
    kernel: Kernel,
    mass: &mut [f64],
) -> f64 {
    mass.fill(0.0);
    mass[lattice.root() as usize] = 1.0;
    let mut total = 0.0;
    for k in 0..=lattice.horizon() {
        for &id in lattice.layer(k) {
            let m = mass[id as usize];
            if m == 0.0 {
                continue;
            }
            let node = lattice.node(id);
            let settled = kernel.settle(
                lattice.is_terminal(id),
                seller.stops_at(id),
                buyer.stops_at(id),
                node.lower,
                node.upper,
            );
            match settled {
                Some(pay) => total += m * pay,
                None => {
                    for t in lattice.transitions(id) {
                        mass[t.child as usize] += m * t.prob;
                    }
                }
            }
        }
    }
    total
}

/// All distinct pure stopping rules: flags are chosen only at nodes that some
/// path reaches without stopping earlier, so no two rules define the same
/// stopping time.
pub fn enumerate_rules(
    lattice: &FilteredLattice,
    max_rules: usize,
) -> Result<Vec<StoppingRule>, OracleError> {
    let mut parents = vec![Vec::new(); lattice.len()];
    let mut order = Vec::with_capacity(lattice.len());
    for k in 0..lattice.horizon() {
        for &id in lattice.layer(k) {
            order.push(id);
            for t in lattice.transitions(id) {
                parents[t.child as usize].push(id);
            }
        }
    }

    struct Walk<'a> {
        lattice: &'a FilteredLattice,
        parents: Vec<Vec<u32>>,
        order: Vec<u32>,
        flags: Vec<bool>,
        live: Vec<bool>,
        out: Vec<StoppingRule>,
        max_rules: usize,
    }

    impl Walk<'_> {
        fn visit(&mut self, pos: usize) -> bool {
            if pos == self.order.len() {
                if self.out.len() >= self.max_rules {
                    return false;
                }
                self.out
                    .push(StoppingRule::from_flags(self.lattice, self.flags.clone()));
                return true;
            }
            let id = self.order[pos];
            let live = id == self.lattice.root()
                || self.parents[id as usize]
                    .iter()
                    .any(|&p| self.live[p as usize] && !self.flags[p as usize]);
            self.live[id as usize] = live;
            self.flags[id as usize] = false;
            if !self.visit(pos + 1) {
                return false;
            }
            if live {
                self.flags[id as usize] = true;
                let ok = self.visit(pos + 1);
                self.flags[id as usize] = false;
                if !ok {
                    return false;
                }
            }
            true
        }
    }

    let mut walk = Walk {
        lattice,
        parents,
        order,
        flags: vec![false; lattice.len()],
        live: vec![false; lattice.len()],
        out: Vec::new(),
        max_rules,
    };
    if walk.visit(0) {
        Ok(walk.out)
    } else {
        Err(OracleError::EnumerationCapExceeded {
            rules: max_rules + 1,
            cap: max_rules.saturating_mul(max_rules),
        })
    }
}

/// Exhaustive game value over all pairs of pure stopping rules.
pub fn enumerate_game_value(
    lattice: &FilteredLattice,
    kernel: Kernel,
) -> Result<GameBounds, OracleError> {
    enumerate_game_value_with_cap(lattice, kernel, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_game_value_with_cap(
    lattice: &FilteredLattice,
    kernel: Kernel,
    max_pairs: usize,
) -> Result<GameBounds, OracleError> {
    let max_rules = (max_pairs as f64).sqrt().floor() as usize;
    let rules =
        enumerate_rules(lattice, max_rules).map_err(|_| OracleError::EnumerationCapExceeded {
            rules: max_rules + 1,
            cap: max_pairs,
        })?;
    let count = rules.len();
    let mut table = vec![0.0; count * count];
    let mut mass = vec![0.0; lattice.len()];
    for (s, seller) in rules.iter().enumerate() {
        for (b, buyer) in rules.iter().enumerate() {
            table[s * count + b] = expected_payoff_into(lattice, seller, buyer, kernel, &mut mass);
        }
    }
    let inf_sup = (0..count)
        .map(|s| {
            table[s * count..(s + 1) * count]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    let sup_inf = (0..count)
        .map(|b| {
            (0..count)
                .map(|s| table[s * count + b])
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(GameBounds { inf_sup, sup_inf })
}

/// Value of the buyer-only (American) stopping problem on `lower`.
pub fn american_value(lattice: &FilteredLattice) -> f64 {
    let mut v = vec![0.0; lattice.len()];
    for k in (0..=lattice.horizon()).rev() {
        for &id in lattice.layer(k) {
            let node = lattice.node(id);
            let mut cont = 0.0;
            for t in lattice.transitions(id) {
                cont += t.prob * v[t.child as usize];
            }
            v[id as usize] = if lattice.is_terminal(id) {
                node.lower
            } else {
                node.lower.max(cont)
            };
        }
    }
    v[lattice.root() as usize]
}

/// Shape of the random lattices produced by [`random_lattice`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomLatticeSpec {
    pub max_depth: u32,
    pub max_branch: usize,
    /// Dyadic payoffs and probabilities, so every expectation is exact in `f64`.
    pub dyadic: bool,
    /// Probability that a child reuses an existing node of the next layer.
    pub merge_prob: f64,
}

impl Default for RandomLatticeSpec {
    fn default() -> Self {
        Self {
            max_depth: 3,
            max_branch: 3,
            dyadic: false,
            merge_prob: 0.25,
        }
    }
}

fn random_probs<R: Rng>(rng: &mut R, count: usize, dyadic: bool) -> Vec<f64> {
    if dyadic {
        let choices: &[&[f64]] = match count {
            1 => &[&[1.0]],
            2 => &[&[0.5, 0.5], &[0.25, 0.75], &[0.75, 0.25]],
            _ => &[&[0.25, 0.25, 0.5], &[0.5, 0.25, 0.25], &[0.125, 0.375, 0.5]],
        };
        let pick = choices[rng.gen_range(0..choices.len())];
        return pick[..count].to_vec();
    }
    let weights: Vec<f64> = (0..count).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let head: f64 = probs[..count - 1].iter().sum();
    probs[count - 1] = 1.0 - head;
    probs
}

fn random_payoffs<R: Rng>(rng: &mut R, dyadic: bool) -> (f64, f64) {
    if dyadic {
        let lower = rng.gen_range(0..16) as f64 / 8.0;
        let gap = rng.gen_range(0..8) as f64 / 8.0;
        (lower, lower + gap)
    } else {
        let lower = rng.gen_range(0.0..2.0);
        let gap = if rng.gen_bool(0.1) {
            0.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        (lower, lower + gap)
    }
}

/// Random layered lattice with uniform depth, random branching and occasional merges.
#[allow(clippy::needless_range_loop)]
pub fn random_lattice<R: Rng>(rng: &mut R, spec: &RandomLatticeSpec) -> FilteredLattice {
    let depth = rng.gen_range(0..=spec.max_depth);
    // children[k][i]: transitions of node i in layer k, as (index in layer k+1, prob)
    let mut layers: Vec<Vec<Vec<(usize, f64)>>> = Vec::new();
    let mut width = 1usize;
    for _ in 0..depth {
        let mut next_width = 0usize;
        let mut layer = Vec::with_capacity(width);
        for _ in 0..width {
            let branch = rng.gen_range(1..=spec.max_branch);
            let probs = random_probs(rng, branch, spec.dyadic);
            let mut used = Vec::with_capacity(branch);
            let mut edges = Vec::with_capacity(branch);
            for p in probs {
                let reuse = (0..next_width)
                    .filter(|c| !used.contains(c))
                    .collect::<Vec<_>>();
                let child = if !reuse.is_empty() && rng.gen_bool(spec.merge_prob) {
                    reuse[rng.gen_range(0..reuse.len())]
                } else {
                    next_width += 1;
                    next_width - 1
                };
                used.push(child);
                edges.push((child, p));
            }
            layer.push(edges);
        }
        layers.push(layer);
        width = next_width;
    }

    let mut builder = LatticeBuilder::new();
    let mut base = 0usize;
    let mut width = 1usize;
    for k in 0..=depth as usize {
        let next_base = base + width;
        for i in 0..width {
            let (lower, upper) = random_payoffs(rng, spec.dyadic);
            let edges: Vec<(u32, f64)> = if k < depth as usize {
                layers[k][i]
                    .iter()
                    .map(|&(c, p)| ((next_base + c) as u32, p))
                    .collect()
            } else {
                Vec::new()
            };
            builder.add_node(k as u32, lower, upper, edges);
        }
        if k < depth as usize {
            width = layers[k]
                .iter()
                .flatten()
                .map(|&(c, _)| c + 1)
                .max()
                .unwrap_or(0);
        }
        base = next_base;
    }
    builder.build(0).expect("random lattice is well formed")
}

// ---------------------------------------------------------------------------
// Monte Carlo
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            antithetic: false,
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.n_paths < MIN_PATHS {
            return Err(OracleError::InvalidConfig(format!(
                "n_paths = {} is below the minimum of {MIN_PATHS}",
                self.n_paths
            )));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(OracleError::InvalidConfig(format!(
                "antithetic sampling needs an even n_paths, got {}",
                self.n_paths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// Uniform source for one simulated path, optionally mirrored for antithetic pairs.
struct PathRng {
    rng: ChaCha8Rng,
    mirror: bool,
}

impl PathRng {
    fn new(seed: u64, stream: u64, mirror: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, mirror }
    }

    fn uniform(&mut self) -> f64 {
        let u: f64 = self.rng.gen();
        if self.mirror {
            1.0 - u
        } else {
            u
        }
    }
}

/// One step of the discrete model: the Rademacher move and the optional jump atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDraw {
    pub up: bool,
    pub jump: Option<usize>,
}

/// Samples the per-step law. Always consumes three uniforms per step.
struct StepSampler<'a> {
    step: &'a StepParams,
    cumulative: Vec<f64>,
    log_multipliers: Vec<f64>,
}

impl<'a> StepSampler<'a> {
    fn new(params: &MertonParams, step: &'a StepParams) -> Self {
        let mut acc = 0.0;
        let cumulative = params
            .jump_law
            .atoms()
            .iter()
            .map(|a| {
                acc += a.prob;
                acc
            })
            .collect();
        Self {
            step,
            cumulative,
            log_multipliers: params
                .jump_law
                .atoms()
                .iter()
                .map(|a| a.log_multiplier)
                .collect(),
        }
    }

    fn draw(&self, rng: &mut PathRng) -> StepDraw {
        let u_move = rng.uniform();
        let u_jump = rng.uniform();
        let u_atom = rng.uniform();
        let jump = (u_jump < self.step.jump_prob).then(|| {
            self.cumulative
                .iter()
                .position(|&c| u_atom < c)
                .unwrap_or(self.cumulative.len() - 1)
        });
        StepDraw {
            up: u_move < self.step.p_up,
            jump,
        }
    }

    fn log_increment(&self, d: StepDraw) -> f64 {
        let diffusion = if d.up { self.step.a } else { -self.step.a };
        diffusion + d.jump.map_or(0.0, |j| self.log_multipliers[j])
    }
}

/// Runs `per_path` over all paths (or antithetic pairs) and aggregates mean and
/// standard error of each of its `K` outputs.
///
/// Per-path results are collected in path order before summation, so the
/// estimates are identical for every worker count.
fn simulate_many<const K: usize, F>(
    cfg: &McConfig,
    per_path: F,
) -> Result<[McEstimate; K], OracleError>
where
    F: Fn(&mut PathRng) -> [f64; K] + Sync,
{
    cfg.validate()?;
    let units = if cfg.antithetic {
        cfg.n_paths / 2
    } else {
        cfg.n_paths
    };
    let samples: Vec<[f64; K]> = (0..units as u64)
        .into_par_iter()
        .map(|i| {
            if cfg.antithetic {
                let a = per_path(&mut PathRng::new(cfg.seed, i, false));
                let b = per_path(&mut PathRng::new(cfg.seed, i, true));
                std::array::from_fn(|j| 0.5 * (a[j] + b[j]))
            } else {
                per_path(&mut PathRng::new(cfg.seed, i, false))
            }
        })
        .collect();
    let count = units as f64;
    Ok(std::array::from_fn(|j| {
        let mean = compensated_sum(samples.iter().map(|s| s[j])) / count;
        let var =
            compensated_sum(samples.iter().map(|s| (s[j] - mean) * (s[j] - mean))) / (count - 1.0);
        McEstimate {
            estimate: mean,
            std_error: (var / count).sqrt(),
            n_paths: cfg.n_paths,
        }
    }))
}

fn simulate<F>(cfg: &McConfig, per_path: F) -> Result<McEstimate, OracleError>
where
    F: Fn(&mut PathRng) -> f64 + Sync,
{
    let [est] = simulate_many(cfg, |rng| [per_path(rng)])?;
    Ok(est)
}

/// Discounted price path `S_0 .. S_n` of the discrete model.
fn simulate_prices(
    params: &MertonParams,
    sampler: &StepSampler,
    rng: &mut PathRng,
    out: &mut Vec<f64>,
) {
    out.clear();
    let mut log = 0.0;
    out.push(params.s0);
    for _ in 0..sampler.step.n {
        log += sampler.log_increment(sampler.draw(rng));
        out.push(params.s0 * log.exp());
    }
}

/// Monte Carlo estimate of `E[S_T]` for the discrete model.
pub fn mc_terminal_mean(
    params: &MertonParams,
    step: &StepParams,
    cfg: &McConfig,
) -> Result<McEstimate, OracleError> {
    let sampler = StepSampler::new(params, step);
    simulate(cfg, |rng| {
        let mut log = 0.0;
        for _ in 0..step.n {
            log += sampler.log_increment(sampler.draw(rng));
        }
        params.s0 * log.exp()
    })
}

/// Monte Carlo statistics of whole price paths `S_0 .. S_n`.
pub(crate) fn mc_path_functionals<const K: usize>(
    params: &MertonParams,
    step: &StepParams,
    cfg: &McConfig,
    f: impl Fn(&[f64]) -> [f64; K] + Sync,
) -> Result<[McEstimate; K], OracleError> {
    let sampler = StepSampler::new(params, step);
    simulate_many(cfg, |rng| {
        let mut prices = Vec::with_capacity(step.n + 1);
        simulate_prices(params, &sampler, rng, &mut prices);
        f(&prices)
    })
}

/// A seller (cancellation) rule and a buyer (exercise) rule on the same lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RulePair {
    pub seller: StoppingRule,
    pub buyer: StoppingRule,
}

/// Monte Carlo value of playing `rules` in the discrete model.
///
/// The rules are looked up on `lattice` along the simulated branch sequence;
/// the payoffs come from the simulated prices, not from the lattice.
pub fn mc_price(
    params: &MertonParams,
    payoff: &PayoffSpec,
    lattice: &ModelLattice,
    rules: &RulePair,
    kernel: Kernel,
    cfg: &McConfig,
) -> Result<McEstimate, OracleError> {
    for rule in [&rules.seller, &rules.buyer] {
        if rule.len() != lattice.lattice.len() {
            return Err(OracleError::RuleMismatch {
                rules: rule.len(),
                nodes: lattice.lattice.len(),
            });
        }
    }
    let step = &lattice.step;
    let sampler = StepSampler::new(params, step);
    simulate(cfg, |rng| {
        let mut node = lattice.lattice.root();
        let mut stat = payoff.statistic_init();
        let mut log = 0.0;
        let mut price = params.s0;
        for k in 0..=step.n {
            let (lower, upper) = payoff.eval(k, stat, price, step.dt);
            let settled = kernel.settle(
                k == step.n,
                rules.seller.stops_at(node),
                rules.buyer.stops_at(node),
                lower,
                upper,
            );
            if let Some(pay) = settled {
                return pay;
            }
            let draw = sampler.draw(rng);
            stat = payoff.statistic_step(stat, k, price, step.dt);
            log += sampler.log_increment(draw);
            price = params.s0 * log.exp();
            node = lattice
                .child(node, draw.up, draw.jump)
                .expect("sampled branch has positive probability");
        }
        unreachable!("the horizon always settles")
    })
}

/// Outcome of one strategy evaluation in a [`SaddleReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleEntry {
    pub index: usize,
    pub estimate: f64,
    pub std_error: f64,
    /// The inequality being checked: `estimate <= bound` for buyer deviations,
    /// `estimate >= bound` for seller deviations, `|estimate - value| <= bound - value` for the optimum.
    pub bound: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleReport {
    pub value: f64,
    pub kernel: Kernel,
    pub n_paths: usize,
    pub seed: u64,
    pub optimal: SaddleEntry,
    pub buyer_deviations: Vec<SaddleEntry>,
    pub seller_deviations: Vec<SaddleEntry>,
    pub violations: usize,
}

impl SaddleReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Flips each node's flag with probability [`DEVIATION_FLIP_PROB`]; terminal stops are restored.
pub fn random_deviation<R: Rng>(
    lattice: &FilteredLattice,
    rule: &StoppingRule,
    rng: &mut R,
) -> StoppingRule {
    let flags = rule
        .flags()
        .iter()
        .map(|&f| {
            if rng.gen_bool(DEVIATION_FLIP_PROB) {
                !f
            } else {
                f
            }
        })
        .collect();
    StoppingRule::from_flags(lattice, flags)
}

/// Checks the extracted strategies against random unilateral deviations.
///
/// Buyer deviations must not beat the value by more than three standard errors,
/// seller deviations must not undercut it by more than three standard errors.
pub fn saddle_check(
    params: &MertonParams,
    payoff: &PayoffSpec,
    lattice: &ModelLattice,
    result: &DPResult,
    kernel: Kernel,
    cfg: &McConfig,
    n_deviations: usize,
) -> Result<SaddleReport, OracleError> {
    let value = result.value();
    let optimal = extract_strategies(&lattice.lattice, result);
    let optimal = RulePair {
        seller: optimal.seller,
        buyer: optimal.buyer,
    };
    let mut dev_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dev_rng.set_stream(DEVIATION_STREAM);

    let est = mc_price(params, payoff, lattice, &optimal, kernel, cfg)?;
    let optimal_entry = SaddleEntry {
        index: 0,
        estimate: est.estimate,
        std_error: est.std_error,
        bound: value + 3.0 * est.std_error,
        ok: (est.estimate - value).abs() <= 3.0 * est.std_error,
    };

    let mut buyer_deviations = Vec::with_capacity(n_deviations);
    for i in 0..n_deviations {
        let rules = RulePair {
            seller: optimal.seller.clone(),
            buyer: random_deviation(&lattice.lattice, &optimal.buyer, &mut dev_rng),
        };
        let est = mc_price(params, payoff, lattice, &rules, kernel, cfg)?;
        let bound = value + 3.0 * est.std_error;
        buyer_deviations.push(SaddleEntry {
            index: i,
            estimate: est.estimate,
            std_error: est.std_error,
            bound,
            ok: est.estimate <= bound,
        });
    }
    let mut seller_deviations = Vec::with_capacity(n_deviations);
    for i in 0..n_deviations {
        let rules = RulePair {
            seller: random_deviation(&lattice.lattice, &optimal.seller, &mut dev_rng),
            buyer: optimal.buyer.clone(),
        };
        let est = mc_price(params, payoff, lattice, &rules, kernel, cfg)?;
        let bound = value - 3.0 * est.std_error;
        seller_deviations.push(SaddleEntry {
            index: i,
            estimate: est.estimate,
            std_error: est.std_error,
            bound,
            ok: est.estimate >= bound,
        });
    }
    let violations = buyer_deviations
        .iter()
        .chain(&seller_deviations)
        .filter(|e| !e.ok)
        .count()
        + usize::from(!optimal_entry.ok);
    Ok(SaddleReport {
        value,
        kernel,
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        optimal: optimal_entry,
        buyer_deviations,
        seller_deviations,
        violations,
    })
}
