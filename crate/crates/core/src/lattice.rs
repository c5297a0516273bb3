//! Lattices for the n-step jump-diffusion model with payoff-aware state reduction.
//!
//! Each step composes an independent Rademacher move `±a` with an optional jump
//! drawn from the [`JumpLaw`], so every non-terminal node has up to
//! `2 * (1 + atoms)` children. Two engines enumerate reachable states forward
//! and merge equal states within a layer:
//!
//! * [`build_exact`] keys states exactly (net displacement, per-atom jump counts,
//!   and an exact representation of the path statistic). Small `n` only.
//! * [`build_quantized`] keys states by integer indices on a log grid of step
//!   `h = a / q`; jump sizes snap to that grid, the running statistic is rounded
//!   up to it, and the total jump count is capped at `j_max`.
//!
//! Layers are expanded in canonical key order, so node ids and values are the
//! same for every run and worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynkin::{FilteredLattice, LatticeBuilder, LatticeError};
use crate::model::{step_params, JumpLaw, MertonParams, ModelError, StepParams};
use crate::payoff::{PathStatistic, PayoffKind, PayoffSpec};

pub const DEFAULT_EXACT_MAX_STEPS: usize = 14;
pub const DEFAULT_EXACT_MAX_STATES: usize = 4_000_000;
pub const DEFAULT_QUANT_MAX_STATES: usize = 60_000_000;
pub const DEFAULT_Q: u32 = 4;
pub const DEFAULT_EPS_TAIL: f64 = 1e-9;

/// Relative slack used when rounding a log-level up to the grid, so values that
/// are grid points up to floating error stay on that point.
const ROUND_UP_SLACK: f64 = 1e-9;

const FLOOR: i32 = i32::MIN;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("payoff rate r = {payoff} differs from model rate r = {model}")]
    RateMismatch { payoff: f64, model: f64 },
    #[error("exact engine capped at n = {cap}, requested n = {n}")]
    ExactStepCap { n: usize, cap: usize },
    #[error("exact engine needs more than {budget} states (reached {states} at layer {layer})")]
    ExactCapExceeded {
        states: usize,
        budget: usize,
        layer: usize,
    },
    #[error("quantized grid needs more than {budget} states (reached {states} at layer {layer})")]
    GridOverflow {
        states: usize,
        budget: usize,
        layer: usize,
    },
    #[error("invalid quantization grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// One branch of the per-step product law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub up: bool,
    /// Index of the jump atom, or `None` when no jump occurs.
    pub jump: Option<usize>,
    pub prob: f64,
}

/// Nonzero branches in canonical order: no-jump moves first, then each atom.
pub fn branches(step: &StepParams, law: &JumpLaw) -> Vec<Branch> {
    let moves = [(true, step.p_up), (false, 1.0 - step.p_up)];
    let mut out = Vec::with_capacity(2 * (1 + law.len()));
    for (up, p) in moves {
        out.push(Branch {
            up,
            jump: None,
            prob: p * (1.0 - step.jump_prob),
        });
    }
    for (j, atom) in law.atoms().iter().enumerate() {
        for (up, p) in moves {
            out.push(Branch {
                up,
                jump: Some(j),
                prob: p * step.jump_prob * atom.prob,
            });
        }
    }
    out.retain(|b| b.prob > 0.0);
    out
}

/// Branches used once the jump count has reached the truncation cap.
fn capped_branches(step: &StepParams) -> Vec<Branch> {
    [(true, step.p_up), (false, 1.0 - step.p_up)]
        .into_iter()
        .map(|(up, prob)| Branch {
            up,
            jump: None,
            prob,
        })
        .filter(|b| b.prob > 0.0)
        .collect()
}

/// `P(N > c)` for `N ~ Binomial(n, p)`, for every `c` in `0..=n`.
pub fn binomial_tails(n: usize, p: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; n + 1];
    if p <= 0.0 {
        pmf[0] = 1.0;
    } else if p >= 1.0 {
        pmf[n] = 1.0;
    } else {
        let ratio = p / (1.0 - p);
        pmf[0] = (n as f64 * (-p).ln_1p()).exp();
        for j in 0..n {
            pmf[j + 1] = pmf[j] * (n - j) as f64 / (j + 1) as f64 * ratio;
        }
    }
    let mut tails = vec![0.0; n + 1];
    let mut acc = 0.0;
    for c in (0..n).rev() {
        acc += pmf[c + 1];
        tails[c] = acc;
    }
    tails
}

/// Grid for the quantized engine.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrid {
    pub q: u32,
    /// Diffusion log-step, `sigma * sqrt(T / n)`.
    pub a: f64,
    /// Grid step, `a / q`.
    pub h: f64,
    /// Jump log-sizes in grid units, rounded to nearest.
    pub jump_offsets: Vec<i32>,
    /// `|y_j - offset_j * h|`, at most `h / 2`.
    pub jump_residuals: Vec<f64>,
    /// Maximum number of jumps tracked along a path.
    pub j_max: usize,
    /// `P(total jumps > j_max)`; this mass is redirected to the no-jump branches.
    pub tail_mass: f64,
    pub eps_tail: f64,
}

impl QuantGrid {
    pub fn new(
        step: &StepParams,
        law: &JumpLaw,
        q: u32,
        eps_tail: f64,
    ) -> Result<Self, BuildError> {
        if !(0.0..1.0).contains(&eps_tail) {
            return Err(BuildError::InvalidGrid(format!(
                "eps_tail = {eps_tail} must lie in [0, 1)"
            )));
        }
        let tails = binomial_tails(step.n, step.jump_prob);
        let j_max = (0..=step.n)
            .find(|&c| tails[c] <= eps_tail)
            .unwrap_or(step.n);
        Self::with_jump_cap(step, law, q, j_max, eps_tail)
    }

    /// Grid with an explicit jump-count cap.
    pub fn with_jump_cap(
        step: &StepParams,
        law: &JumpLaw,
        q: u32,
        j_max: usize,
        eps_tail: f64,
    ) -> Result<Self, BuildError> {
        if q == 0 {
            return Err(BuildError::InvalidGrid("q must be at least 1".into()));
        }
        let j_max = j_max.min(step.n);
        let h = step.a / q as f64;
        let mut jump_offsets = Vec::with_capacity(law.len());
        let mut jump_residuals = Vec::with_capacity(law.len());
        for atom in law.atoms() {
            let units = (atom.log_multiplier / h).round();
            if units.abs() > (i32::MAX / 4) as f64 {
                return Err(BuildError::InvalidGrid(format!(
                    "jump {} is too large for grid step {h}",
                    atom.log_multiplier
                )));
            }
            jump_offsets.push(units as i32);
            jump_residuals.push((atom.log_multiplier - units * h).abs());
        }
        Ok(Self {
            q,
            a: step.a,
            h,
            jump_offsets,
            jump_residuals,
            j_max,
            tail_mass: binomial_tails(step.n, step.jump_prob)[j_max],
            eps_tail,
        })
    }

    pub fn max_jump_residual(&self) -> f64 {
        self.jump_residuals.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest grid index whose level is at least `log_level`.
    fn round_up(&self, log_level: f64) -> i32 {
        let x = log_level / self.h;
        (x - ROUND_UP_SLACK * x.abs().max(1.0)).ceil() as i32
    }
}

/// Which engine built a lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Exact,
    Quantized,
}

impl EngineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EngineKind::Exact => "exact",
            EngineKind::Quantized => "quantized",
        }
    }
}

/// Engine selection for a requested step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnginePolicy {
    /// Exact for `n <= 14`, quantized with `q = 4` and `eps_tail = 1e-9` above.
    #[default]
    Auto,
    Exact,
    Quantized {
        #[serde(default = "default_q")]
        q: u32,
        #[serde(default = "default_eps_tail")]
        eps_tail: f64,
    },
}

fn default_q() -> u32 {
    DEFAULT_Q
}

fn default_eps_tail() -> f64 {
    DEFAULT_EPS_TAIL
}

impl EnginePolicy {
    pub fn resolve(&self, n: usize) -> EnginePolicy {
        match *self {
            EnginePolicy::Auto if n <= DEFAULT_EXACT_MAX_STEPS => EnginePolicy::Exact,
            EnginePolicy::Auto => EnginePolicy::Quantized {
                q: DEFAULT_Q,
                eps_tail: DEFAULT_EPS_TAIL,
            },
            other => other,
        }
    }
}

/// Summary of a constructed lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeMeta {
    pub engine: EngineKind,
    pub n: usize,
    pub states: usize,
    pub transitions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantMeta {
    pub q: u32,
    pub h: f64,
    pub j_max: usize,
    pub tail_mass: f64,
    pub eps_tail: f64,
    pub max_jump_residual: f64,
}

/// Model-level state of a lattice node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState {
    /// Discounted price at the node.
    pub price: f64,
    /// Scalar view of the path statistic (`NaN` for put/call payoffs).
    pub statistic: f64,
    /// Jumps along the path so far, as tracked by the engine (0 when untracked).
    pub jumps: u16,
    /// Jump branches are folded into the no-jump moves at this node.
    pub capped: bool,
}

/// A [`FilteredLattice`] together with the model state behind each node.
#[derive(Debug, Clone)]
pub struct ModelLattice {
    pub lattice: FilteredLattice,
    pub states: Vec<NodeState>,
    pub step: StepParams,
    pub meta: LatticeMeta,
    branches: Vec<Branch>,
    capped: Vec<Branch>,
}

impl ModelLattice {
    /// Full branch list; uncapped nodes store one transition per branch in this order.
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Child reached from `node` by the move `up` and jump `jump`.
    ///
    /// At capped nodes a jump is ignored. Returns `None` at terminal nodes or
    /// for a branch of probability zero.
    pub fn child(&self, node: u32, up: bool, jump: Option<usize>) -> Option<u32> {
        let edges = self.lattice.transitions(node);
        if edges.is_empty() {
            return None;
        }
        let (list, jump) = if self.states[node as usize].capped {
            (&self.capped, None)
        } else {
            (&self.branches, jump)
        };
        list.iter()
            .position(|b| b.up == up && b.jump == jump)
            .map(|slot| edges[slot].child)
    }
}

/// State space explored forward by [`build_layered`].
trait StateSpace: Sync {
    type Key: Ord + Clone + Send + Sync;

    fn root(&self) -> Self::Key;

    /// Children of `key` at layer `k` with their probabilities, in branch order.
    fn expand(&self, k: usize, key: &Self::Key, out: &mut Vec<(Self::Key, f64)>);

    fn state(&self, k: usize, key: &Self::Key) -> (f64, PathStatistic, u16, bool);
}

struct Budget {
    max_states: usize,
    overflow: fn(usize, usize, usize) -> BuildError,
}

fn build_layered<S: StateSpace>(
    space: &S,
    payoff: &PayoffSpec,
    step: &StepParams,
    budget: Budget,
) -> Result<(FilteredLattice, Vec<NodeState>), BuildError> {
    let n = step.n;
    let mut builder = LatticeBuilder::new();
    let mut states = Vec::new();
    let mut layer = vec![space.root()];
    let mut next_base = 1usize;

    let describe = |k: usize, key: &S::Key| {
        let (price, stat, jumps, capped) = space.state(k, key);
        let (lower, upper) = payoff.eval(k, stat, price, step.dt);
        let node = NodeState {
            price,
            statistic: stat.value().unwrap_or(f64::NAN),
            jumps,
            capped,
        };
        (lower, upper, node)
    };

    for k in 0..=n {
        if k == n {
            let described: Vec<_> = layer.par_iter().map(|key| describe(k, key)).collect();
            for (lower, upper, node) in described {
                builder.add_node(k as u32, lower, upper, []);
                states.push(node);
            }
            break;
        }

        let expanded: Vec<Vec<(S::Key, f64)>> = layer
            .par_iter()
            .map(|key| {
                let mut out = Vec::new();
                space.expand(k, key, &mut out);
                out
            })
            .collect();
        let mut next: Vec<S::Key> = expanded
            .iter()
            .flat_map(|children| children.iter().map(|(key, _)| key.clone()))
            .collect();
        next.par_sort_unstable();
        next.dedup();

        let total = next_base + next.len();
        if total > budget.max_states {
            return Err((budget.overflow)(total, budget.max_states, k + 1));
        }

        let rows: Vec<_> = layer
            .par_iter()
            .zip(expanded.par_iter())
            .map(|(key, children)| {
                let edges: Vec<(u32, f64)> = children
                    .iter()
                    .map(|(child, p)| {
                        let pos = next.binary_search(child).expect("child key enumerated");
                        ((next_base + pos) as u32, *p)
                    })
                    .collect();
                (describe(k, key), edges)
            })
            .collect();
        for ((lower, upper, node), edges) in rows {
            builder.add_node(k as u32, lower, upper, edges);
            states.push(node);
        }

        next_base = total;
        layer = next;
    }

    Ok((builder.build(0)?, states))
}

fn validated_step(
    params: &MertonParams,
    payoff: &PayoffSpec,
    n: usize,
) -> Result<StepParams, BuildError> {
    if payoff.r() != params.r {
        return Err(BuildError::RateMismatch {
            payoff: payoff.r(),
            model: params.r,
        });
    }
    Ok(step_params(params, n)?)
}

// ---------------------------------------------------------------------------
// Exact engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum ExactStat {
    None,
    /// Running maximum below or at the floor `M`.
    Floor,
    /// Running maximum attained by the prefix term with this displacement,
    /// jump counts and accrual steps (accrual is 0 when `r = 0`).
    Max {
        disp: i32,
        counts: Box<[u16]>,
        accrual: u32,
    },
    /// Bits of the running integral (positive, so bit order is numeric order).
    Integral(u64),
}

/// Exact lattice state: `(net displacement, per-atom jump counts, statistic)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExactKey {
    disp: i32,
    counts: Box<[u16]>,
    stat: ExactStat,
}

struct ExactSpace<'a> {
    params: &'a MertonParams,
    payoff: &'a PayoffSpec,
    step: StepParams,
    branches: Vec<Branch>,
    log_floor: f64,
}

impl ExactSpace<'_> {
    fn log_price(&self, disp: i32, counts: &[u16]) -> f64 {
        let mut x = disp as f64 * self.step.a;
        for (c, atom) in counts.iter().zip(self.params.jump_law.atoms()) {
            x += *c as f64 * atom.log_multiplier;
        }
        x
    }

    fn accrual_log(&self, steps: u32) -> f64 {
        self.payoff.r() * steps as f64 * self.step.dt
    }

    fn max_log(&self, stat: &ExactStat) -> f64 {
        match stat {
            ExactStat::Floor => self.log_floor,
            ExactStat::Max {
                disp,
                counts,
                accrual,
            } => self.log_price(*disp, counts) + self.accrual_log(*accrual),
            _ => unreachable!("not a running-max statistic"),
        }
    }

    fn fold(&self, k: usize, key: &ExactKey) -> ExactStat {
        match &key.stat {
            ExactStat::None => ExactStat::None,
            ExactStat::Integral(bits) => {
                let price = self.params.s0 * self.log_price(key.disp, &key.counts).exp();
                let next = self.payoff.statistic_step(
                    PathStatistic::Integral(f64::from_bits(*bits)),
                    k,
                    price,
                    self.step.dt,
                );
                ExactStat::Integral(next.value().expect("integral").to_bits())
            }
            current => {
                let accrual = if self.payoff.r() == 0.0 {
                    0
                } else {
                    k as u32 + 1
                };
                let candidate = self.log_price(key.disp, &key.counts) + self.accrual_log(accrual);
                if candidate > self.max_log(current) {
                    ExactStat::Max {
                        disp: key.disp,
                        counts: key.counts.clone(),
                        accrual,
                    }
                } else {
                    current.clone()
                }
            }
        }
    }
}

impl StateSpace for ExactSpace<'_> {
    type Key = ExactKey;

    fn root(&self) -> ExactKey {
        let stat = match self.payoff.kind() {
            PayoffKind::Russian { .. } => ExactStat::Floor,
            PayoffKind::Asian { .. } => ExactStat::Integral(0f64.to_bits()),
            PayoffKind::GamePut { .. } | PayoffKind::GameCall { .. } => ExactStat::None,
        };
        ExactKey {
            disp: 0,
            counts: vec![0; self.params.jump_law.len()].into(),
            stat,
        }
    }

    fn expand(&self, k: usize, key: &ExactKey, out: &mut Vec<(ExactKey, f64)>) {
        let stat = self.fold(k, key);
        for b in &self.branches {
            let mut counts = key.counts.clone();
            if let Some(j) = b.jump {
                counts[j] += 1;
            }
            out.push((
                ExactKey {
                    disp: key.disp + if b.up { 1 } else { -1 },
                    counts,
                    stat: stat.clone(),
                },
                b.prob,
            ));
        }
    }

    fn state(&self, _k: usize, key: &ExactKey) -> (f64, PathStatistic, u16, bool) {
        let price = self.params.s0 * self.log_price(key.disp, &key.counts).exp();
        let stat = match &key.stat {
            ExactStat::None => PathStatistic::Empty,
            ExactStat::Integral(bits) => PathStatistic::Integral(f64::from_bits(*bits)),
            ExactStat::Floor => match self.payoff.kind() {
                PayoffKind::Russian { floor, .. } => PathStatistic::AccruedMax(floor),
                _ => unreachable!(),
            },
            max => PathStatistic::AccruedMax(self.params.s0 * self.max_log(max).exp()),
        };
        let jumps = key.counts.iter().sum();
        (price, stat, jumps, false)
    }
}

/// Limits for the exact engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactLimits {
    pub max_steps: usize,
    pub max_states: usize,
}

impl Default for ExactLimits {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_EXACT_MAX_STEPS,
            max_states: DEFAULT_EXACT_MAX_STATES,
        }
    }
}

pub fn build_exact(
    params: &MertonParams,
    payoff: &PayoffSpec,
    n: usize,
) -> Result<ModelLattice, BuildError> {
    build_exact_with(params, payoff, n, ExactLimits::default())
}

pub fn build_exact_with(
    params: &MertonParams,
    payoff: &PayoffSpec,
    n: usize,
    limits: ExactLimits,
) -> Result<ModelLattice, BuildError> {
    let step = validated_step(params, payoff, n)?;
    if n > limits.max_steps {
        return Err(BuildError::ExactStepCap {
            n,
            cap: limits.max_steps,
        });
    }
    let log_floor = match payoff.kind() {
        PayoffKind::Russian { floor, .. } => (floor / params.s0).ln(),
        _ => f64::NAN,
    };
    let space = ExactSpace {
        params,
        payoff,
        step,
        branches: branches(&step, &params.jump_law),
        log_floor,
    };
    let (lattice, states) = build_layered(
        &space,
        payoff,
        &step,
        Budget {
            max_states: limits.max_states,
            overflow: |states, budget, layer| BuildError::ExactCapExceeded {
                states,
                budget,
                layer,
            },
        },
    )?;
    Ok(ModelLattice {
        meta: LatticeMeta {
            engine: EngineKind::Exact,
            n,
            states: lattice.len(),
            transitions: lattice.transition_count(),
            quantization: None,
        },
        lattice,
        states,
        step,
        branches: space.branches,
        capped: capped_branches(&step),
    })
}

// ---------------------------------------------------------------------------
// Quantized engine
// ---------------------------------------------------------------------------

/// Quantized state: price index, statistic index (or floor/none) and tracked jump count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuantKey {
    price: i32,
    stat: i32,
    jumps: u16,
}

#[derive(Clone, Copy)]
enum QuantStat {
    None,
    Max { log_floor: f64, floor: f64 },
    Average,
}

struct QuantSpace<'a> {
    params: &'a MertonParams,
    payoff: &'a PayoffSpec,
    step: StepParams,
    grid: &'a QuantGrid,
    stat: QuantStat,
    branches: Vec<Branch>,
    capped: Vec<Branch>,
    track_jumps: bool,
    /// `round_up(r * j * dt)` for `j` in `0..=n`.
    accrual_units: Vec<i32>,
}

impl QuantSpace<'_> {
    fn level(&self, index: i32) -> f64 {
        self.params.s0 * (index as f64 * self.grid.h).exp()
    }

    fn fold(&self, k: usize, key: &QuantKey) -> i32 {
        match self.stat {
            QuantStat::None => FLOOR,
            QuantStat::Max { log_floor, .. } => {
                let candidate = key.price + self.accrual_units[k + 1];
                let next = key.stat.max(candidate);
                if next != FLOOR && next as f64 * self.grid.h <= log_floor {
                    FLOOR
                } else {
                    next
                }
            }
            QuantStat::Average => {
                let kf = k as f64;
                let previous = if k == 0 { 0.0 } else { self.level(key.stat) };
                let accrued = (self.payoff.r() * kf * self.step.dt).exp() * self.level(key.price);
                let average = (kf * previous + accrued) / (kf + 1.0);
                self.grid.round_up((average / self.params.s0).ln())
            }
        }
    }
}

impl StateSpace for QuantSpace<'_> {
    type Key = QuantKey;

    fn root(&self) -> QuantKey {
        QuantKey {
            price: 0,
            stat: FLOOR,
            jumps: 0,
        }
    }

    fn expand(&self, k: usize, key: &QuantKey, out: &mut Vec<(QuantKey, f64)>) {
        let stat = self.fold(k, key);
        let capped = self.track_jumps && key.jumps as usize >= self.grid.j_max;
        let list = if capped { &self.capped } else { &self.branches };
        let q = self.grid.q as i32;
        for b in list {
            let mut price = key.price + if b.up { q } else { -q };
            let mut jumps = key.jumps;
            if let Some(j) = b.jump {
                price += self.grid.jump_offsets[j];
                if self.track_jumps {
                    jumps += 1;
                }
            }
            out.push((QuantKey { price, stat, jumps }, b.prob));
        }
    }

    fn state(&self, k: usize, key: &QuantKey) -> (f64, PathStatistic, u16, bool) {
        let price = self.level(key.price);
        let stat = match self.stat {
            QuantStat::None => PathStatistic::Empty,
            QuantStat::Max { floor, .. } => {
                if key.stat == FLOOR {
                    PathStatistic::AccruedMax(floor)
                } else {
                    PathStatistic::AccruedMax(floor.max(self.level(key.stat)))
                }
            }
            QuantStat::Average => {
                if k == 0 {
                    PathStatistic::Integral(0.0)
                } else {
                    PathStatistic::Integral(self.level(key.stat) * k as f64 * self.step.dt)
                }
            }
        };
        let capped = self.track_jumps && key.jumps as usize >= self.grid.j_max;
        (price, stat, key.jumps, capped)
    }
}

pub fn build_quantized(
    params: &MertonParams,
    payoff: &PayoffSpec,
    n: usize,
    grid: &QuantGrid,
) -> Result<ModelLattice, BuildError> {
    build_quantized_with(params, payoff, n, grid, DEFAULT_QUANT_MAX_STATES)
}

pub fn build_quantized_with(
    params: &MertonParams,
    payoff: &PayoffSpec,
    n: usize,
    grid: &QuantGrid,
    max_states: usize,
) -> Result<ModelLattice, BuildError> {
    let step = validated_step(params, payoff, n)?;
    if grid.a != step.a || grid.jump_offsets.len() != params.jump_law.len() {
        return Err(BuildError::InvalidGrid(
            "grid was built for different step parameters".into(),
        ));
    }
    if n as i64
        * (grid.q as i64
            + grid
                .jump_offsets
                .iter()
                .map(|o| o.abs() as i64)
                .max()
                .unwrap_or(0))
        >= (i32::MAX / 2) as i64
    {
        return Err(BuildError::InvalidGrid(
            "price indices would overflow".into(),
        ));
    }
    let stat = match payoff.kind() {
        PayoffKind::Russian { floor, .. } => QuantStat::Max {
            log_floor: (floor / params.s0).ln(),
            floor,
        },
        PayoffKind::Asian { .. } => QuantStat::Average,
        PayoffKind::GamePut { .. } | PayoffKind::GameCall { .. } => QuantStat::None,
    };
    let track_jumps = step.jump_prob > 0.0 && grid.j_max < n;
    let accrual_units = (0..=n)
        .map(|j| grid.round_up(payoff.r() * j as f64 * step.dt))
        .collect();
    let space = QuantSpace {
        params,
        payoff,
        step,
        grid,
        stat,
        branches: branches(&step, &params.jump_law),
        capped: capped_branches(&step),
        track_jumps,
        accrual_units,
    };
    let (lattice, states) = build_layered(
        &space,
        payoff,
        &step,
        Budget {
            max_states,
            overflow: |states, budget, layer| BuildError::GridOverflow {
                states,
                budget,
                layer,
            },
        },
    )?;
    Ok(ModelLattice {
        meta: LatticeMeta {
            engine: EngineKind::Quantized,
            n,
            states: lattice.len(),
            transitions: lattice.transition_count(),
            quantization: Some(QuantMeta {
                q: grid.q,
                h: grid.h,
                j_max: grid.j_max,
                tail_mass: grid.tail_mass,
                eps_tail: grid.eps_tail,
                max_jump_residual: grid.max_jump_residual(),
            }),
        },
        lattice,
        states,
        step,
        branches: space.branches,
        capped: space.capped,
    })
}

/// Builds a lattice with the engine selected by `policy`.
pub fn build(
    params: &MertonParams,
    payoff: &PayoffSpec,
    n: usize,
    policy: &EnginePolicy,
) -> Result<ModelLattice, BuildError> {
    match policy.resolve(n) {
        EnginePolicy::Exact => build_exact(params, payoff, n),
        EnginePolicy::Quantized { q, eps_tail } => {
            let step = validated_step(params, payoff, n)?;
            let grid = QuantGrid::new(&step, &params.jump_law, q, eps_tail)?;
            build_quantized(params, payoff, n, &grid)
        }
        EnginePolicy::Auto => unreachable!("resolved above"),
    }
}
