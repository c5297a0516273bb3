//! Backward induction for Dynkin games on finite filtered state graphs.
//!
//! A [`FilteredLattice`] is a DAG layered by time index. Every node is an atom
//! of the filtration and carries the buyer's exercise value `lower` and the
//! seller's cancellation value `upper`, with `0 <= lower <= upper`. The game
//! value obeys
//!
//! ```text
//! J = lower                                  at the horizon
//! J = min(upper, max(lower, E[J(child)]))    before it
//! ```
//!
//! which is the median of `(lower, upper, continuation)` because `lower <= upper`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a node's transition probabilities.
pub const TRANSITION_SUM_TOL: f64 = 1e-12;

/// Layers smaller than this are solved on the calling thread.
const PAR_LAYER_MIN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatticeError {
    #[error("malformed lattice at node {node}: {reason}")]
    Malformed { node: u64, reason: String },
    #[error("lattice has no nodes")]
    Empty,
    #[error("lattice has {nodes} nodes, above the dump limit of {limit}")]
    DumpTooLarge { nodes: usize, limit: usize },
}

fn malformed(node: impl Into<u64>, reason: impl Into<String>) -> LatticeError {
    LatticeError::Malformed {
        node: node.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeData {
    pub time: u32,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub child: u32,
    pub prob: f64,
}

/// Neumaier-compensated sum, evaluated in iteration order.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Accumulates nodes before validation. Children may be referenced before they are added.
#[derive(Debug, Default)]
pub struct LatticeBuilder {
    nodes: Vec<NodeData>,
    offsets: Vec<usize>,
    transitions: Vec<Transition>,
}

impl LatticeBuilder {
    pub fn new() -> Self {
        Self::with_capacity(0, 0)
    }

    pub fn with_capacity(nodes: usize, transitions: usize) -> Self {
        let mut offsets = Vec::with_capacity(nodes + 1);
        offsets.push(0);
        Self {
            nodes: Vec::with_capacity(nodes),
            offsets,
            transitions: Vec::with_capacity(transitions),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add_node(
        &mut self,
        time: u32,
        lower: f64,
        upper: f64,
        transitions: impl IntoIterator<Item = (u32, f64)>,
    ) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(NodeData { time, lower, upper });
        self.transitions.extend(
            transitions
                .into_iter()
                .map(|(child, prob)| Transition { child, prob }),
        );
        self.offsets.push(self.transitions.len());
        id
    }

    pub fn build(self, root: u32) -> Result<FilteredLattice, LatticeError> {
        FilteredLattice::from_parts(self.nodes, self.offsets, self.transitions, root)
    }
}

/// Finite filtered state graph with lower/upper payoffs per node.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredLattice {
    nodes: Vec<NodeData>,
    offsets: Vec<usize>,
    transitions: Vec<Transition>,
    root: u32,
    horizon: u32,
    /// Node ids grouped by time index, ascending; stable in id within a layer.
    by_time: Vec<u32>,
    layer_start: Vec<usize>,
}

impl FilteredLattice {
    fn from_parts(
        nodes: Vec<NodeData>,
        offsets: Vec<usize>,
        transitions: Vec<Transition>,
        root: u32,
    ) -> Result<Self, LatticeError> {
        if nodes.is_empty() {
            return Err(LatticeError::Empty);
        }
        let count = nodes.len();
        if root as usize >= count {
            return Err(malformed(root, "root id out of range"));
        }
        if nodes[root as usize].time != 0 {
            return Err(malformed(root, "root must have time index 0"));
        }
        let horizon = nodes.iter().map(|n| n.time).max().unwrap_or(0);
        for (id, node) in nodes.iter().enumerate() {
            let id = id as u64;
            if !(node.lower.is_finite() && node.upper.is_finite()) {
                return Err(malformed(id, "payoffs must be finite"));
            }
            if node.lower < 0.0 {
                return Err(malformed(
                    id,
                    format!("lower payoff {} is negative", node.lower),
                ));
            }
            if node.lower > node.upper {
                return Err(malformed(
                    id,
                    format!(
                        "lower payoff {} exceeds upper payoff {}",
                        node.lower, node.upper
                    ),
                ));
            }
            let out = &transitions[offsets[id as usize]..offsets[id as usize + 1]];
            if node.time == horizon {
                if !out.is_empty() {
                    return Err(malformed(id, "terminal node has transitions"));
                }
                continue;
            }
            if out.is_empty() {
                return Err(malformed(
                    id,
                    format!(
                        "node at time {} before horizon {horizon} has no transitions",
                        node.time
                    ),
                ));
            }
            for t in out {
                if t.child as usize >= count {
                    return Err(malformed(id, format!("child {} out of range", t.child)));
                }
                if !(t.prob > 0.0 && t.prob.is_finite()) {
                    return Err(malformed(
                        id,
                        format!("transition to {} has probability {}", t.child, t.prob),
                    ));
                }
                let child_time = nodes[t.child as usize].time;
                if child_time != node.time + 1 {
                    return Err(malformed(
                        id,
                        format!(
                            "child {} has time {child_time}, expected {}",
                            t.child,
                            node.time + 1
                        ),
                    ));
                }
            }
            let total = compensated_sum(out.iter().map(|t| t.prob));
            if (total - 1.0).abs() > TRANSITION_SUM_TOL {
                return Err(malformed(
                    id,
                    format!("transition probabilities sum to {total}"),
                ));
            }
        }

        let layers = horizon as usize + 1;
        let mut layer_start = vec![0usize; layers + 1];
        for node in &nodes {
            layer_start[node.time as usize + 1] += 1;
        }
        for k in 0..layers {
            layer_start[k + 1] += layer_start[k];
        }
        let mut fill = layer_start.clone();
        let mut by_time = vec![0u32; count];
        for (id, node) in nodes.iter().enumerate() {
            let slot = &mut fill[node.time as usize];
            by_time[*slot] = id as u32;
            *slot += 1;
        }

        Ok(Self {
            nodes,
            offsets,
            transitions,
            root,
            horizon,
            by_time,
            layer_start,
        })
    }

    pub fn root(&self) -> u32 {
        self.root
    }

    /// Largest time index; terminal nodes live here.
    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: u32) -> &NodeData {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[NodeData] {
        &self.nodes
    }

    pub fn transitions(&self, id: u32) -> &[Transition] {
        &self.transitions[self.offsets[id as usize]..self.offsets[id as usize + 1]]
    }

    pub fn transition_count(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_terminal(&self, id: u32) -> bool {
        self.nodes[id as usize].time == self.horizon
    }

    /// Node ids with time index `k`.
    pub fn layer(&self, k: u32) -> &[u32] {
        let k = k as usize;
        &self.by_time[self.layer_start[k]..self.layer_start[k + 1]]
    }

    /// Copy of the lattice with replaced payoffs; `f` receives each node id and data.
    pub fn with_payoffs(
        &self,
        mut f: impl FnMut(u32, &NodeData) -> (f64, f64),
    ) -> Result<Self, LatticeError> {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| {
                let (lower, upper) = f(id as u32, n);
                NodeData {
                    time: n.time,
                    lower,
                    upper,
                }
            })
            .collect();
        Self::from_parts(
            nodes,
            self.offsets.clone(),
            self.transitions.clone(),
            self.root,
        )
    }

    /// Forward probability of reaching each node from the root.
    pub fn reach_probabilities(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.nodes.len()];
        mass[self.root as usize] = 1.0;
        for k in 0..self.horizon {
            for &id in self.layer(k) {
                let m = mass[id as usize];
                if m == 0.0 {
                    continue;
                }
                for t in self.transitions(id) {
                    mass[t.child as usize] += m * t.prob;
                }
            }
        }
        mass
    }

    /// Total reach probability per time layer.
    pub fn layer_probabilities(&self) -> Vec<f64> {
        let mass = self.reach_probabilities();
        (0..=self.horizon)
            .map(|k| compensated_sum(self.layer(k).iter().map(|&id| mass[id as usize])))
            .collect()
    }

    pub fn to_doc(&self, max_nodes: usize) -> Result<LatticeDoc, LatticeError> {
        if self.nodes.len() > max_nodes {
            return Err(LatticeError::DumpTooLarge {
                nodes: self.nodes.len(),
                limit: max_nodes,
            });
        }
        Ok(LatticeDoc {
            root: self.root as u64,
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| NodeDoc {
                    id: id as u64,
                    time: n.time,
                    lower: n.lower,
                    upper: n.upper,
                    transitions: self
                        .transitions(id as u32)
                        .iter()
                        .map(|t| (t.child as u64, t.prob))
                        .collect(),
                })
                .collect(),
        })
    }

    /// Builds a lattice from its JSON document. Ids may be any distinct integers.
    pub fn from_doc(doc: &LatticeDoc) -> Result<Self, LatticeError> {
        let mut index = HashMap::with_capacity(doc.nodes.len());
        for (pos, node) in doc.nodes.iter().enumerate() {
            if index.insert(node.id, pos as u32).is_some() {
                return Err(malformed(node.id, "duplicate node id"));
            }
        }
        let mut builder = LatticeBuilder::with_capacity(doc.nodes.len(), 0);
        for node in &doc.nodes {
            let mut out = Vec::with_capacity(node.transitions.len());
            for &(child, prob) in &node.transitions {
                let &c = index
                    .get(&child)
                    .ok_or_else(|| malformed(node.id, format!("unknown child id {child}")))?;
                out.push((c, prob));
            }
            builder.add_node(node.time, node.lower, node.upper, out);
        }
        let &root = index
            .get(&doc.root)
            .ok_or_else(|| malformed(doc.root, "unknown root id"))?;
        builder.build(root).map_err(|e| match e {
            // report the caller's ids, not internal positions
            LatticeError::Malformed { node, reason } => {
                malformed(doc.nodes[node as usize].id, reason)
            }
            other => other,
        })
    }
}

/// JSON form of a [`FilteredLattice`]: a node array with explicit ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeDoc {
    pub root: u64,
    pub nodes: Vec<NodeDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: u64,
    pub time: u32,
    pub lower: f64,
    pub upper: f64,
    /// `[child id, probability]` pairs; empty at the horizon.
    #[serde(default)]
    pub transitions: Vec<(u64, f64)>,
}

/// Game values and optimality regions for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct DPResult {
    pub values: Vec<f64>,
    /// `J == lower`: exercising now is optimal for the buyer.
    pub buyer_stop: Vec<bool>,
    /// `J == upper`: cancelling now is optimal for the seller.
    pub seller_cancel: Vec<bool>,
    pub root: u32,
}

impl DPResult {
    pub fn value(&self) -> f64 {
        self.values[self.root as usize]
    }
}

/// Discounted continuation value `E[J(child)]`, children summed in stored order.
pub fn continuation(lattice: &FilteredLattice, values: &[f64], id: u32) -> f64 {
    compensated_sum(
        lattice
            .transitions(id)
            .iter()
            .map(|t| t.prob * values[t.child as usize]),
    )
}

/// Solves the game by backward induction over time layers.
///
/// Lattice invariants are enforced at construction, so solving cannot fail.
/// Layers are processed sequentially; nodes within a layer may be evaluated in
/// parallel, and the result does not depend on the worker count.
pub fn solve(lattice: &FilteredLattice) -> DPResult {
    let count = lattice.len();
    let mut values = vec![0.0; count];
    let mut buyer_stop = vec![false; count];
    let mut seller_cancel = vec![false; count];

    for &id in lattice.layer(lattice.horizon()) {
        let node = lattice.node(id);
        values[id as usize] = node.lower;
        buyer_stop[id as usize] = true;
        seller_cancel[id as usize] = node.lower == node.upper;
    }

    let eval = |values: &[f64], id: u32| {
        let node = lattice.node(id);
        let cont = continuation(lattice, values, id);
        node.upper.min(node.lower.max(cont))
    };

    for k in (0..lattice.horizon()).rev() {
        let layer = lattice.layer(k);
        let layer_values: Vec<f64> = if layer.len() >= PAR_LAYER_MIN {
            layer.par_iter().map(|&id| eval(&values, id)).collect()
        } else {
            layer.iter().map(|&id| eval(&values, id)).collect()
        };
        for (&id, j) in layer.iter().zip(layer_values) {
            let node = lattice.node(id);
            values[id as usize] = j;
            buyer_stop[id as usize] = j == node.lower;
            seller_cancel[id as usize] = j == node.upper;
        }
    }

    DPResult {
        values,
        buyer_stop,
        seller_cancel,
        root: lattice.root(),
    }
}

/// Root game value.
pub fn value(lattice: &FilteredLattice) -> f64 {
    solve(lattice).value()
}

/// A pure stopping rule: stop at the first node on the path whose flag is set.
///
/// Terminal nodes always stop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoppingRule {
    stop: Vec<bool>,
}

impl StoppingRule {
    /// Builds a rule from per-node flags, forcing a stop at every terminal node.
    pub fn from_flags(lattice: &FilteredLattice, mut flags: Vec<bool>) -> Self {
        assert_eq!(flags.len(), lattice.len(), "one flag per node");
        for &id in lattice.layer(lattice.horizon()) {
            flags[id as usize] = true;
        }
        Self { stop: flags }
    }

    /// Stop immediately at the root.
    pub fn immediate(lattice: &FilteredLattice) -> Self {
        let mut flags = vec![false; lattice.len()];
        flags[lattice.root() as usize] = true;
        Self::from_flags(lattice, flags)
    }

    /// Never stop before the horizon.
    pub fn at_horizon(lattice: &FilteredLattice) -> Self {
        Self::from_flags(lattice, vec![false; lattice.len()])
    }

    pub fn stops_at(&self, id: u32) -> bool {
        self.stop[id as usize]
    }

    pub fn flags(&self) -> &[bool] {
        &self.stop
    }

    pub fn len(&self) -> usize {
        self.stop.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stop.is_empty()
    }

    /// Position in `path` of the first stopping node.
    pub fn first_stop(&self, path: &[u32]) -> Option<usize> {
        path.iter().position(|&id| self.stops_at(id))
    }
}

/// Optimal rules read off a solved game.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Strategies {
    /// Exercise at the first node where `J == lower`.
    pub buyer: StoppingRule,
    /// Cancel at the first node where `J == upper`; otherwise wait for the horizon.
    pub seller: StoppingRule,
}

pub fn extract_strategies(lattice: &FilteredLattice, result: &DPResult) -> Strategies {
    Strategies {
        buyer: StoppingRule::from_flags(lattice, result.buyer_stop.clone()),
        seller: StoppingRule::from_flags(lattice, result.seller_cancel.clone()),
    }
}
