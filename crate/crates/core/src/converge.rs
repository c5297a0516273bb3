//! Value sequences over a grid of step counts, extrapolation, and the grid-gap diagnostic.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::dynkin::solve;
use crate::lattice::{branches, build, EngineKind, EnginePolicy, QuantMeta};
use crate::model::{step_params, MertonParams, ModelError};
use crate::oracle::{mc_path_functionals, McConfig, McEstimate, OracleError};
use crate::payoff::{PayoffKind, PayoffSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvergeError {
    #[error("need at least 3 successful rows at doubling n, found {found}")]
    InsufficientRows { found: usize },
    #[error("rows n = {ns:?} are not at doubling step counts")]
    NotDoubling { ns: [usize; 3] },
    #[error("sequence does not contract (differences {d1} and {d2} are equal)")]
    NonContracting { d1: f64, d2: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// One row of a [`ConvergenceTable`]. Failed rows keep `n` and carry the error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub value: Option<f64>,
    pub engine: Option<EngineKind>,
    pub states: usize,
    pub transitions: usize,
    /// Lower and upper payoff at the root; the value lies between them.
    pub root_lower: Option<f64>,
    pub root_upper: Option<f64>,
    /// Build plus solve time; recorded only when timing is requested.
    pub wall_ms: Option<f64>,
    pub quantization: Option<QuantMeta>,
    pub bound: Option<GridGapBound>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    /// `|V_n - V_prev|` for each row against the previous successful row.
    pub fn delta_prev(&self) -> Vec<Option<f64>> {
        let mut prev: Option<f64> = None;
        self.rows
            .iter()
            .map(|row| match row.value {
                Some(v) => {
                    let d = prev.map(|p| (v - p).abs());
                    prev = Some(v);
                    d
                }
                None => None,
            })
            .collect()
    }

    /// `|V_{2n} - V_n|` for every `n` whose double is also in the table.
    pub fn doubling_deltas(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|row| {
                let v = row.value?;
                let twice = self.rows.iter().find(|r| r.n == 2 * row.n)?.value?;
                Some((row.n, (twice - v).abs()))
            })
            .collect()
    }

    pub fn value_at(&self, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n).and_then(|r| r.value)
    }

    /// Fills the grid-gap bound of every row. Rows whose bound fails keep `None`.
    pub fn attach_bounds(&mut self, params: &MertonParams, payoff: &PayoffSpec, cfg: &McConfig) {
        for row in &mut self.rows {
            row.bound = grid_gap_bound(params, payoff, row.n, cfg).ok();
        }
    }

    /// CSV with columns `n,value,delta_prev,engine,states,wall_ms`, followed by
    /// `term1,term2,term3_proxy,bound_total` when any row carries a bound.
    /// Missing data is an empty cell; failed rows report engine `failed`.
    pub fn to_csv(&self) -> String {
        let with_bounds = self.rows.iter().any(|r| r.bound.is_some());
        let mut out = String::from("n,value,delta_prev,engine,states,wall_ms");
        if with_bounds {
            out.push_str(",term1,term2,term3_proxy,bound_total");
        }
        out.push('\n');
        for (row, delta) in self.rows.iter().zip(self.delta_prev()) {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                row.n,
                fmt_opt(row.value),
                fmt_opt(delta),
                row.engine.map_or("failed", |e| e.as_str()),
                row.states,
                fmt_opt(row.wall_ms),
            ));
            if with_bounds {
                let b = row.bound.as_ref();
                for v in [
                    b.map(|b| b.term1),
                    b.map(|b| b.term2),
                    b.map(|b| b.term3_proxy),
                    b.map(|b| b.total),
                ] {
                    out.push(',');
                    out.push_str(&fmt_opt(v));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Computes `V_n` for every `n` in `n_list`. Rows come out sorted by `n`.
///
/// Errors are recorded on their row; the sweep continues.
pub fn value_sequence(
    params: &MertonParams,
    payoff: &PayoffSpec,
    n_list: &[usize],
    policy: &EnginePolicy,
    timing: bool,
) -> ConvergenceTable {
    let mut ns = n_list.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let rows = ns
        .into_iter()
        .map(|n| {
            let start = Instant::now();
            match build(params, payoff, n, policy) {
                Ok(ml) => {
                    let result = solve(&ml.lattice);
                    let root = ml.lattice.node(ml.lattice.root());
                    ConvergenceRow {
                        n,
                        value: Some(result.value()),
                        engine: Some(ml.meta.engine),
                        states: ml.meta.states,
                        transitions: ml.meta.transitions,
                        root_lower: Some(root.lower),
                        root_upper: Some(root.upper),
                        wall_ms: timing.then(|| start.elapsed().as_secs_f64() * 1e3),
                        quantization: ml.meta.quantization.clone(),
                        bound: None,
                        error: None,
                    }
                }
                Err(e) => ConvergenceRow {
                    n,
                    value: None,
                    engine: None,
                    states: 0,
                    transitions: 0,
                    root_lower: None,
                    root_upper: None,
                    wall_ms: None,
                    quantization: None,
                    bound: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    ConvergenceTable { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Extrapolation {
    /// Aitken limit of the last three successful rows.
    pub limit: f64,
    /// `delta_{i+1} / delta_i` for consecutive successful rows; `None` when both deltas vanish.
    pub ratios: Vec<Option<f64>>,
}

/// Aitken extrapolation over the last three successful rows, which must be at doubling `n`.
pub fn richardson(table: &ConvergenceTable) -> Result<Extrapolation, ConvergeError> {
    let ok: Vec<(usize, f64)> = table
        .rows
        .iter()
        .filter_map(|r| Some((r.n, r.value?)))
        .collect();
    if ok.len() < 3 {
        return Err(ConvergeError::InsufficientRows { found: ok.len() });
    }
    let [(n1, v1), (n2, v2), (n3, v3)] = [ok[ok.len() - 3], ok[ok.len() - 2], ok[ok.len() - 1]];
    if n2 != 2 * n1 || n3 != 2 * n2 {
        return Err(ConvergeError::NotDoubling { ns: [n1, n2, n3] });
    }
    let deltas: Vec<f64> = ok.windows(2).map(|w| w[1].1 - w[0].1).collect();
    let ratios = deltas
        .windows(2)
        .map(|w| {
            if w[0] == 0.0 && w[1] == 0.0 {
                None
            } else {
                Some((w[1] / w[0]).abs())
            }
        })
        .collect();

    let (d1, d2) = (v2 - v1, v3 - v2);
    let limit = if d2 == 0.0 {
        v3
    } else if d2 == d1 {
        return Err(ConvergeError::NonContracting { d1, d2 });
    } else {
        v3 - d2 * d2 / (d2 - d1)
    };
    Ok(Extrapolation { limit, ratios })
}

/// Terms of the bound on the gap between the grid game value and the
/// continuous-time game on the piecewise-constant process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridGapBound {
    pub n: usize,
    /// `2 (rT/n) (M + E sup_t e^{rt} S_t)`.
    pub term1: f64,
    /// `2 e^{rT} (rT/n) E sup_t S_t`.
    pub term2: f64,
    /// `(delta + 2 e^{rT}) max_k E|S_{k+1} - S_k|`, a deterministic-time stand-in
    /// for the supremum over stopping times.
    pub term3_proxy: f64,
    pub total: f64,
    /// Always true: the third term is a proxy, not a bound.
    pub term3_heuristic: bool,
    pub sup_accrued: McEstimate,
    pub sup_price: McEstimate,
}

/// Level `M` entering the first term: the Russian floor, the put/call strike, or 0 for Asian payoffs.
fn bound_level(payoff: &PayoffSpec) -> f64 {
    match payoff.kind() {
        PayoffKind::Russian { floor, .. } => floor,
        PayoffKind::GamePut { strike, .. } | PayoffKind::GameCall { strike, .. } => strike,
        PayoffKind::Asian { .. } => 0.0,
    }
}

pub fn grid_gap_bound(
    params: &MertonParams,
    payoff: &PayoffSpec,
    n: usize,
    cfg: &McConfig,
) -> Result<GridGapBound, ConvergeError> {
    let step = step_params(params, n)?;
    let (r, t) = (params.r, params.horizon);
    let dt = step.dt;
    let [sup_accrued, sup_price] = mc_path_functionals(params, &step, cfg, |prices| {
        // the path is constant on [k dt, (k+1) dt), so the accrued supremum over that
        // segment is its right-end limit e^{r (k+1) dt} S_k; at T it is e^{rT} S_n
        let last = prices.len() - 1;
        let mut accrued = (r * t).exp() * prices[last];
        let mut top = prices[last];
        for (k, &p) in prices[..last].iter().enumerate() {
            accrued = accrued.max((r * (k + 1) as f64 * dt).exp() * p);
            top = top.max(p);
        }
        [accrued, top]
    })?;

    // S_{k+1} - S_k = S_k (Z - 1) with Z independent of S_k and E S_k = S_0,
    // so E|S_{k+1} - S_k| = S_0 E|Z - 1| for every k.
    let mean_abs_increment = params.s0
        * branches(&step, &params.jump_law)
            .iter()
            .map(|b| {
                let jump = b
                    .jump
                    .map_or(0.0, |j| params.jump_law.atoms()[j].log_multiplier);
                let log = if b.up { step.a } else { -step.a } + jump;
                b.prob * log.exp_m1().abs()
            })
            .sum::<f64>();

    let scale = r * t / n as f64;
    let growth = (r * t).exp();
    let term1 = 2.0 * scale * (bound_level(payoff) + sup_accrued.estimate);
    let term2 = 2.0 * growth * scale * sup_price.estimate;
    let term3_proxy = (payoff.delta() + 2.0 * growth) * mean_abs_increment;
    Ok(GridGapBound {
        n,
        term1,
        term2,
        term3_proxy,
        total: term1 + term2 + term3_proxy,
        term3_heuristic: true,
        sup_accrued,
        sup_price,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(n: usize, value: f64) -> ConvergenceRow {
        ConvergenceRow {
            n,
            value: Some(value),
            engine: Some(EngineKind::Exact),
            states: 1,
            transitions: 0,
            root_lower: None,
            root_upper: None,
            wall_ms: None,
            quantization: None,
            bound: None,
            error: None,
        }
    }

    #[test]
    fn constant_sequence_extrapolates_to_itself() {
        let t = ConvergenceTable {
            rows: vec![row(4, 1.3), row(8, 1.3), row(16, 1.3)],
        };
        let e = richardson(&t).unwrap();
        assert_eq!(e.limit, 1.3);
        assert_eq!(e.ratios, vec![None]);
    }

    #[test]
    fn geometric_sequence_extrapolates_exactly() {
        let rows = (1..=5).map(|k| row(1 << k, 1.0 + 0.5f64.powi(k))).collect();
        let e = richardson(&ConvergenceTable { rows }).unwrap();
        assert_abs_diff_eq!(e.limit, 1.0, epsilon = 1e-9);
        for r in e.ratios {
            assert_abs_diff_eq!(r.unwrap(), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn richardson_needs_doubling_rows() {
        let t = ConvergenceTable {
            rows: vec![row(4, 1.0), row(8, 1.1)],
        };
        assert_eq!(
            richardson(&t),
            Err(ConvergeError::InsufficientRows { found: 2 })
        );
        let t = ConvergenceTable {
            rows: vec![row(4, 1.0), row(8, 1.1), row(12, 1.2)],
        };
        assert!(matches!(
            richardson(&t),
            Err(ConvergeError::NotDoubling { .. })
        ));
        let t = ConvergenceTable {
            rows: vec![row(4, 1.0), row(8, 1.5), row(16, 2.0)],
        };
        assert!(matches!(
            richardson(&t),
            Err(ConvergeError::NonContracting { .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let mut t = ConvergenceTable {
            rows: vec![row(4, 1.5), row(8, 1.25)],
        };
        t.rows.push(ConvergenceRow {
            value: None,
            engine: None,
            error: Some("boom".into()),
            ..row(16, 0.0)
        });
        assert_eq!(
            t.to_csv(),
            "n,value,delta_prev,engine,states,wall_ms\n4,1.5,,exact,1,\n8,1.25,0.25,exact,1,\n16,,,failed,1,\n"
        );
        assert_eq!(t.doubling_deltas(), vec![(4, 0.25)]);
    }
}
