//! Lower (buyer exercise) and upper (seller cancellation) discounted payoffs on grid paths.
//!
//! Every payoff here is evaluated on the piecewise-constant discounted path
//! `P_0, P_1, ..., P_k` through a running statistic, so the lattice engines can
//! carry a small Markov state instead of the whole path prefix. The upper payoff
//! is always the lower one plus a penalty `delta * P_k`.
//!
//! Russian payoffs accrue the discount back into the price before taking the
//! running maximum. Segment `i` (the interval `[i dt, (i+1) dt)`) is folded with
//! accrual `exp(r (i+1) dt)` once it lies fully in the past, while the live
//! segment only accrues to `exp(r k dt)`. Asian payoffs use a left-endpoint
//! rectangle rule on the accrued price.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PayoffError {
    #[error("invalid payoff parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
}

/// Payoff family, serialized with a `"kind"` discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffKind {
    /// Discounted running maximum of the accrued price, floored at `M`.
    Russian {
        #[serde(rename = "M")]
        floor: f64,
        delta: f64,
    },
    GamePut {
        #[serde(rename = "K")]
        strike: f64,
        delta: f64,
    },
    GameCall {
        #[serde(rename = "K")]
        strike: f64,
        delta: f64,
    },
    /// Discounted time-average of the accrued price.
    Asian { delta: f64 },
}

impl PayoffKind {
    pub fn delta(&self) -> f64 {
        match *self {
            PayoffKind::Russian { delta, .. }
            | PayoffKind::GamePut { delta, .. }
            | PayoffKind::GameCall { delta, .. }
            | PayoffKind::Asian { delta } => delta,
        }
    }

    pub fn with_delta(self, delta: f64) -> Self {
        match self {
            PayoffKind::Russian { floor, .. } => PayoffKind::Russian { floor, delta },
            PayoffKind::GamePut { strike, .. } => PayoffKind::GamePut { strike, delta },
            PayoffKind::GameCall { strike, .. } => PayoffKind::GameCall { strike, delta },
            PayoffKind::Asian { .. } => PayoffKind::Asian { delta },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PayoffKind::Russian { .. } => "russian",
            PayoffKind::GamePut { .. } => "game_put",
            PayoffKind::GameCall { .. } => "game_call",
            PayoffKind::Asian { .. } => "asian",
        }
    }
}

/// A payoff family together with the interest rate used for accrual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayoffSpec {
    kind: PayoffKind,
    r: f64,
}

/// Markov-reducing summary of the path prefix `P_0 .. P_{k-1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathStatistic {
    /// Put/call payoffs depend on the current price only.
    Empty,
    /// `max(M, max_{i<k} exp(r (i+1) dt) P_i)`.
    AccruedMax(f64),
    /// `sum_{i<k} exp(r i dt) P_i dt`.
    Integral(f64),
}

impl PathStatistic {
    /// Scalar view of the statistic; `None` for [`PathStatistic::Empty`].
    pub fn value(&self) -> Option<f64> {
        match *self {
            PathStatistic::Empty => None,
            PathStatistic::AccruedMax(m) => Some(m),
            PathStatistic::Integral(i) => Some(i),
        }
    }
}

impl PayoffSpec {
    pub fn new(kind: PayoffKind, r: f64) -> Result<Self, PayoffError> {
        let bad = |field, reason: String| Err(PayoffError::InvalidParameter { field, reason });
        let delta = kind.delta();
        if !(delta >= 0.0 && delta.is_finite()) {
            return bad("delta", format!("{delta} must be finite and non-negative"));
        }
        if !(r >= 0.0 && r.is_finite()) {
            return bad("r", format!("{r} must be finite and non-negative"));
        }
        match kind {
            PayoffKind::Russian { floor, .. } if !(floor > 0.0 && floor.is_finite()) => {
                bad("M", format!("{floor} must be positive"))
            }
            PayoffKind::GamePut { strike, .. } | PayoffKind::GameCall { strike, .. }
                if !(strike > 0.0 && strike.is_finite()) =>
            {
                bad("K", format!("{strike} must be positive"))
            }
            _ => Ok(Self { kind, r }),
        }
    }

    pub fn kind(&self) -> PayoffKind {
        self.kind
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn delta(&self) -> f64 {
        self.kind.delta()
    }

    pub fn statistic_init(&self) -> PathStatistic {
        match self.kind {
            PayoffKind::Russian { floor, .. } => PathStatistic::AccruedMax(floor),
            PayoffKind::Asian { .. } => PathStatistic::Integral(0.0),
            PayoffKind::GamePut { .. } | PayoffKind::GameCall { .. } => PathStatistic::Empty,
        }
    }

    /// Folds the completed segment `[k dt, (k+1) dt)` carrying price `price` into `stat`.
    pub fn statistic_step(
        &self,
        stat: PathStatistic,
        k: usize,
        price: f64,
        dt: f64,
    ) -> PathStatistic {
        match stat {
            PathStatistic::AccruedMax(m) => {
                PathStatistic::AccruedMax(m.max((self.r * (k + 1) as f64 * dt).exp() * price))
            }
            PathStatistic::Integral(acc) => {
                PathStatistic::Integral(acc + (self.r * k as f64 * dt).exp() * price * dt)
            }
            PathStatistic::Empty => PathStatistic::Empty,
        }
    }

    /// Buyer's discounted exercise value at step `k`.
    ///
    /// `stat` must summarize `P_0 .. P_{k-1}` and `price` is `P_k`.
    pub fn eval_lower(&self, k: usize, stat: PathStatistic, price: f64, dt: f64) -> f64 {
        let t = k as f64 * dt;
        let growth = (self.r * t).exp();
        let discount = (-self.r * t).exp();
        match (self.kind, stat) {
            (PayoffKind::Russian { .. }, PathStatistic::AccruedMax(m)) => {
                discount * m.max(growth * price)
            }
            (PayoffKind::GamePut { strike, .. }, _) => {
                discount * (strike - growth * price).max(0.0)
            }
            (PayoffKind::GameCall { strike, .. }, _) => {
                discount * (growth * price - strike).max(0.0)
            }
            (PayoffKind::Asian { .. }, PathStatistic::Integral(acc)) => {
                if k == 0 {
                    price
                } else {
                    discount * acc / t
                }
            }
            (kind, stat) => panic!("statistic {stat:?} does not belong to payoff {kind:?}"),
        }
    }

    /// Seller's discounted cancellation value, `eval_lower + delta * price`.
    pub fn eval_upper(&self, k: usize, stat: PathStatistic, price: f64, dt: f64) -> f64 {
        self.eval_lower(k, stat, price, dt) + self.delta() * price
    }

    /// Lower and upper payoffs together.
    pub fn eval(&self, k: usize, stat: PathStatistic, price: f64, dt: f64) -> (f64, f64) {
        let lower = self.eval_lower(k, stat, price, dt);
        (lower, lower + self.delta() * price)
    }

    /// Evaluates `(lower, upper)` at every step of a price path.
    pub fn eval_path(&self, prices: &[f64], dt: f64) -> Vec<(f64, f64)> {
        let mut stat = self.statistic_init();
        let mut out = Vec::with_capacity(prices.len());
        for (k, &p) in prices.iter().enumerate() {
            out.push(self.eval(k, stat, p, dt));
            stat = self.statistic_step(stat, k, p, dt);
        }
        out
    }
}
