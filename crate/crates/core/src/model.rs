//! Continuous Merton parameters and the calibrated n-step discrete model.
//!
//! The discrete discounted price is
//! `S_k = S0 * exp(a * (rho_1 + ... + rho_k) + (jump log-sizes up to step k))`
//! with `a = sigma * sqrt(T / n)`, independent Rademacher moves `rho`,
//! Bernoulli jump indicators with probability `lambda * T / n`, and jump
//! log-multipliers drawn from a finite [`JumpLaw`]. The up-probability is chosen
//! so that the discounted price is an exact one-step martingale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `sum(q_j) = 1` for a jump law.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Upper bound used when scanning for the smallest valid step count.
const MIN_STEPS_SCAN_LIMIT: usize = 1 << 40;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("invalid jump law: {0}")]
    InvalidJumpLaw(String),
    #[error(
        "step count n = {n} is too coarse (p_up = {p_up}, jump_prob = {jump_prob}); \
         smallest valid n is {min_valid}"
    )]
    StepTooCoarse {
        n: usize,
        p_up: f64,
        jump_prob: f64,
        min_valid: MinValid,
    },
}

/// Outcome of the scan for the smallest admissible step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinValid {
    Found(usize),
    NotFound,
}

impl std::fmt::Display for MinValid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MinValid::Found(n) => write!(f, "{n}"),
            MinValid::NotFound => write!(f, "not found below 2^40"),
        }
    }
}

/// One atom of a jump law: the log-multiplier `y = ln(1 + U)` and its probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpAtom {
    pub log_multiplier: f64,
    pub prob: f64,
}

impl JumpAtom {
    /// The relative jump `U = e^y - 1`.
    pub fn relative_jump(&self) -> f64 {
        self.log_multiplier.exp_m1()
    }
}

/// Finite-support law of the jump multiplier `1 + U`.
///
/// Serialized as `{"atoms": [[y, q], ...]}` with `y = ln(1 + U)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JumpLawDoc", into = "JumpLawDoc")]
pub struct JumpLaw {
    atoms: Vec<JumpAtom>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JumpLawDoc {
    atoms: Vec<(f64, f64)>,
}

impl TryFrom<JumpLawDoc> for JumpLaw {
    type Error = ModelError;

    fn try_from(doc: JumpLawDoc) -> Result<Self, Self::Error> {
        JumpLaw::new(doc.atoms)
    }
}

impl From<JumpLaw> for JumpLawDoc {
    fn from(law: JumpLaw) -> Self {
        JumpLawDoc {
            atoms: law
                .atoms
                .iter()
                .map(|a| (a.log_multiplier, a.prob))
                .collect(),
        }
    }
}

impl JumpLaw {
    /// Builds a law from `(y, q)` pairs.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        if atoms.is_empty() {
            return Err(ModelError::InvalidJumpLaw("no atoms".into()));
        }
        let mut total = 0.0;
        for (j, &(y, q)) in atoms.iter().enumerate() {
            if !y.is_finite() {
                return Err(ModelError::InvalidJumpLaw(format!(
                    "atom {j}: log-multiplier {y} is not finite"
                )));
            }
            if !(q > 0.0 && q.is_finite()) {
                return Err(ModelError::InvalidJumpLaw(format!(
                    "atom {j}: probability {q} must be positive"
                )));
            }
            total += q;
        }
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(ModelError::InvalidJumpLaw(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            atoms: atoms
                .into_iter()
                .map(|(log_multiplier, prob)| JumpAtom {
                    log_multiplier,
                    prob,
                })
                .collect(),
        })
    }

    /// A jump of relative size `u` with probability one.
    pub fn single(u: f64) -> Result<Self, ModelError> {
        if u.is_nan() || u <= -1.0 {
            return Err(ModelError::InvalidJumpLaw(format!(
                "relative jump {u} must exceed -1"
            )));
        }
        Self::new(vec![(u.ln_1p(), 1.0)])
    }

    /// Builds a law from relative jumps `U_j` instead of log-multipliers.
    pub fn from_relative(jumps: &[(f64, f64)]) -> Result<Self, ModelError> {
        let mut atoms = Vec::with_capacity(jumps.len());
        for &(u, q) in jumps {
            if u.is_nan() || u <= -1.0 {
                return Err(ModelError::InvalidJumpLaw(format!(
                    "relative jump {u} must exceed -1"
                )));
            }
            atoms.push((u.ln_1p(), q));
        }
        Self::new(atoms)
    }

    /// The identity multiplier; used when the model has no jumps.
    pub fn identity() -> Self {
        Self {
            atoms: vec![JumpAtom {
                log_multiplier: 0.0,
                prob: 1.0,
            }],
        }
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// `E[U]` for the jump law.
pub fn mean_jump(jump_law: &JumpLaw) -> f64 {
    jump_law
        .atoms
        .iter()
        .map(|a| a.prob * a.relative_jump())
        .sum()
}

/// Parameters of the continuous-time model for the discounted price.
///
/// The drift `mu = -lambda * E[U]` is implied and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MertonParams {
    pub s0: f64,
    pub sigma: f64,
    pub r: f64,
    pub lambda: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "JumpLaw::identity")]
    pub jump_law: JumpLaw,
}

impl MertonParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        fn check(field: &'static str, value: f64, ok: bool, need: &str) -> Result<(), ModelError> {
            if value.is_finite() && ok {
                Ok(())
            } else {
                Err(ModelError::InvalidParameter {
                    field,
                    reason: format!("{value} must be {need}"),
                })
            }
        }
        check("s0", self.s0, self.s0 > 0.0, "positive")?;
        check("sigma", self.sigma, self.sigma > 0.0, "positive")?;
        check("r", self.r, self.r >= 0.0, "non-negative")?;
        check("lambda", self.lambda, self.lambda >= 0.0, "non-negative")?;
        check("T", self.horizon, self.horizon > 0.0, "positive")?;
        Ok(())
    }

    /// The drift `mu = -lambda * E[U]` that makes the continuous discounted price a martingale.
    pub fn drift(&self) -> f64 {
        -self.lambda * mean_jump(&self.jump_law)
    }
}

/// How the up-probability of the Rademacher move is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Target mean `n / (n + lambda T E[U])`; the discrete price is an exact martingale.
    #[default]
    ExactMartingale,
    /// Target mean `n / (n + mu lambda T)` with `mu = -lambda E[U]`, as printed in the
    /// original construction. Only for comparison; not a martingale when `lambda E[U] != 0`.
    Literal,
}

/// Per-step law of the n-step discrete model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub n: usize,
    pub dt: f64,
    /// Log-price step of the Rademacher move, `sigma * sqrt(T / n)`.
    pub a: f64,
    pub p_up: f64,
    /// Probability of a jump within one step, `lambda * T / n`.
    pub jump_prob: f64,
}

impl StepParams {
    /// `E[exp(a * rho)]`.
    pub fn diffusion_mean(&self) -> f64 {
        self.p_up * self.a.exp() + (1.0 - self.p_up) * (-self.a).exp()
    }
}

fn raw_step(params: &MertonParams, n: usize, norm: Normalization) -> StepParams {
    let nf = n as f64;
    let dt = params.horizon / nf;
    let a = params.sigma * dt.sqrt();
    let jump_prob = params.lambda * dt;
    let lt = params.lambda * params.horizon;
    let target = match norm {
        Normalization::ExactMartingale => nf / (nf + lt * mean_jump(&params.jump_law)),
        Normalization::Literal => nf / (nf + params.drift() * lt),
    };
    let (up, down) = (a.exp(), (-a).exp());
    StepParams {
        n,
        dt,
        a,
        p_up: (target - down) / (up - down),
        jump_prob,
    }
}

fn admissible(step: &StepParams) -> bool {
    (0.0..=1.0).contains(&step.p_up) && (0.0..=1.0).contains(&step.jump_prob)
}

/// Smallest `n' > n` for which the step law is admissible, found by doubling then bisection.
fn scan_min_valid(params: &MertonParams, n: usize, norm: Normalization) -> MinValid {
    let mut hi = n.max(1);
    loop {
        if hi >= MIN_STEPS_SCAN_LIMIT {
            return MinValid::NotFound;
        }
        hi *= 2;
        if admissible(&raw_step(params, hi, norm)) {
            break;
        }
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if admissible(&raw_step(params, mid, norm)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    MinValid::Found(hi)
}

/// Calibrates the n-step model with the exact-martingale normalization.
pub fn step_params(params: &MertonParams, n: usize) -> Result<StepParams, ModelError> {
    step_params_with(params, n, Normalization::ExactMartingale)
}

pub fn step_params_with(
    params: &MertonParams,
    n: usize,
    norm: Normalization,
) -> Result<StepParams, ModelError> {
    params.validate()?;
    if n == 0 {
        return Err(ModelError::InvalidParameter {
            field: "n",
            reason: "step count must be at least 1".into(),
        });
    }
    let step = raw_step(params, n, norm);
    if admissible(&step) {
        Ok(step)
    } else {
        Err(ModelError::StepTooCoarse {
            n,
            p_up: step.p_up,
            jump_prob: step.jump_prob,
            min_valid: scan_min_valid(params, n, norm),
        })
    }
}

/// `E[exp(a rho)] * E[(1 + U)^xi]`, the one-step growth of the discounted price.
pub fn one_step_mean_factor(step: &StepParams, jump_law: &JumpLaw) -> f64 {
    step.diffusion_mean() * (1.0 + step.jump_prob * mean_jump(jump_law))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(lambda: f64, sigma: f64, law: JumpLaw) -> MertonParams {
        MertonParams {
            s0: 1.0,
            sigma,
            r: 0.06,
            lambda,
            horizon: 1.0,
            jump_law: law,
        }
    }

    #[test]
    fn mean_jump_examples() {
        assert_abs_diff_eq!(
            mean_jump(&JumpLaw::single(-0.2).unwrap()),
            -0.2,
            epsilon = 1e-15
        );
        let two = JumpLaw::from_relative(&[(-0.2, 0.5), (0.25, 0.5)]).unwrap();
        assert_abs_diff_eq!(mean_jump(&two), 0.025, epsilon = 1e-15);
        assert_eq!(mean_jump(&JumpLaw::new(vec![(0.0, 1.0)]).unwrap()), 0.0);
    }

    #[test]
    fn jump_law_rejects_bad_atoms() {
        assert!(JumpLaw::new(vec![]).is_err());
        assert!(JumpLaw::new(vec![(0.1, 0.5)]).is_err());
        assert!(JumpLaw::new(vec![(f64::NEG_INFINITY, 1.0)]).is_err());
        assert!(JumpLaw::new(vec![(0.1, 0.0), (0.2, 1.0)]).is_err());
        assert!(JumpLaw::single(-1.0).is_err());
    }

    #[test]
    fn crr_step_without_jumps() {
        let p = params(0.0, 0.2, JumpLaw::identity());
        let s = step_params(&p, 100).unwrap();
        assert_abs_diff_eq!(s.a, 0.02, epsilon = 1e-15);
        assert_eq!(s.jump_prob, 0.0);
        let expected = (1.0 - (-0.02f64).exp()) / (0.02f64.exp() - (-0.02f64).exp());
        assert_abs_diff_eq!(s.p_up, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(s.p_up, 0.49500, epsilon = 1e-5);
        assert_abs_diff_eq!(s.diffusion_mean(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn jump_step_hits_target_mean() {
        let p = params(0.1, 0.2, JumpLaw::single(-0.2).unwrap());
        let s = step_params(&p, 100).unwrap();
        assert_abs_diff_eq!(s.jump_prob, 0.001, epsilon = 1e-15);
        assert_abs_diff_eq!(s.diffusion_mean(), 100.0 / 99.98, epsilon = 1e-14);
        assert_abs_diff_eq!(one_step_mean_factor(&s, &p.jump_law), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coarse_step_is_rejected_with_min_valid() {
        let p = params(1.0, 0.2, JumpLaw::single(-0.9).unwrap());
        match step_params(&p, 1) {
            Err(ModelError::StepTooCoarse {
                p_up, min_valid, ..
            }) => {
                assert!(p_up > 1.0);
                let MinValid::Found(m) = min_valid else {
                    panic!("scan failed")
                };
                assert!(step_params(&p, m).is_ok());
                assert!(step_params(&p, m - 1).is_err());
            }
            other => panic!("expected StepTooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn jump_probability_above_one_is_rejected() {
        let p = params(3.0, 0.2, JumpLaw::single(-0.2).unwrap());
        assert!(matches!(
            step_params(&p, 2),
            Err(ModelError::StepTooCoarse { .. })
        ));
    }

    #[test]
    fn zero_sigma_and_zero_steps_rejected() {
        let p = params(0.0, 0.0, JumpLaw::identity());
        assert!(matches!(
            step_params(&p, 10),
            Err(ModelError::InvalidParameter { field: "sigma", .. })
        ));
        let p = params(0.0, 0.2, JumpLaw::identity());
        assert!(step_params(&p, 0).is_err());
    }

    #[test]
    fn symmetric_up_probability_gives_cosh() {
        let s = StepParams {
            n: 1,
            dt: 1.0,
            a: 0.02,
            p_up: 0.5,
            jump_prob: 0.0,
        };
        let f = one_step_mean_factor(&s, &JumpLaw::identity());
        assert_abs_diff_eq!(f, 0.02f64.cosh(), epsilon = 1e-16);
        assert_abs_diff_eq!(f, 1.0002, epsilon = 1e-7);
    }

    #[test]
    fn literal_normalization_is_not_a_martingale() {
        let p = params(0.5, 0.2, JumpLaw::single(-0.2).unwrap());
        let s = step_params_with(&p, 50, Normalization::Literal).unwrap();
        let lt = 0.5;
        let eu = -0.2;
        // (n + lambda T EU) / (n - lambda^2 T EU)
        let predicted = (50.0 + lt * eu) / (50.0 - 0.5 * lt * eu);
        assert_abs_diff_eq!(
            one_step_mean_factor(&s, &p.jump_law),
            predicted,
            epsilon = 1e-12
        );
        assert!((predicted - 1.0).abs() > 1e-4);
    }

    #[test]
    fn json_schema() {
        let p = params(0.1, 0.2, JumpLaw::single(-0.2).unwrap());
        let v = serde_json::to_value(&p).unwrap();
        assert!(v.get("T").is_some());
        assert_eq!(v["jump_law"]["atoms"][0][1], 1.0);
        let back: MertonParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
        let bad =
            r#"{"s0":1,"sigma":0.2,"r":0.05,"lambda":0,"T":1,"jump_law":{"atoms":[[0.0,0.4]]}}"#;
        assert!(serde_json::from_str::<MertonParams>(bad).is_err());
    }
}
