//! The pairwise preference loss family and its exact first derivatives.
//!
//! Six scalar losses over a reward margin `z` (already beta-scaled by the
//! margin layer), each decreasing in the margin on its effective domain:
//!
//! | name                  | loss(z)              | used by |
//! |-----------------------|----------------------|---------|
//! | `logistic_log`        | `log(1 + e^-z)`      | DPO     |
//! | `hinge`               | `max(0, 1 - z)`      | SLiC    |
//! | `squared`             | `(z - 1)^2`          | IPO     |
//! | `exponential`         | `e^-z`               |         |
//! | `truncated_quadratic` | `max(0, 1 - z)^2`    |         |
//! | `savage`              | `1 / (1 + e^z)^2`    |         |
//!
//! Logistic and savage evaluations go through softplus/sigmoid formulations
//! that never overflow; the exponential loss clamps its argument at
//! [`EXP_CLAMP`] and counts every clamped evaluation (see
//! [`exp_clamp_count`]) so saturated runs are visible in diagnostics.
//!
//! At the hinge and truncated-quadratic kinks (`z = 1`) the derivative is the
//! left limit: `-1` and `0` respectively.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;
use thiserror::Error;

use crate::margin::RewardPair;

/// Arguments below this clamp `exp(-z)` in the exponential loss.
pub const EXP_CLAMP: f64 = -30.0;

static EXP_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of exponential-loss evaluations clamped so far (process-wide).
pub fn exp_clamp_count() -> u64 {
    EXP_CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Reset the clamp counter, e.g. at the start of a run.
pub fn reset_exp_clamp_count() {
    EXP_CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("margin must be finite, got {0}")]
    NonFiniteMargin(f64),
    #[error(
        "unknown loss '{0}' (valid: logistic_log, hinge, squared, exponential, \
         truncated_quadratic, savage)"
    )]
    UnknownKind(String),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum LossKind {
    LogisticLog,
    Hinge,
    Squared,
    Exponential,
    TruncatedQuadratic,
    Savage,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::LogisticLog,
        LossKind::Hinge,
        LossKind::Squared,
        LossKind::Exponential,
        LossKind::TruncatedQuadratic,
        LossKind::Savage,
    ];

    /// Stable name used in CLI flags and config files.
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::LogisticLog => "logistic_log",
            LossKind::Hinge => "hinge",
            LossKind::Squared => "squared",
            LossKind::Exponential => "exponential",
            LossKind::TruncatedQuadratic => "truncated_quadratic",
            LossKind::Savage => "savage",
        }
    }

    /// Margin values where the derivative is discontinuous (kinks and the
    /// exponential clamp boundary). Finite-difference probes must stay clear
    /// of these.
    pub fn nonsmooth_points(&self) -> &'static [f64] {
        match self {
            LossKind::Hinge | LossKind::TruncatedQuadratic => &[1.0],
            LossKind::Exponential => &[EXP_CLAMP],
            _ => &[],
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, LossError> {
        match s {
            "logistic_log" => Ok(LossKind::LogisticLog),
            "hinge" => Ok(LossKind::Hinge),
            "squared" => Ok(LossKind::Squared),
            "exponential" => Ok(LossKind::Exponential),
            "truncated_quadratic" => Ok(LossKind::TruncatedQuadratic),
            "savage" => Ok(LossKind::Savage),
            other => Err(LossError::UnknownKind(other.to_string())),
        }
    }
}

/// A loss function plus the reward scale `beta` the trainer applies in the
/// chain rule. The margin handed to [`loss_value`] is already beta-scaled,
/// so `beta` does not rescale the loss argument here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSpec {
    pub kind: LossKind,
    beta: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, beta: f64) -> Result<Self, LossError> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(LossError::InvalidBeta(beta));
        }
        Ok(Self { kind, beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Evaluate the loss at an (already beta-scaled) margin.
pub fn loss_value(spec: &LossSpec, margin: f64) -> Result<f64, LossError> {
    if !margin.is_finite() {
        return Err(LossError::NonFiniteMargin(margin));
    }
    let z = margin;
    let v = match spec.kind {
        LossKind::LogisticLog => softplus(-z),
        LossKind::Hinge => (1.0 - z).max(0.0),
        LossKind::Squared => (z - 1.0) * (z - 1.0),
        LossKind::Exponential => (-clamped_exp_arg(z)).exp(),
        LossKind::TruncatedQuadratic => {
            let t = (1.0 - z).max(0.0);
            t * t
        }
        LossKind::Savage => {
            let s = sigmoid(-z);
            s * s
        }
    };
    Ok(v)
}

/// Exact first derivative of the loss; left-limit subderivative at kinks.
pub fn loss_derivative(spec: &LossSpec, margin: f64) -> Result<f64, LossError> {
    if !margin.is_finite() {
        return Err(LossError::NonFiniteMargin(margin));
    }
    let z = margin;
    let d = match spec.kind {
        LossKind::LogisticLog => -sigmoid(-z),
        LossKind::Hinge => {
            if z <= 1.0 {
                -1.0
            } else {
                0.0
            }
        }
        LossKind::Squared => 2.0 * (z - 1.0),
        LossKind::Exponential => -(-clamped_exp_arg(z)).exp(),
        LossKind::TruncatedQuadratic => {
            if z < 1.0 {
                2.0 * (z - 1.0)
            } else {
                0.0
            }
        }
        LossKind::Savage => {
            let s = sigmoid(-z);
            -2.0 * sigmoid(z) * s * s
        }
    };
    Ok(d)
}

fn clamped_exp_arg(z: f64) -> f64 {
    if z < EXP_CLAMP {
        EXP_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        EXP_CLAMP
    } else {
        z
    }
}

/// Bradley-Terry probability that the chosen response beats the rejected one:
/// `sigmoid(r_w - r_l)`.
pub fn win_probability(pair: &RewardPair) -> f64 {
    let (r_w, r_l) = pair.implicit_rewards();
    sigmoid(r_w - r_l)
}
