//! Implicit rewards and reward margins.
//!
//! A [`RewardPair`] carries the policy-vs-reference log-probability ratios for
//! the chosen and rejected responses of one preference example, together with
//! the reward scale `beta`. The implicit rewards are the scaled ratios
//! `r_w = beta * logratio_w` and `r_l = beta * logratio_l`; every margin in
//! this crate is expressed in those scaled units.
//!
//! Two margins are defined over a pair:
//!
//! - relative margin: `r_w - r_l`, the quantity DPO-family losses consume;
//! - balanced margin: `min(r_w, -alpha * r_l)`, which bounds the weaker of
//!   the two reward components and is controlled by the gap adaptor `alpha`.
//!
//! All functions here are pure and safe to call from any thread.

use serde::Serialize;
use thiserror::Error;

/// Absolute tolerance under which `r_w` and `-alpha * r_l` count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MarginError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("log-ratios must be finite, got ({0}, {1})")]
    NonFiniteLogRatio(f64, f64),
    #[error("gap adaptor alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("balanced_margin requires a Balanced margin spec")]
    NotBalanced,
    #[error("unknown margin kind '{0}' (valid: relative, balanced)")]
    UnknownKind(String),
}

/// Per-example log-probability ratios plus the reward scale `beta`.
///
/// `logratio_w` is `log pi_theta(y_w|x) - log pi_ref(y_w|x)` in nats, and
/// `logratio_l` the same for the rejected response. Construction validates
/// that both ratios are finite and `beta > 0`, so downstream margin and loss
/// code never sees NaN or infinite rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardPair {
    logratio_w: f64,
    logratio_l: f64,
    beta: f64,
}

impl RewardPair {
    pub fn new(logratio_w: f64, logratio_l: f64, beta: f64) -> Result<Self, MarginError> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(MarginError::InvalidBeta(beta));
        }
        if !logratio_w.is_finite() || !logratio_l.is_finite() {
            return Err(MarginError::NonFiniteLogRatio(logratio_w, logratio_l));
        }
        Ok(Self {
            logratio_w,
            logratio_l,
            beta,
        })
    }

    pub fn logratio_w(&self) -> f64 {
        self.logratio_w
    }

    pub fn logratio_l(&self) -> f64 {
        self.logratio_l
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// The implicit rewards `(r_w, r_l) = (beta * logratio_w, beta * logratio_l)`.
    pub fn implicit_rewards(&self) -> (f64, f64) {
        (self.beta * self.logratio_w, self.beta * self.logratio_l)
    }

    /// The same pair with chosen and rejected swapped.
    pub fn swapped(&self) -> Self {
        Self {
            logratio_w: self.logratio_l,
            logratio_l: self.logratio_w,
            beta: self.beta,
        }
    }
}

/// Which margin a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MarginKind {
    Relative,
    Balanced,
}

impl MarginKind {
    pub fn name(&self) -> &'static str {
        match self {
            MarginKind::Relative => "relative",
            MarginKind::Balanced => "balanced",
        }
    }
}

impl std::fmt::Display for MarginKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MarginKind {
    type Err = MarginError;

    fn from_str(s: &str) -> Result<Self, MarginError> {
        match s {
            "relative" => Ok(MarginKind::Relative),
            "balanced" => Ok(MarginKind::Balanced),
            other => Err(MarginError::UnknownKind(other.to_string())),
        }
    }
}

/// Margin selection plus the gap adaptor `alpha in (0, 1]`.
///
/// `alpha` trades off suppression of the rejected response against
/// improvement of the chosen one; it is ignored by the relative margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginSpec {
    pub kind: MarginKind,
    alpha: f64,
}

impl MarginSpec {
    pub fn relative() -> Self {
        Self {
            kind: MarginKind::Relative,
            alpha: 1.0,
        }
    }

    pub fn balanced(alpha: f64) -> Result<Self, MarginError> {
        if !alpha.is_finite() || alpha <= 0.0 || alpha > 1.0 {
            return Err(MarginError::InvalidAlpha(alpha));
        }
        Ok(Self {
            kind: MarginKind::Balanced,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Which argument of `min(r_w, -alpha * r_l)` is active.
///
/// `Tie` is reported when the two sides agree within [`TIE_TOLERANCE`]; the
/// margin value and the gradient then follow the chosen-response side, and the
/// label is kept so either convention stays auditable in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MarginBranch {
    ChosenActive,
    RejectedActive,
    Tie,
}

/// The relative reward margin `r_w - r_l`.
pub fn relative_margin(pair: &RewardPair) -> f64 {
    let (r_w, r_l) = pair.implicit_rewards();
    r_w - r_l
}

/// The balanced reward margin `min(r_w, -alpha * r_l)` and its active branch.
///
/// Rejects a `Relative` spec: callers choosing the relative margin must use
/// [`relative_margin`]. At a tie the margin value equals `r_w`, so the
/// invariant "margin equals `r_w` iff branch is `ChosenActive` or `Tie`"
/// holds exactly.
pub fn balanced_margin(
    pair: &RewardPair,
    spec: &MarginSpec,
) -> Result<(f64, MarginBranch), MarginError> {
    if spec.kind != MarginKind::Balanced {
        return Err(MarginError::NotBalanced);
    }
    let (r_w, r_l) = pair.implicit_rewards();
    let guard = -spec.alpha * r_l;
    let out = if (r_w - guard).abs() <= TIE_TOLERANCE {
        (r_w, MarginBranch::Tie)
    } else if r_w < guard {
        (r_w, MarginBranch::ChosenActive)
    } else {
        (guard, MarginBranch::RejectedActive)
    };
    Ok(out)
}

/// The margin selected by `spec`: relative or balanced (value only).
pub fn margin_value(pair: &RewardPair, spec: &MarginSpec) -> f64 {
    match spec.kind {
        MarginKind::Relative => relative_margin(pair),
        MarginKind::Balanced => {
            balanced_margin(pair, spec)
                .expect("spec kind checked")
                .0
        }
    }
}
