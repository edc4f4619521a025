//! Verification of the balanced margin's chosen-likelihood lower bound.
//!
//! The balanced margin is `min(r_w, -alpha * r_l)`, so a margin of at least
//! `gamma` forces `r_w >= gamma` directly — equivalently, the chosen
//! response's likelihood ratio satisfies
//! `pi(y_w|x) / pi_ref(y_w|x) >= e^(gamma/beta)`. The check is algebra, not
//! training luck: the implementation compares in log space where the
//! implication holds exactly (a balanced margin value is literally `r_w` or
//! a number no larger than it), with [`BOUND_TOLERANCE`] absorbing rounding
//! from unit conversions.
//!
//! Examples below the margin threshold are out of precondition: they are
//! counted as skipped, never as failures.

use serde::Serialize;

use crate::analysis::AnalysisError;
use crate::dataset::PreferenceDataset;
use crate::margin::{balanced_margin, MarginKind, MarginSpec, RewardPair};
use crate::policy::PolicyModel;
use crate::trainer::TrainingTrace;

/// Log-space slack for the bound comparison.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// One example's bound check. Log-space fields are always finite; the
/// ratio-space ones can overflow for stress inputs and then serialize as
/// null.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundObservation {
    /// Position in the input (pair index or trace step).
    pub index: usize,
    /// The balanced margin this example achieved.
    pub margin: f64,
    /// Whether the margin met the `gamma` precondition.
    pub qualifies: bool,
    /// `log(pi/pi_ref)` of the chosen response.
    pub actual_log_ratio: f64,
    /// The bound in log space: `gamma / beta`.
    pub required_log_ratio: f64,
    /// `e^actual` and `e^required`, for readers who want ratio space.
    pub actual_ratio: f64,
    pub required_ratio: f64,
    /// `None` when out of precondition.
    pub pass: Option<bool>,
}

/// Outcome of checking the bound over a set of examples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
    /// Examples that met the margin precondition.
    pub checked: usize,
    /// Examples below the margin threshold (not failures).
    pub skipped: usize,
    pub failures: usize,
    /// True iff no qualifying example violated the bound.
    pub pass: bool,
    pub observations: Vec<BoundObservation>,
}

impl BoundReport {
    fn new(gamma: f64, beta: f64, alpha: f64) -> Self {
        Self {
            gamma,
            beta,
            alpha,
            checked: 0,
            skipped: 0,
            failures: 0,
            pass: true,
            observations: Vec::new(),
        }
    }

    fn observe(&mut self, index: usize, margin: f64, actual_log: f64) {
        let required_log = self.gamma / self.beta;
        let qualifies = margin >= self.gamma;
        let pass = if qualifies {
            self.checked += 1;
            let ok = actual_log >= required_log - BOUND_TOLERANCE;
            if !ok {
                self.failures += 1;
                self.pass = false;
            }
            Some(ok)
        } else {
            self.skipped += 1;
            None
        };
        self.observations.push(BoundObservation {
            index,
            margin,
            qualifies,
            actual_log_ratio: actual_log,
            required_log_ratio: required_log,
            actual_ratio: actual_log.exp(),
            required_ratio: required_log.exp(),
            pass,
        });
    }
}

fn validate(spec: &MarginSpec, gamma: f64) -> Result<(), AnalysisError> {
    if spec.kind != MarginKind::Balanced {
        return Err(AnalysisError::NotBalanced);
    }
    if !gamma.is_finite() {
        return Err(AnalysisError::BadGamma(gamma));
    }
    Ok(())
}

/// Check the bound for explicit reward pairs. Each pair's balanced margin is
/// computed under `spec`; qualifying pairs must have
/// `logratio_w >= gamma/beta - tolerance`.
pub fn bound_check_pairs(
    pairs: &[RewardPair],
    spec: &MarginSpec,
    gamma: f64,
) -> Result<BoundReport, AnalysisError> {
    validate(spec, gamma)?;
    let beta = pairs.first().map_or(1.0, |p| p.beta());
    let mut report = BoundReport::new(gamma, beta, spec.alpha());
    for (i, pair) in pairs.iter().enumerate() {
        report.beta = pair.beta();
        let (margin, _) = balanced_margin(pair, spec)?;
        report.observe(i, margin, pair.logratio_w());
    }
    Ok(report)
}

/// Check the bound at the model's current parameters, one observation per
/// dataset pair. Requires a reference snapshot.
pub fn bound_check_model(
    model: &PolicyModel,
    dataset: &PreferenceDataset,
    spec: &MarginSpec,
    beta: f64,
    gamma: f64,
) -> Result<BoundReport, AnalysisError> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(AnalysisError::BadBeta(beta));
    }
    let mut pairs = Vec::with_capacity(dataset.len());
    for pair in dataset.pairs() {
        let set = dataset
            .set_for(&pair.prompt_id)
            .expect("dataset coverage invariant");
        let logratio_w = model.log_ratio(set, &pair.chosen_id)?;
        let logratio_l = model.log_ratio(set, &pair.rejected_id)?;
        pairs.push(RewardPair::new(logratio_w, logratio_l, beta)?);
    }
    bound_check_pairs(&pairs, spec, gamma)
}

/// Check the bound over a trace's per-step batch means. The per-pair
/// implication survives averaging because each pair's margin is at most its
/// chosen reward and floating-point addition is monotone, so
/// `margin_mean <= r_w_mean` holds exactly.
pub fn bound_check_trace(
    trace: &TrainingTrace,
    spec: &MarginSpec,
    beta: f64,
    gamma: f64,
) -> Result<BoundReport, AnalysisError> {
    validate(spec, gamma)?;
    if !beta.is_finite() || beta <= 0.0 {
        return Err(AnalysisError::BadBeta(beta));
    }
    if trace.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let mut report = BoundReport::new(gamma, beta, spec.alpha());
    for record in trace.records() {
        report.observe(record.step, record.margin_mean, record.r_w_mean / beta);
    }
    Ok(report)
}

/// The minimum mean margin over the trace's trailing window — the natural
/// `gamma` for post-training verification. `window_fraction` is the portion
/// of steps in the window, in `(0, 1]`; the window always holds at least one
/// record.
pub fn trailing_min_margin(
    trace: &TrainingTrace,
    window_fraction: f64,
) -> Result<f64, AnalysisError> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(AnalysisError::BadWindow(window_fraction));
    }
    if trace.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let n = trace.len();
    let count = ((n as f64 * window_fraction).ceil() as usize).clamp(1, n);
    Ok(trace.records()[n - count..]
        .iter()
        .map(|r| r.margin_mean)
        .fold(f64::INFINITY, f64::min))
}
