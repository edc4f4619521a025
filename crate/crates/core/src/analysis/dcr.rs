//! Detection of chosen-reward decay in a training trace.
//!
//! Relative-margin training can push the chosen response's implicit reward
//! `r_w = beta * log(pi/pi_ref)` negative while the preference loss keeps
//! improving, because only the difference `r_w - r_l` matters to the
//! objective. The detector looks at the post-burn-in portion of a trace and
//! flags decay when the mean chosen reward there is negative or its
//! least-squares trend is downward.

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisError;
use crate::trainer::TrainingTrace;

/// Whether a trace exhibits chosen-reward decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DcrVerdict {
    /// Chosen rewards are falling or have gone negative.
    #[serde(rename = "DCR")]
    Dcr,
    /// Chosen rewards stay non-negative with a non-negative trend.
    #[serde(rename = "NoDCR")]
    NoDcr,
}

/// Decay diagnosis for one training trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcrReport {
    pub verdict: DcrVerdict,
    /// Mean chosen reward at the final recorded step.
    pub final_r_w: f64,
    /// Mean of `r_w_mean` over the post-burn-in window.
    pub window_mean_r_w: f64,
    /// Least-squares slope of `r_w_mean` against step index over the window.
    pub window_slope: f64,
    pub burn_in_fraction: f64,
    /// Number of records in the examined window.
    pub window_steps: usize,
}

/// Least-squares slope of `y` against `x`. Fewer than two points, or all `x`
/// equal, gives no trend information; that degenerates to slope zero rather
/// than an error so a short trace is judged on its mean alone.
fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - x_mean) * (x - x_mean);
        sxy += (x - x_mean) * (y - y_mean);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Examine the post-burn-in window of a trace for chosen-reward decay.
///
/// `burn_in_fraction` in `[0, 1)` is the leading portion of records to
/// ignore (early training is dominated by initialization transients). Decay
/// is declared when the window's mean chosen reward is negative or its
/// least-squares trend is downward.
pub fn dcr_detect(
    trace: &TrainingTrace,
    burn_in_fraction: f64,
) -> Result<DcrReport, AnalysisError> {
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(AnalysisError::BadBurnIn(burn_in_fraction));
    }
    if trace.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let records = trace.records();
    let n = records.len();
    let start = ((n as f64) * burn_in_fraction).floor() as usize;
    let start = start.min(n - 1); // the window keeps at least the final record
    let window = &records[start..];

    let xs: Vec<f64> = window.iter().map(|r| r.step as f64).collect();
    let ys: Vec<f64> = window.iter().map(|r| r.r_w_mean).collect();
    let window_mean_r_w = ys.iter().sum::<f64>() / ys.len() as f64;
    let window_slope = least_squares_slope(&xs, &ys);
    let final_r_w = records[n - 1].r_w_mean;

    let verdict = if window_mean_r_w < 0.0 || window_slope < 0.0 {
        DcrVerdict::Dcr
    } else {
        DcrVerdict::NoDcr
    };
    Ok(DcrReport {
        verdict,
        final_r_w,
        window_mean_r_w,
        window_slope,
        burn_in_fraction,
        window_steps: window.len(),
    })
}
