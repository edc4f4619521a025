//! Loss-gradient magnitude over a grid of reward coordinates.
//!
//! The grid lives in reward space: a cell at `(x1, x2)` is a hypothetical
//! pair with implicit rewards `(r_w, r_l) = (x1, x2)` (already beta-scaled,
//! so the loss consumes the margin of the coordinates directly). The cell
//! value is `|grad ell(z(x1, x2))|` with respect to `(x1, x2)`:
//!
//! * relative margin: `z = x1 - x2`, both partials are `+-l'(z)`, magnitude
//!   `|l'(z)| * sqrt(2)`;
//! * balanced margin: only the active branch's coordinate carries gradient —
//!   `|l'(x1)|` while the chosen side is active (ties included),
//!   `alpha * |l'(-alpha * x2)|` while the rejected side is.
//!
//! [`low_gradient_fraction`] then measures how much of the grid sits below a
//! magnitude threshold — the quantity that separates the two margins'
//! saturation behavior.

use std::path::Path;

use serde::Serialize;

use crate::analysis::AnalysisError;
use crate::loss::{loss_derivative, LossSpec};
use crate::margin::{balanced_margin, MarginBranch, MarginKind, MarginSpec, RewardPair};

/// One range applied to both grid axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridBounds {
    min: f64,
    max: f64,
}

impl GridBounds {
    pub fn new(min: f64, max: f64) -> Result<Self, AnalysisError> {
        if !min.is_finite() || !max.is_finite() || min >= max {
            return Err(AnalysisError::BadBounds(min, max));
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }
}

/// Gradient magnitudes over a `resolution x resolution` grid, stored
/// row-major with `x1` as the outer (row) axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    loss: LossSpec,
    margin: MarginSpec,
    bounds: GridBounds,
    resolution: usize,
    magnitudes: Vec<f64>,
}

impl GradientField {
    pub fn loss(&self) -> &LossSpec {
        &self.loss
    }

    pub fn margin(&self) -> &MarginSpec {
        &self.margin
    }

    pub fn bounds(&self) -> GridBounds {
        self.bounds
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    /// The axis coordinate of grid index `k` (same spacing on both axes).
    pub fn coordinate(&self, k: usize) -> f64 {
        let span = self.bounds.max - self.bounds.min;
        self.bounds.min + k as f64 * span / (self.resolution - 1) as f64
    }

    pub fn magnitude_at(&self, i1: usize, i2: usize) -> f64 {
        self.magnitudes[i1 * self.resolution + i2]
    }

    /// The field as `x1,x2,magnitude` CSV, rows in row-major grid order.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("x1,x2,magnitude\n");
        for i1 in 0..self.resolution {
            let x1 = self.coordinate(i1);
            for i2 in 0..self.resolution {
                let x2 = self.coordinate(i2);
                let mag = self.magnitude_at(i1, i2);
                out.push_str(&format!("{x1},{x2},{mag}\n"));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), AnalysisError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| AnalysisError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn cell_magnitude(loss: &LossSpec, margin: &MarginSpec, x1: f64, x2: f64) -> Result<f64, AnalysisError> {
    match margin.kind {
        MarginKind::Relative => {
            let l_prime = loss_derivative(loss, x1 - x2)?;
            Ok(l_prime.abs() * std::f64::consts::SQRT_2)
        }
        MarginKind::Balanced => {
            // beta = 1 keeps the pair's implicit rewards equal to the raw
            // grid coordinates
            let rp = RewardPair::new(x1, x2, 1.0)?;
            let (z, branch) = balanced_margin(&rp, margin)?;
            let l_prime = loss_derivative(loss, z)?;
            Ok(match branch {
                MarginBranch::ChosenActive | MarginBranch::Tie => l_prime.abs(),
                MarginBranch::RejectedActive => margin.alpha() * l_prime.abs(),
            })
        }
    }
}

/// Evaluate the loss-gradient magnitude on every cell of the grid.
pub fn gradient_field(
    loss: &LossSpec,
    margin: &MarginSpec,
    bounds: GridBounds,
    resolution: usize,
) -> Result<GradientField, AnalysisError> {
    if resolution < 2 {
        return Err(AnalysisError::BadResolution(resolution));
    }
    let mut field = GradientField {
        loss: *loss,
        margin: *margin,
        bounds,
        resolution,
        magnitudes: Vec::with_capacity(resolution * resolution),
    };
    for i1 in 0..resolution {
        let x1 = field.coordinate(i1);
        for i2 in 0..resolution {
            let x2 = field.coordinate(i2);
            field.magnitudes.push(cell_magnitude(loss, margin, x1, x2)?);
        }
    }
    Ok(field)
}

/// The fraction of grid cells with magnitude strictly below `epsilon`.
pub fn low_gradient_fraction(field: &GradientField, epsilon: f64) -> Result<f64, AnalysisError> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(AnalysisError::BadEpsilon(epsilon));
    }
    let low = field.magnitudes.iter().filter(|&&m| m < epsilon).count();
    Ok(low as f64 / field.magnitudes.len() as f64)
}

/// Plot-ready summary of one field at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSummary {
    pub loss: String,
    pub margin: String,
    pub alpha: f64,
    pub beta: f64,
    pub bounds_min: f64,
    pub bounds_max: f64,
    pub resolution: usize,
    pub epsilon: f64,
    pub low_gradient_fraction: f64,
    pub max_magnitude: f64,
}

pub fn summarize_field(field: &GradientField, epsilon: f64) -> Result<FieldSummary, AnalysisError> {
    Ok(FieldSummary {
        loss: field.loss.kind.name().to_string(),
        margin: field.margin.kind.name().to_string(),
        alpha: field.margin.alpha(),
        beta: field.loss.beta(),
        bounds_min: field.bounds.min,
        bounds_max: field.bounds.max,
        resolution: field.resolution,
        epsilon,
        low_gradient_fraction: low_gradient_fraction(field, epsilon)?,
        max_magnitude: field
            .magnitudes
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{sigmoid, LossKind};

    fn spec(kind: LossKind) -> LossSpec {
        LossSpec::new(kind, 1.0).unwrap()
    }

    fn logistic() -> LossSpec {
        spec(LossKind::LogisticLog)
    }

    #[test]
    fn relative_cell_magnitude_matches_closed_form() {
        // grid coords -2, 0, 2; cell (2, -2) has z = 4
        let bounds = GridBounds::new(-2.0, 2.0).unwrap();
        let field = gradient_field(&logistic(), &MarginSpec::relative(), bounds, 3).unwrap();
        let expected = sigmoid(-4.0) * std::f64::consts::SQRT_2;
        assert!((field.magnitude_at(2, 0) - expected).abs() < 1e-15);
        assert!((sigmoid(-4.0) - 0.0180).abs() < 1e-4);
    }

    #[test]
    fn balanced_cell_magnitude_uses_single_partial() {
        let bounds = GridBounds::new(-2.0, 2.0).unwrap();
        let margin = MarginSpec::balanced(1.0).unwrap();
        let field = gradient_field(&logistic(), &margin, bounds, 3).unwrap();
        // at (2, -2) both sides of the min equal 2: one active coordinate
        let expected = sigmoid(-2.0);
        assert!((field.magnitude_at(2, 0) - expected).abs() < 1e-15);
        assert!((expected - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn rejected_branch_scales_by_alpha() {
        let bounds = GridBounds::new(-4.0, 4.0).unwrap();
        let margin = MarginSpec::balanced(0.5).unwrap();
        let field = gradient_field(&logistic(), &margin, bounds, 3).unwrap();
        // cell (4, -4): guard = 2 < r_w = 4, rejected active, z = 2
        let expected = 0.5 * sigmoid(-2.0);
        assert!((field.magnitude_at(2, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn saturating_losses_vanish_at_large_margins() {
        // the squared loss is the exception: its derivative grows with z.
        // bounds stay inside the exponential loss's clamp-free range so this
        // test leaves the process-wide clamp counter alone
        let bounds = GridBounds::new(-14.0, 14.0).unwrap();
        for kind in [
            LossKind::LogisticLog,
            LossKind::Hinge,
            LossKind::Exponential,
            LossKind::TruncatedQuadratic,
            LossKind::Savage,
        ] {
            for margin in [MarginSpec::relative(), MarginSpec::balanced(1.0).unwrap()] {
                let field = gradient_field(&spec(kind), &margin, bounds, 4).unwrap();
                // corner (14, -14): relative z = 28, balanced z = 14
                let corner = field.magnitude_at(3, 0);
                assert!(corner < 1e-4, "{kind}/{} corner {corner}", margin.kind);
            }
        }
    }

    #[test]
    fn relative_field_is_constant_along_diagonals() {
        let bounds = GridBounds::new(-5.0, 5.0).unwrap();
        for kind in LossKind::ALL {
            let field = gradient_field(&spec(kind), &MarginSpec::relative(), bounds, 21).unwrap();
            let res = field.resolution();
            // cells with equal i1 - i2 share x1 - x2
            for d in -(res as isize - 1)..=(res as isize - 1) {
                let values: Vec<f64> = (0..res)
                    .filter_map(|i1| {
                        let i2 = i1 as isize - d;
                        (0..res as isize)
                            .contains(&i2)
                            .then(|| field.magnitude_at(i1, i2 as usize))
                    })
                    .collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let var =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
                assert!(var < 1e-12, "{kind} diagonal {d} variance {var}");
            }
        }
    }

    #[test]
    fn fraction_extremes_and_monotonicity() {
        let bounds = GridBounds::new(-5.0, 5.0).unwrap();
        let field = gradient_field(&logistic(), &MarginSpec::relative(), bounds, 31).unwrap();
        assert_eq!(low_gradient_fraction(&field, 0.0).unwrap(), 0.0);
        let max = field.magnitudes().iter().cloned().fold(0.0, f64::max);
        assert_eq!(low_gradient_fraction(&field, max + 1.0).unwrap(), 1.0);
        let mut prev = 0.0;
        for i in 0..40 {
            let eps = i as f64 * 0.05;
            let f = low_gradient_fraction(&field, eps).unwrap();
            assert!(f >= prev, "fraction decreased at eps={eps}");
            prev = f;
        }
    }

    #[test]
    fn balanced_margin_shrinks_the_low_gradient_region() {
        let bounds = GridBounds::new(-5.0, 5.0).unwrap();
        let relative = gradient_field(&logistic(), &MarginSpec::relative(), bounds, 101).unwrap();
        let balanced = gradient_field(
            &logistic(),
            &MarginSpec::balanced(1.0).unwrap(),
            bounds,
            101,
        )
        .unwrap();
        let f_rel = low_gradient_fraction(&relative, 0.05).unwrap();
        let f_bal = low_gradient_fraction(&balanced, 0.05).unwrap();
        assert!(
            f_bal < f_rel,
            "balanced fraction {f_bal} should be below relative fraction {f_rel}"
        );
    }

    #[test]
    fn csv_layout_and_summary() {
        let bounds = GridBounds::new(0.0, 1.0).unwrap();
        let field = gradient_field(&logistic(), &MarginSpec::relative(), bounds, 2).unwrap();
        let csv = field.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "x1,x2,magnitude");
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[4].starts_with("1,1,"));

        let summary = summarize_field(&field, 0.05).unwrap();
        assert_eq!(summary.loss, "logistic_log");
        assert_eq!(summary.margin, "relative");
        assert_eq!(summary.resolution, 2);
        assert!(summary.max_magnitude > 0.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(GridBounds::new(1.0, 1.0).is_err());
        assert!(GridBounds::new(2.0, -2.0).is_err());
        assert!(GridBounds::new(f64::NAN, 1.0).is_err());
        let bounds = GridBounds::new(-1.0, 1.0).unwrap();
        assert!(matches!(
            gradient_field(&logistic(), &MarginSpec::relative(), bounds, 1),
            Err(AnalysisError::BadResolution(1))
        ));
        let field = gradient_field(&logistic(), &MarginSpec::relative(), bounds, 2).unwrap();
        assert!(matches!(
            low_gradient_fraction(&field, -0.1),
            Err(AnalysisError::BadEpsilon(_))
        ));
    }
}
