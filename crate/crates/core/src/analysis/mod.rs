//! Diagnostics over losses, margins, and training traces: gradient fields,
//! the chosen-likelihood lower-bound check, decay detection, and the
//! finite-difference gradient audit.

mod audit;
mod bound;
mod dcr;
mod field;

pub use audit::{
    audit_all_combinations, finite_difference_audit, AuditConfig, AuditReport, ComboAudit,
};
pub use bound::{
    bound_check_model, bound_check_pairs, bound_check_trace, trailing_min_margin,
    BoundObservation, BoundReport, BOUND_TOLERANCE,
};
pub use dcr::{dcr_detect, DcrReport, DcrVerdict};
pub use field::{
    gradient_field, low_gradient_fraction, summarize_field, FieldSummary, GradientField,
    GridBounds,
};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::loss::LossError;
use crate::margin::MarginError;
use crate::policy::PolicyError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("grid bounds must be finite with min < max, got [{0}, {1}]")]
    BadBounds(f64, f64),
    #[error("grid resolution must be at least 2 per axis, got {0}")]
    BadResolution(usize),
    #[error("epsilon must be finite and >= 0, got {0}")]
    BadEpsilon(f64),
    #[error("burn-in fraction must be in [0, 1), got {0}")]
    BadBurnIn(f64),
    #[error("window fraction must be in (0, 1], got {0}")]
    BadWindow(f64),
    #[error("the trace is empty")]
    EmptyTrace,
    #[error("gamma must be finite, got {0}")]
    BadGamma(f64),
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("the bound check applies to the balanced margin only")]
    NotBalanced,
    #[error("the audit needs at least one probe")]
    NoProbes,
    #[error("bad audit configuration: {0}")]
    BadAuditConfig(String),
    #[error("audit found only {found} of {needed} usable probes; widen the dataset or shrink the exclusion radius")]
    ProbeStarvation { needed: usize, found: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Margin(#[from] MarginError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("failed to write {path}: {message}")]
    Io { path: String, message: String },
}
