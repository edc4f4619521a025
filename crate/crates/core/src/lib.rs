//! Desk-scale preference-optimization laboratory.
//!
//! Implements pairwise preference training with two reward-margin families —
//! the usual relative margin `r_w - r_l` and a balanced margin
//! `min(r_w, -alpha * r_l)` that keeps gradient pressure on whichever side of
//! the pair is currently worse — across six losses, two toy policy
//! parameterizations, a synthetic dataset generator that reproduces chosen
//! reward decay under relative-margin training, and diagnostics (gradient
//! fields, margin lower-bound verification, decay detection, and a
//! finite-difference gradient audit).

pub mod analysis;
pub mod dataset;
pub mod loss;
pub mod margin;
pub mod policy;
pub mod trainer;
