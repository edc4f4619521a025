//! Finite-difference audit of the analytic gradients.
//!
//! Every loss/margin combination routes through the same chain-rule gradient,
//! so one randomized check covers them all: jitter the parameters, pick a
//! pair and a coordinate, and compare the analytic partial derivative against
//! a central difference of the actual batch loss. Probes that land within an
//! exclusion radius of a non-differentiable point — the balanced margin's
//! `r_w = -alpha * r_l` crease or a loss kink — are skipped and retried,
//! since a two-sided difference straddling a kink measures nothing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::analysis::AnalysisError;
use crate::dataset::{generate_dcr_synthetic, PreferenceDataset};
use crate::loss::{LossKind, LossSpec};
use crate::margin::{MarginKind, MarginSpec};
use crate::policy::PolicyModel;
use crate::trainer::{batch_loss, generic_pair_gradient};

/// Standard deviation of the parameter jitter applied before each probe, so
/// successive probes see genuinely different operating points.
const PROBE_JITTER_SD: f64 = 0.5;

/// Attempt budget per requested probe before the audit gives up and reports
/// starvation instead of looping forever.
const STARVATION_FACTOR: usize = 200;

/// Below this magnitude the relative-error denominator is meaningless, so
/// the audit falls back to the absolute difference.
const ABS_ERR_FLOOR: f64 = 1e-8;

/// Knobs for one finite-difference audit run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditConfig {
    /// Valid (non-skipped) probes to collect.
    pub n_probes: usize,
    /// Half-width of the central difference.
    pub step: f64,
    /// Probes whose margin lands this close to a kink are skipped.
    pub exclusion_radius: f64,
    /// Maximum acceptable relative error.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            n_probes: 200,
            step: 1e-5,
            exclusion_radius: 1e-3,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl AuditConfig {
    fn validate(&self) -> Result<(), AnalysisError> {
        if self.n_probes == 0 {
            return Err(AnalysisError::NoProbes);
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(AnalysisError::BadAuditConfig(format!(
                "step must be positive and finite, got {}",
                self.step
            )));
        }
        if !(self.exclusion_radius.is_finite() && self.exclusion_radius >= 0.0) {
            return Err(AnalysisError::BadAuditConfig(format!(
                "exclusion radius must be finite and >= 0, got {}",
                self.exclusion_radius
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(AnalysisError::BadAuditConfig(format!(
                "tolerance must be positive and finite, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Audit outcome for one loss/margin combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComboAudit {
    pub loss: String,
    pub margin: String,
    pub alpha: f64,
    /// Valid probes measured.
    pub probes: usize,
    /// Probes discarded for landing inside an exclusion zone.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Audit outcome across every loss/margin combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub combos: Vec<ComboAudit>,
    pub pass: bool,
    pub max_rel_err: f64,
}

/// Compare analytic against finite-difference gradients for one loss/margin
/// combination on one model. The model's parameters are restored afterwards;
/// a reference snapshot must already be in place.
pub fn finite_difference_audit(
    model: &mut PolicyModel,
    dataset: &PreferenceDataset,
    loss: &LossSpec,
    margin: &MarginSpec,
    config: &AuditConfig,
) -> Result<ComboAudit, AnalysisError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(AnalysisError::BadAuditConfig(
            "the dataset has no pairs to probe".into(),
        ));
    }
    let saved = model.params().to_vec();
    let outcome = probe_loop(model, dataset, loss, margin, config, &saved);
    model.set_params(&saved)?;
    let (probes, skipped, max_rel_err) = outcome?;
    Ok(ComboAudit {
        loss: loss.kind.name().to_string(),
        margin: margin.kind.name().to_string(),
        alpha: margin.alpha(),
        probes,
        skipped,
        max_rel_err,
        pass: max_rel_err <= config.tolerance,
    })
}

/// The measurement loop, separated so the caller can restore the parameters
/// no matter how it exits.
fn probe_loop(
    model: &mut PolicyModel,
    dataset: &PreferenceDataset,
    loss: &LossSpec,
    margin: &MarginSpec,
    config: &AuditConfig,
    saved: &[f64],
) -> Result<(usize, usize, f64), AnalysisError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, PROBE_JITTER_SD).expect("fixed jitter parameters are valid");
    let mut probes = 0usize;
    let mut skipped = 0usize;
    let mut max_rel_err = 0.0f64;
    let max_attempts = config.n_probes.saturating_mul(STARVATION_FACTOR);
    let mut attempts = 0usize;
    while probes < config.n_probes {
        if attempts >= max_attempts {
            return Err(AnalysisError::ProbeStarvation {
                needed: config.n_probes,
                found: probes,
            });
        }
        attempts += 1;

        let probe: Vec<f64> = saved.iter().map(|p| p + noise.sample(&mut rng)).collect();
        let pair_index = rng.random_range(0..dataset.len());
        let pair = &dataset.pairs()[pair_index];
        let set = dataset
            .set_for(&pair.prompt_id)
            .expect("dataset coverage invariant");
        let coord = rng.random_range(model.active_param_range(set)?);

        model.set_params(&probe)?;
        let pg = generic_pair_gradient(
            model,
            set,
            &pair.chosen_id,
            &pair.rejected_id,
            loss,
            margin,
        )?;
        let near_crease = margin.kind == MarginKind::Balanced
            && (pg.r_w + margin.alpha() * pg.r_l).abs() <= config.exclusion_radius;
        let near_kink = loss
            .kind
            .nonsmooth_points()
            .iter()
            .any(|p| (pg.margin - p).abs() <= config.exclusion_radius);
        if near_crease || near_kink {
            skipped += 1;
            continue;
        }
        let analytic = pg.grad[coord];

        let batch = [pair_index];
        let mut shifted = probe;
        shifted[coord] += config.step;
        model.set_params(&shifted)?;
        let loss_plus = batch_loss(model, dataset, &batch, loss, margin)?;
        shifted[coord] -= 2.0 * config.step;
        model.set_params(&shifted)?;
        let loss_minus = batch_loss(model, dataset, &batch, loss, margin)?;
        let numeric = (loss_plus - loss_minus) / (2.0 * config.step);

        let denom = analytic.abs().max(numeric.abs());
        let err = if denom < ABS_ERR_FLOOR {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / denom
        };
        max_rel_err = max_rel_err.max(err);
        probes += 1;
    }
    Ok((probes, skipped, max_rel_err))
}

fn merge(a: ComboAudit, b: ComboAudit) -> ComboAudit {
    ComboAudit {
        loss: a.loss,
        margin: a.margin,
        alpha: a.alpha,
        probes: a.probes + b.probes,
        skipped: a.skipped + b.skipped,
        max_rel_err: a.max_rel_err.max(b.max_rel_err),
        pass: a.pass && b.pass,
    }
}

/// Audit every loss against both margins, on both policy parameterizations,
/// over a small synthetic dataset. Each of the twelve combinations is run on
/// a shared-feature model and a tabular model and the results merged, so one
/// report line covers both gradient code paths with `2 * n_probes_per_model`
/// probes.
pub fn audit_all_combinations(
    seed: u64,
    n_probes_per_model: usize,
) -> Result<AuditReport, AnalysisError> {
    let dataset = generate_dcr_synthetic(seed, 6, 4, 6)?;
    let mut shared = PolicyModel::shared_feature(4)?;
    shared.snapshot_reference();
    let mut tabular = PolicyModel::tabular(dataset.candidate_sets())?;
    tabular.snapshot_reference();

    let margins = [
        MarginSpec::relative(),
        MarginSpec::balanced(0.7).expect("0.7 is a valid alpha"),
    ];
    let mut combos = Vec::new();
    let mut combo_seed = seed;
    for kind in LossKind::ALL {
        let loss = LossSpec::new(kind, 0.3)?;
        for margin in &margins {
            let mut merged: Option<ComboAudit> = None;
            for model in [&mut shared, &mut tabular] {
                combo_seed = combo_seed.wrapping_add(1);
                let config = AuditConfig {
                    n_probes: n_probes_per_model,
                    seed: combo_seed,
                    ..AuditConfig::default()
                };
                let audit = finite_difference_audit(model, &dataset, &loss, margin, &config)?;
                merged = Some(match merged {
                    None => audit,
                    Some(m) => merge(m, audit),
                });
            }
            combos.push(merged.expect("both models audited"));
        }
    }
    let max_rel_err = combos.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let pass = combos.iter().all(|c| c.pass);
    Ok(AuditReport {
        combos,
        pass,
        max_rel_err,
    })
}
