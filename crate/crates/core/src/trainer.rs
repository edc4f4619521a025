//! SGD preference training over pairwise losses, with full dynamics logging.
//!
//! Three step implementations share one chain rule, `grad = l'(z) * dz/dtheta`
//! with `z` the beta-scaled margin:
//!
//! * [`dpo_step`] — logistic loss on the relative margin. The per-pair
//!   gradient is `-sigmoid(-(r_w - r_l)) * beta * (g_w - g_l)`.
//! * [`bpo_step`] — logistic loss on the balanced margin. Each pair routes
//!   through exactly one response: `-sigmoid(-r_w) * beta * g_w` while the
//!   chosen reward is the smaller side (or at a tie), and
//!   `sigmoid(alpha * r_l) * alpha * beta * g_l` while the rejected side is.
//! * [`generic_step`] — any loss, either margin, via the derivative table.
//!   For the logistic loss it reproduces the two specializations bit for bit
//!   (the scalar coefficient is assembled with the same multiplication
//!   order), which the tests pin down.
//!
//! Batches aggregate by arithmetic mean in index order, updates are plain
//! SGD, and every step emits a [`StepRecord`]. Non-finite margins, losses,
//! or gradients abort with the step index and offending prompt rather than
//! being skipped, so loss-implementation bugs surface instead of washing
//! out in the mean.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PreferenceDataset;
use crate::loss::{loss_derivative, loss_value, sigmoid, LossError, LossKind, LossSpec};
use crate::margin::{
    balanced_margin, relative_margin, MarginBranch, MarginError, MarginKind, MarginSpec,
    RewardPair,
};
use crate::policy::{CandidateSet, PolicyError, PolicyModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("misconfigured step: {0}")]
    Misconfigured(String),
    #[error("learning rate must be finite and >= 0, got {0}")]
    InvalidLearningRate(f64),
    #[error("epochs must be >= 1")]
    ZeroEpochs,
    #[error("batch size must be >= 1")]
    ZeroBatchSize,
    #[error("take a reference snapshot before training")]
    NoSnapshot,
    #[error("non-finite {what} at step {step} (prompt '{prompt_id}')")]
    NonFinite {
        what: &'static str,
        step: usize,
        prompt_id: String,
    },
    #[error(transparent)]
    Margin(#[from] MarginError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("trace file {path}: {message}")]
    TraceIo { path: String, message: String },
}

/// Everything one optimization run needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub margin: MarginSpec,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    /// Defaults tuned for the toy scale: lr 0.1, 200 epochs, batches of 8,
    /// seeded shuffling on.
    pub fn new(loss: LossSpec, margin: MarginSpec) -> Self {
        Self {
            loss,
            margin,
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            shuffle: true,
        }
    }

    /// Zero is allowed so a no-op run can serve as a fixture; negative or
    /// non-finite rates are rejected.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidLearningRate(self.learning_rate));
        }
        if self.epochs == 0 {
            return Err(TrainError::ZeroEpochs);
        }
        if self.batch_size == 0 {
            return Err(TrainError::ZeroBatchSize);
        }
        Ok(())
    }
}

/// One optimizer step's logged dynamics. Field order is the trace CSV's
/// column order. Branch counts stay zero for relative-margin runs, which
/// have no branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub r_w_mean: f64,
    pub r_l_mean: f64,
    pub margin_mean: f64,
    pub loss_mean: f64,
    pub branch_chosen: usize,
    pub branch_rejected: usize,
    pub branch_tie: usize,
    pub grad_norm: f64,
}

/// One step record per optimizer step, in step order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingTrace {
    records: Vec<StepRecord>,
}

impl TrainingTrace {
    pub fn from_records(records: Vec<StepRecord>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The trace as CSV text (header + one row per step). Floats print in
    /// shortest round-trip form, so equal traces yield identical bytes.
    pub fn to_csv_string(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for record in &self.records {
            writer.serialize(record).expect("in-memory CSV write");
        }
        let bytes = writer.into_inner().expect("in-memory CSV flush");
        String::from_utf8(bytes).expect("CSV output is UTF-8")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| TrainError::TraceIo {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut reader = csv::Reader::from_path(path).map_err(|e| TrainError::TraceIo {
            path: display.clone(),
            message: e.to_string(),
        })?;
        let mut records = Vec::new();
        for row in reader.deserialize::<StepRecord>() {
            records.push(row.map_err(|e| TrainError::TraceIo {
                path: display.clone(),
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.records).expect("records serialize");
        std::fs::write(path, json).map_err(|e| TrainError::TraceIo {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// One pair's contribution: loss gradient w.r.t. the full parameter vector
/// plus the quantities the trace aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub grad: Vec<f64>,
    pub r_w: f64,
    pub r_l: f64,
    /// The beta-scaled margin `z` the loss saw.
    pub margin: f64,
    pub loss: f64,
    /// `None` for the relative margin, which has no branches.
    pub branch: Option<MarginBranch>,
}

struct PairEval {
    rp: RewardPair,
    grad_w: Vec<f64>,
    grad_l: Vec<f64>,
}

fn eval_pair(
    model: &PolicyModel,
    set: &CandidateSet,
    chosen_id: &str,
    rejected_id: &str,
    beta: f64,
) -> Result<PairEval, TrainError> {
    let w = model.grad_log_prob(set, chosen_id)?;
    let l = model.grad_log_prob(set, rejected_id)?;
    let logratio_w = w.logprob - model.reference_log_prob(set, chosen_id)?;
    let logratio_l = l.logprob - model.reference_log_prob(set, rejected_id)?;
    Ok(PairEval {
        rp: RewardPair::new(logratio_w, logratio_l, beta)?,
        grad_w: w.grad,
        grad_l: l.grad,
    })
}

/// Chain-rule gradient for any loss and either margin. For the logistic
/// loss this reproduces [`bpo_pair_gradient`] / [`dpo_pair_gradient`]
/// exactly.
pub fn generic_pair_gradient(
    model: &PolicyModel,
    set: &CandidateSet,
    chosen_id: &str,
    rejected_id: &str,
    loss: &LossSpec,
    margin: &MarginSpec,
) -> Result<PairGradient, TrainError> {
    let eval = eval_pair(model, set, chosen_id, rejected_id, loss.beta())?;
    let (r_w, r_l) = eval.rp.implicit_rewards();
    let beta = loss.beta();
    let (z, branch) = match margin.kind {
        MarginKind::Relative => (relative_margin(&eval.rp), None),
        MarginKind::Balanced => {
            let (z, b) = balanced_margin(&eval.rp, margin)?;
            (z, Some(b))
        }
    };
    let value = loss_value(loss, z)?;
    let l_prime = loss_derivative(loss, z)?;
    let grad = match branch {
        None => {
            let scale = l_prime * beta;
            eval.grad_w
                .iter()
                .zip(&eval.grad_l)
                .map(|(a, b)| scale * (a - b))
                .collect()
        }
        Some(MarginBranch::ChosenActive) | Some(MarginBranch::Tie) => {
            let scale = l_prime * beta;
            eval.grad_w.iter().map(|g| scale * g).collect()
        }
        Some(MarginBranch::RejectedActive) => {
            let scale = l_prime * (-(margin.alpha() * beta));
            eval.grad_l.iter().map(|g| scale * g).collect()
        }
    };
    Ok(PairGradient {
        grad,
        r_w,
        r_l,
        margin: z,
        loss: value,
        branch,
    })
}

/// Balanced-margin logistic gradient in its published two-case form: weight
/// `sigmoid(-r_w)` on the chosen response's log-probability gradient while
/// the chosen reward is the smaller side (ties included), weight
/// `sigmoid(alpha * r_l) * alpha` on the rejected response's otherwise.
pub fn bpo_pair_gradient(
    model: &PolicyModel,
    set: &CandidateSet,
    chosen_id: &str,
    rejected_id: &str,
    loss: &LossSpec,
    margin: &MarginSpec,
) -> Result<PairGradient, TrainError> {
    if margin.kind != MarginKind::Balanced {
        return Err(TrainError::Misconfigured(
            "bpo_step requires the balanced margin".into(),
        ));
    }
    if loss.kind != LossKind::LogisticLog {
        return Err(TrainError::Misconfigured(format!(
            "bpo_step requires the logistic_log loss, got {}",
            loss.kind
        )));
    }
    let eval = eval_pair(model, set, chosen_id, rejected_id, loss.beta())?;
    let (r_w, r_l) = eval.rp.implicit_rewards();
    let beta = loss.beta();
    let (z, branch) = balanced_margin(&eval.rp, margin)?;
    let value = loss_value(loss, z)?;
    let grad = match branch {
        MarginBranch::ChosenActive | MarginBranch::Tie => {
            let weight = sigmoid(-r_w);
            let coeff = -(weight * beta);
            eval.grad_w.iter().map(|g| coeff * g).collect()
        }
        MarginBranch::RejectedActive => {
            let weight = sigmoid(margin.alpha() * r_l);
            let coeff = weight * (margin.alpha() * beta);
            eval.grad_l.iter().map(|g| coeff * g).collect()
        }
    };
    Ok(PairGradient {
        grad,
        r_w,
        r_l,
        margin: z,
        loss: value,
        branch: Some(branch),
    })
}

/// Relative-margin logistic gradient in its published form: weight
/// `sigmoid(-(r_w - r_l))` on the difference of log-probability gradients.
pub fn dpo_pair_gradient(
    model: &PolicyModel,
    set: &CandidateSet,
    chosen_id: &str,
    rejected_id: &str,
    loss: &LossSpec,
    margin: &MarginSpec,
) -> Result<PairGradient, TrainError> {
    if margin.kind != MarginKind::Relative {
        return Err(TrainError::Misconfigured(
            "dpo_step requires the relative margin".into(),
        ));
    }
    if loss.kind != LossKind::LogisticLog {
        return Err(TrainError::Misconfigured(format!(
            "dpo_step requires the logistic_log loss, got {}",
            loss.kind
        )));
    }
    let eval = eval_pair(model, set, chosen_id, rejected_id, loss.beta())?;
    let (r_w, r_l) = eval.rp.implicit_rewards();
    let beta = loss.beta();
    let z = relative_margin(&eval.rp);
    let value = loss_value(loss, z)?;
    let weight = sigmoid(-z);
    let coeff = -(weight * beta);
    let grad = eval
        .grad_w
        .iter()
        .zip(&eval.grad_l)
        .map(|(a, b)| coeff * (a - b))
        .collect();
    Ok(PairGradient {
        grad,
        r_w,
        r_l,
        margin: z,
        loss: value,
        branch: None,
    })
}

type PairGradFn = fn(
    &PolicyModel,
    &CandidateSet,
    &str,
    &str,
    &LossSpec,
    &MarginSpec,
) -> Result<PairGradient, TrainError>;

/// Mean batch loss at the model's current parameters, without gradients.
/// This is the scalar the finite-difference audit probes.
pub fn batch_loss(
    model: &PolicyModel,
    dataset: &PreferenceDataset,
    batch: &[usize],
    loss: &LossSpec,
    margin: &MarginSpec,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Misconfigured("empty batch".into()));
    }
    let mut total = 0.0;
    for &i in batch {
        let pair = &dataset.pairs()[i];
        let set = dataset
            .set_for(&pair.prompt_id)
            .expect("dataset coverage invariant");
        let logratio_w = model.log_ratio(set, &pair.chosen_id)?;
        let logratio_l = model.log_ratio(set, &pair.rejected_id)?;
        let rp = RewardPair::new(logratio_w, logratio_l, loss.beta())?;
        let z = match margin.kind {
            MarginKind::Relative => relative_margin(&rp),
            MarginKind::Balanced => balanced_margin(&rp, margin)?.0,
        };
        total += loss_value(loss, z)?;
    }
    Ok(total / batch.len() as f64)
}

fn run_step(
    model: &mut PolicyModel,
    dataset: &PreferenceDataset,
    batch: &[usize],
    config: &TrainConfig,
    step: usize,
    pair_grad: PairGradFn,
) -> Result<StepRecord, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Misconfigured("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut mean_grad = vec![0.0; model.num_params()];
    let mut r_w_sum = 0.0;
    let mut r_l_sum = 0.0;
    let mut margin_sum = 0.0;
    let mut loss_sum = 0.0;
    let (mut chosen, mut rejected, mut tie) = (0usize, 0usize, 0usize);
    for &i in batch {
        let pair = &dataset.pairs()[i];
        let set = dataset
            .set_for(&pair.prompt_id)
            .expect("dataset coverage invariant");
        let pg = pair_grad(
            model,
            set,
            &pair.chosen_id,
            &pair.rejected_id,
            &config.loss,
            &config.margin,
        )?;
        let nonfinite = |what: &'static str| TrainError::NonFinite {
            what,
            step,
            prompt_id: pair.prompt_id.clone(),
        };
        if !pg.margin.is_finite() {
            return Err(nonfinite("margin"));
        }
        if !pg.loss.is_finite() {
            return Err(nonfinite("loss"));
        }
        if pg.grad.iter().any(|g| !g.is_finite()) {
            return Err(nonfinite("gradient"));
        }
        for (acc, g) in mean_grad.iter_mut().zip(&pg.grad) {
            *acc += g;
        }
        r_w_sum += pg.r_w;
        r_l_sum += pg.r_l;
        margin_sum += pg.margin;
        loss_sum += pg.loss;
        match pg.branch {
            Some(MarginBranch::ChosenActive) => chosen += 1,
            Some(MarginBranch::RejectedActive) => rejected += 1,
            Some(MarginBranch::Tie) => tie += 1,
            None => {}
        }
    }
    for g in &mut mean_grad {
        *g /= n;
    }
    let grad_norm = mean_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    model.apply_gradient_step(&mean_grad, config.learning_rate)?;
    Ok(StepRecord {
        step,
        r_w_mean: r_w_sum / n,
        r_l_mean: r_l_sum / n,
        margin_mean: margin_sum / n,
        loss_mean: loss_sum / n,
        branch_chosen: chosen,
        branch_rejected: rejected,
        branch_tie: tie,
        grad_norm,
    })
}

/// One balanced-margin logistic SGD step over `batch` (indices into the
/// dataset's pairs). Applies the mean gradient and returns the step record.
pub fn bpo_step(
    model: &mut PolicyModel,
    dataset: &PreferenceDataset,
    batch: &[usize],
    config: &TrainConfig,
    step: usize,
) -> Result<StepRecord, TrainError> {
    run_step(model, dataset, batch, config, step, bpo_pair_gradient)
}

/// One relative-margin logistic SGD step; see [`bpo_step`].
pub fn dpo_step(
    model: &mut PolicyModel,
    dataset: &PreferenceDataset,
    batch: &[usize],
    config: &TrainConfig,
    step: usize,
) -> Result<StepRecord, TrainError> {
    run_step(model, dataset, batch, config, step, dpo_pair_gradient)
}

/// One SGD step for any loss/margin combination; see [`bpo_step`].
pub fn generic_step(
    model: &mut PolicyModel,
    dataset: &PreferenceDataset,
    batch: &[usize],
    config: &TrainConfig,
    step: usize,
) -> Result<StepRecord, TrainError> {
    run_step(model, dataset, batch, config, step, generic_pair_gradient)
}

/// Run the full loop: per epoch, a seeded shuffle (if enabled) and
/// fixed-size batches in order. The logistic loss dispatches to the
/// specialized steps; everything else takes the generic path. An empty
/// dataset yields an empty trace. Requires a reference snapshot.
pub fn train(
    model: &mut PolicyModel,
    dataset: &PreferenceDataset,
    config: &TrainConfig,
) -> Result<TrainingTrace, TrainError> {
    config.validate()?;
    if !model.has_reference() {
        return Err(TrainError::NoSnapshot);
    }
    let mut trace = TrainingTrace::default();
    if dataset.is_empty() {
        return Ok(trace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let record = match (config.margin.kind, config.loss.kind) {
                (MarginKind::Balanced, LossKind::LogisticLog) => {
                    bpo_step(model, dataset, chunk, config, step)?
                }
                (MarginKind::Relative, LossKind::LogisticLog) => {
                    dpo_step(model, dataset, chunk, config, step)?
                }
                _ => generic_step(model, dataset, chunk, config, step)?,
            };
            trace.records.push(record);
            step += 1;
        }
    }
    Ok(trace)
}
