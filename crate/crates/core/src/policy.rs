//! Small differentiable policies over finite per-prompt candidate sets.
//!
//! Two parameterizations, both softmax-normalized over a prompt's candidates:
//!
//! * **Tabular** — one free logit per (prompt, candidate). Each prompt's
//!   block is independent, so suppressing one response cannot leak
//!   probability mass into other prompts' candidates.
//! * **SharedFeature** — a single weight vector `theta` of dimension `d`
//!   scores every candidate as `theta . phi(y)`. Parameter sharing is what
//!   lets training on one pair move the scores of out-of-distribution
//!   candidates, which is the failure mechanism the synthetic datasets
//!   exercise.
//!
//! Gradients of `log pi(y|x)` are exact: `onehot(y) - pi` within a tabular
//! block, `phi(y) - E_pi[phi]` for shared features. A frozen reference
//! snapshot supplies the denominator of log-ratios; training never mutates
//! it.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("candidate set '{0}' needs at least 2 candidates, got {1}")]
    TooFewCandidates(String, usize),
    #[error("candidate set '{prompt_id}' repeats response id '{response_id}'")]
    DuplicateResponse {
        prompt_id: String,
        response_id: String,
    },
    #[error("candidate set '{prompt_id}' has {candidates} candidates but {features} feature vectors")]
    FeatureCountMismatch {
        prompt_id: String,
        candidates: usize,
        features: usize,
    },
    #[error("candidate set '{prompt_id}' mixes feature dimensions {expected} and {got}")]
    FeatureDimMismatch {
        prompt_id: String,
        expected: usize,
        got: usize,
    },
    #[error("candidate set '{0}' contains a non-finite feature value")]
    NonFiniteFeature(String),
    #[error("response '{response_id}' is not in candidate set '{prompt_id}'")]
    UnknownResponse {
        prompt_id: String,
        response_id: String,
    },
    #[error("prompt '{0}' is not in this tabular policy's layout")]
    UnknownPrompt(String),
    #[error("candidate set '{prompt_id}' has {got} candidates but the tabular layout allocated {expected}")]
    LayoutMismatch {
        prompt_id: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate prompt id '{0}' while building the tabular layout")]
    DuplicatePrompt(String),
    #[error("a tabular policy needs at least one candidate set")]
    EmptyLayout,
    #[error("candidate set '{0}' carries no features; the shared-feature policy requires them")]
    MissingFeatures(String),
    #[error("feature dimension {got} does not match the policy's dimension {expected}")]
    PolicyDimMismatch { expected: usize, got: usize },
    #[error("shared-feature dimension must be at least 1")]
    ZeroDim,
    #[error("no reference snapshot; call snapshot_reference before computing log-ratios")]
    NoReference,
    #[error("parameter vector length {got} does not match the policy's {expected} parameters")]
    ParamLength { expected: usize, got: usize },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
}

/// A prompt's finite response support: ordered candidate ids and, optionally,
/// one feature vector per candidate (required by the shared-feature policy).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    prompt_id: String,
    candidates: Vec<String>,
    features: Option<Vec<Vec<f64>>>,
}

impl CandidateSet {
    pub fn new(
        prompt_id: impl Into<String>,
        candidates: Vec<String>,
        features: Option<Vec<Vec<f64>>>,
    ) -> Result<Self, PolicyError> {
        let prompt_id = prompt_id.into();
        if candidates.len() < 2 {
            return Err(PolicyError::TooFewCandidates(prompt_id, candidates.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &candidates {
            if !seen.insert(id) {
                return Err(PolicyError::DuplicateResponse {
                    prompt_id,
                    response_id: id.clone(),
                });
            }
        }
        if let Some(feats) = &features {
            if feats.len() != candidates.len() {
                return Err(PolicyError::FeatureCountMismatch {
                    prompt_id,
                    candidates: candidates.len(),
                    features: feats.len(),
                });
            }
            let d = feats[0].len();
            for row in feats {
                if row.len() != d {
                    return Err(PolicyError::FeatureDimMismatch {
                        prompt_id,
                        expected: d,
                        got: row.len(),
                    });
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(PolicyError::NonFiniteFeature(prompt_id));
                }
            }
        }
        Ok(Self {
            prompt_id,
            candidates,
            features,
        })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.as_ref().map(|f| f[0].len())
    }

    pub fn index_of(&self, response_id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c == response_id)
    }

    fn require_index(&self, response_id: &str) -> Result<usize, PolicyError> {
        self.index_of(response_id)
            .ok_or_else(|| PolicyError::UnknownResponse {
                prompt_id: self.prompt_id.clone(),
                response_id: response_id.to_string(),
            })
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct CandidateRow {
    prompt_id: String,
    candidates: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

/// Load candidate sets from JSONL, one prompt per line with fields
/// `prompt_id`, `candidates`, and optional `features`. Order is preserved.
pub fn read_candidates_jsonl(path: impl AsRef<Path>) -> Result<Vec<CandidateSet>, PolicyError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| PolicyError::Io {
        path: display.clone(),
        source,
    })?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PolicyError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CandidateRow =
            serde_json::from_str(&line).map_err(|e| PolicyError::MalformedLine {
                path: display.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        sets.push(CandidateSet::new(row.prompt_id, row.candidates, row.features)?);
    }
    Ok(sets)
}

/// Write candidate sets as JSONL in the same schema `read_candidates_jsonl`
/// accepts.
pub fn write_candidates_jsonl(
    path: impl AsRef<Path>,
    sets: &[CandidateSet],
) -> Result<(), PolicyError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let io_err = |source| PolicyError::Io {
        path: display.clone(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    for set in sets {
        let row = CandidateRow {
            prompt_id: set.prompt_id.clone(),
            candidates: set.candidates.clone(),
            features: set.features.clone(),
        };
        let json = serde_json::to_string(&row).expect("candidate rows serialize");
        writeln!(file, "{json}").map_err(|source| PolicyError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PolicyKind {
    Tabular,
    SharedFeature,
}

/// A log-probability together with its gradient with respect to the policy's
/// full parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbWithGrad {
    pub logprob: f64,
    pub grad: Vec<f64>,
}

/// A softmax policy over per-prompt candidate sets, with an optional frozen
/// reference copy of the parameters for log-ratio computation.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyModel {
    kind: PolicyKind,
    params: Vec<f64>,
    reference_params: Option<Vec<f64>>,
    /// Tabular only: prompt id -> (offset, block length) into `params`.
    layout: BTreeMap<String, (usize, usize)>,
}

impl PolicyModel {
    /// A tabular policy with one zero-initialized logit per candidate of
    /// every given set. Evaluation later accepts only prompts laid out here.
    pub fn tabular(sets: &[CandidateSet]) -> Result<Self, PolicyError> {
        if sets.is_empty() {
            return Err(PolicyError::EmptyLayout);
        }
        let mut layout = BTreeMap::new();
        let mut offset = 0usize;
        for set in sets {
            if layout
                .insert(set.prompt_id.clone(), (offset, set.len()))
                .is_some()
            {
                return Err(PolicyError::DuplicatePrompt(set.prompt_id.clone()));
            }
            offset += set.len();
        }
        Ok(Self {
            kind: PolicyKind::Tabular,
            params: vec![0.0; offset],
            reference_params: None,
            layout,
        })
    }

    /// A shared-feature policy with a zero-initialized weight vector of
    /// dimension `d`.
    pub fn shared_feature(d: usize) -> Result<Self, PolicyError> {
        if d == 0 {
            return Err(PolicyError::ZeroDim);
        }
        Ok(Self {
            kind: PolicyKind::SharedFeature,
            params: vec![0.0; d],
            reference_params: None,
            layout: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn has_reference(&self) -> bool {
        self.reference_params.is_some()
    }

    /// Overwrite the parameter vector (used by finite-difference probing).
    pub fn set_params(&mut self, params: &[f64]) -> Result<(), PolicyError> {
        if params.len() != self.params.len() {
            return Err(PolicyError::ParamLength {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// One SGD step: `theta <- theta - lr * grad`, elementwise.
    pub fn apply_gradient_step(&mut self, grad: &[f64], lr: f64) -> Result<(), PolicyError> {
        if grad.len() != self.params.len() {
            return Err(PolicyError::ParamLength {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// Freeze the current parameters as the reference policy. Calling again
    /// overwrites the previous snapshot.
    pub fn snapshot_reference(&mut self) {
        self.reference_params = Some(self.params.clone());
    }

    /// The slice of parameter indices that can affect the given set's
    /// probabilities: the prompt's logit block for tabular policies, the
    /// whole weight vector for shared features.
    pub fn active_param_range(&self, set: &CandidateSet) -> Result<Range<usize>, PolicyError> {
        match self.kind {
            PolicyKind::Tabular => {
                let (offset, len) = self.block(set)?;
                Ok(offset..offset + len)
            }
            PolicyKind::SharedFeature => Ok(0..self.params.len()),
        }
    }

    fn block(&self, set: &CandidateSet) -> Result<(usize, usize), PolicyError> {
        let &(offset, len) = self
            .layout
            .get(&set.prompt_id)
            .ok_or_else(|| PolicyError::UnknownPrompt(set.prompt_id.clone()))?;
        if len != set.len() {
            return Err(PolicyError::LayoutMismatch {
                prompt_id: set.prompt_id.clone(),
                expected: len,
                got: set.len(),
            });
        }
        Ok((offset, len))
    }

    /// Per-candidate unnormalized scores under an arbitrary parameter slice.
    fn scores(&self, params: &[f64], set: &CandidateSet) -> Result<Vec<f64>, PolicyError> {
        match self.kind {
            PolicyKind::Tabular => {
                let (offset, len) = self.block(set)?;
                Ok(params[offset..offset + len].to_vec())
            }
            PolicyKind::SharedFeature => {
                let feats = set
                    .features()
                    .ok_or_else(|| PolicyError::MissingFeatures(set.prompt_id.clone()))?;
                let d = feats[0].len();
                if d != params.len() {
                    return Err(PolicyError::PolicyDimMismatch {
                        expected: params.len(),
                        got: d,
                    });
                }
                Ok(feats
                    .iter()
                    .map(|phi| phi.iter().zip(params).map(|(a, b)| a * b).sum())
                    .collect())
            }
        }
    }

    pub fn log_prob(&self, set: &CandidateSet, response_id: &str) -> Result<f64, PolicyError> {
        let idx = set.require_index(response_id)?;
        let scores = self.scores(&self.params, set)?;
        Ok(scores[idx] - log_sum_exp(&scores))
    }

    /// `log pi_ref(y|x)` under the frozen snapshot.
    pub fn reference_log_prob(
        &self,
        set: &CandidateSet,
        response_id: &str,
    ) -> Result<f64, PolicyError> {
        let reference = self.reference_params.as_ref().ok_or(PolicyError::NoReference)?;
        let idx = set.require_index(response_id)?;
        let scores = self.scores(reference, set)?;
        Ok(scores[idx] - log_sum_exp(&scores))
    }

    /// `log pi(y|x) - log pi_ref(y|x)`; requires a snapshot.
    pub fn log_ratio(&self, set: &CandidateSet, response_id: &str) -> Result<f64, PolicyError> {
        Ok(self.log_prob(set, response_id)? - self.reference_log_prob(set, response_id)?)
    }

    /// Log-probability and its exact gradient with respect to the full
    /// parameter vector. Coordinates outside the prompt's tabular block are
    /// zero.
    pub fn grad_log_prob(
        &self,
        set: &CandidateSet,
        response_id: &str,
    ) -> Result<LogProbWithGrad, PolicyError> {
        let idx = set.require_index(response_id)?;
        let scores = self.scores(&self.params, set)?;
        let lse = log_sum_exp(&scores);
        let probs: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
        let mut grad = vec![0.0; self.params.len()];
        match self.kind {
            PolicyKind::Tabular => {
                let (offset, _) = self.block(set)?;
                for (i, p) in probs.iter().enumerate() {
                    grad[offset + i] = if i == idx { 1.0 - p } else { -p };
                }
            }
            PolicyKind::SharedFeature => {
                let feats = set.features().expect("scores() checked features");
                for (phi, p) in feats.iter().zip(&probs) {
                    for (g, x) in grad.iter_mut().zip(phi) {
                        *g -= p * x;
                    }
                }
                for (g, x) in grad.iter_mut().zip(&feats[idx]) {
                    *g += x;
                }
            }
        }
        Ok(LogProbWithGrad {
            logprob: scores[idx] - lse,
            grad,
        })
    }
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("y{i}")).collect()
    }

    fn plain_set(prompt: &str, n: usize) -> CandidateSet {
        CandidateSet::new(prompt, ids(n), None).unwrap()
    }

    fn feature_set(prompt: &str, feats: Vec<Vec<f64>>) -> CandidateSet {
        let n = feats.len();
        CandidateSet::new(prompt, ids(n), Some(feats)).unwrap()
    }

    #[test]
    fn tabular_uniform_over_four() {
        let set = plain_set("p", 4);
        let model = PolicyModel::tabular(std::slice::from_ref(&set)).unwrap();
        let lp = model.log_prob(&set, "y2").unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shared_zero_params_is_uniform() {
        let set = feature_set("p", vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 0.0]]);
        let model = PolicyModel::shared_feature(2).unwrap();
        for id in set.candidates() {
            let lp = model.log_prob(&set, id).unwrap();
            assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_two_candidate_logit_value() {
        let set = feature_set("p", vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let mut model = PolicyModel::shared_feature(2).unwrap();
        model.set_params(&[1.0, 0.0]).unwrap();
        let lp = model.log_prob(&set, "y0").unwrap();
        let expected = (std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((lp - expected).abs() < 1e-12);
        assert!((lp - -0.31326).abs() < 1e-5);
    }

    #[test]
    fn tabular_uniform_gradient() {
        let set = plain_set("p", 2);
        let model = PolicyModel::tabular(std::slice::from_ref(&set)).unwrap();
        let out = model.grad_log_prob(&set, "y0").unwrap();
        assert_eq!(out.grad, vec![0.5, -0.5]);
        assert!((out.logprob - 0.5f64.ln()).abs() < 1e-12);
    }

    fn random_tabular(rng: &mut ChaCha8Rng, n: usize) -> (CandidateSet, PolicyModel) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let set = plain_set("p", n);
        let mut model = PolicyModel::tabular(std::slice::from_ref(&set)).unwrap();
        let params: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        model.set_params(&params).unwrap();
        (set, model)
    }

    fn random_shared(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (CandidateSet, PolicyModel) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| normal.sample(rng)).collect())
            .collect();
        let set = feature_set("p", feats);
        let mut model = PolicyModel::shared_feature(d).unwrap();
        let params: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        model.set_params(&params).unwrap();
        (set, model)
    }

    #[test]
    fn probabilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            for (set, model) in [random_tabular(&mut rng, 5), random_shared(&mut rng, 6, 3)] {
                let total: f64 = set
                    .candidates()
                    .iter()
                    .map(|id| model.log_prob(&set, id).unwrap().exp())
                    .sum();
                assert!((total - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn expected_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            for (set, model) in [random_tabular(&mut rng, 4), random_shared(&mut rng, 5, 3)] {
                let mut acc = vec![0.0; model.num_params()];
                for id in set.candidates() {
                    let out = model.grad_log_prob(&set, id).unwrap();
                    let p = out.logprob.exp();
                    for (a, g) in acc.iter_mut().zip(&out.grad) {
                        *a += p * g;
                    }
                }
                for a in acc {
                    assert!(a.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-5;
        let mut draws = 0;
        while draws < 200 {
            let (set, mut model) = if draws % 2 == 0 {
                random_tabular(&mut rng, 4)
            } else {
                random_shared(&mut rng, 5, 3)
            };
            let idx = draws % set.len();
            let id = set.candidates()[idx].clone();
            let analytic = model.grad_log_prob(&set, &id).unwrap().grad;
            let base = model.params().to_vec();
            for i in 0..base.len() {
                let mut up = base.clone();
                up[i] += h;
                model.set_params(&up).unwrap();
                let plus = model.log_prob(&set, &id).unwrap();
                let mut down = base.clone();
                down[i] -= h;
                model.set_params(&down).unwrap();
                let minus = model.log_prob(&set, &id).unwrap();
                let numeric = (plus - minus) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs());
                let err = if denom < 1e-8 {
                    (analytic[i] - numeric).abs()
                } else {
                    (analytic[i] - numeric).abs() / denom
                };
                assert!(err <= 1e-6, "coord {i}: {} vs {numeric}", analytic[i]);
            }
            draws += 1;
        }
    }

    #[test]
    fn log_ratio_zero_at_snapshot_and_monotone() {
        let set = plain_set("p", 3);
        let mut model = PolicyModel::tabular(std::slice::from_ref(&set)).unwrap();
        model.snapshot_reference();
        for id in set.candidates() {
            assert_eq!(model.log_ratio(&set, id).unwrap(), 0.0);
        }
        let mut params = model.params().to_vec();
        params[1] += 0.7;
        model.set_params(&params).unwrap();
        assert!(model.log_ratio(&set, "y1").unwrap() > 0.0);
    }

    #[test]
    fn log_ratio_is_difference_of_log_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (set, mut model) = random_shared(&mut rng, 4, 3);
        model.snapshot_reference();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let params: Vec<f64> = (0..3).map(|_| normal.sample(&mut rng)).collect();
        model.set_params(&params).unwrap();
        for id in set.candidates() {
            let direct = model.log_ratio(&set, id).unwrap();
            let diff =
                model.log_prob(&set, id).unwrap() - model.reference_log_prob(&set, id).unwrap();
            assert!((direct - diff).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_survives_parameter_updates() {
        let set = plain_set("p", 3);
        let mut model = PolicyModel::tabular(std::slice::from_ref(&set)).unwrap();
        model.snapshot_reference();
        let before: Vec<f64> = set
            .candidates()
            .iter()
            .map(|id| model.reference_log_prob(&set, id).unwrap())
            .collect();
        for _ in 0..100 {
            model.apply_gradient_step(&[0.3, -0.2, 0.1], 0.05).unwrap();
        }
        let after: Vec<f64> = set
            .candidates()
            .iter()
            .map(|id| model.reference_log_prob(&set, id).unwrap())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn second_snapshot_overwrites_first() {
        let set = plain_set("p", 2);
        let mut model = PolicyModel::tabular(std::slice::from_ref(&set)).unwrap();
        model.snapshot_reference();
        model.set_params(&[2.0, 0.0]).unwrap();
        model.snapshot_reference();
        assert_eq!(model.log_ratio(&set, "y0").unwrap(), 0.0);
        let rlp = model.reference_log_prob(&set, "y0").unwrap();
        assert!((rlp - (2.0 - log_sum_exp(&[2.0, 0.0]))).abs() < 1e-15);
    }

    #[test]
    fn missing_snapshot_is_an_error() {
        let set = plain_set("p", 2);
        let model = PolicyModel::tabular(std::slice::from_ref(&set)).unwrap();
        assert!(matches!(
            model.log_ratio(&set, "y0"),
            Err(PolicyError::NoReference)
        ));
    }

    #[test]
    fn construction_and_lookup_errors() {
        assert!(matches!(
            CandidateSet::new("p", ids(1), None),
            Err(PolicyError::TooFewCandidates(_, 1))
        ));
        assert!(matches!(
            CandidateSet::new("p", vec!["a".into(), "a".into()], None),
            Err(PolicyError::DuplicateResponse { .. })
        ));
        assert!(matches!(
            CandidateSet::new("p", ids(2), Some(vec![vec![1.0]])),
            Err(PolicyError::FeatureCountMismatch { .. })
        ));
        assert!(matches!(
            CandidateSet::new("p", ids(2), Some(vec![vec![1.0], vec![1.0, 2.0]])),
            Err(PolicyError::FeatureDimMismatch { .. })
        ));
        assert!(matches!(
            CandidateSet::new("p", ids(2), Some(vec![vec![f64::NAN], vec![1.0]])),
            Err(PolicyError::NonFiniteFeature(_))
        ));

        let set = plain_set("p", 2);
        let model = PolicyModel::tabular(std::slice::from_ref(&set)).unwrap();
        assert!(matches!(
            model.log_prob(&set, "nope"),
            Err(PolicyError::UnknownResponse { .. })
        ));
        let other = plain_set("q", 2);
        assert!(matches!(
            model.log_prob(&other, "y0"),
            Err(PolicyError::UnknownPrompt(_))
        ));

        let featless = plain_set("p", 2);
        let shared = PolicyModel::shared_feature(2).unwrap();
        assert!(matches!(
            shared.log_prob(&featless, "y0"),
            Err(PolicyError::MissingFeatures(_))
        ));
    }

    #[test]
    fn active_range_covers_prompt_block() {
        let sets = vec![plain_set("a", 3), plain_set("b", 4)];
        let model = PolicyModel::tabular(&sets).unwrap();
        assert_eq!(model.num_params(), 7);
        assert_eq!(model.active_param_range(&sets[0]).unwrap(), 0..3);
        assert_eq!(model.active_param_range(&sets[1]).unwrap(), 3..7);

        let shared = PolicyModel::shared_feature(5).unwrap();
        let fs = feature_set("a", vec![vec![0.0; 5], vec![1.0; 5]]);
        assert_eq!(shared.active_param_range(&fs).unwrap(), 0..5);
    }

    #[test]
    fn candidates_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("candidates.jsonl");
        let sets = vec![
            feature_set("p0", vec![vec![1.0, 2.0], vec![3.0, 4.0]]),
            plain_set("p1", 3),
        ];
        write_candidates_jsonl(&path, &sets).unwrap();
        let back = read_candidates_jsonl(&path).unwrap();
        assert_eq!(back, sets);
    }

    #[test]
    fn candidates_jsonl_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"prompt_id\":\"p\",\"candidates\":[\"a\",\"b\"]}\nnot json\n",
        )
        .unwrap();
        let err = read_candidates_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
