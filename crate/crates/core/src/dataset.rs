//! Scored-response ingestion, max-min preference pairing, and the synthetic
//! dataset that elicits chosen-reward decay.
//!
//! The pipeline is: JSONL of scored response groups -> one preference pair
//! per group (highest reward vs. lowest reward, first occurrence on ties;
//! all-equal groups are dropped and counted) -> a [`PreferenceDataset`]
//! whose candidate sets cover every pair.
//!
//! [`generate_dcr_synthetic`] builds feature-based datasets where the chosen
//! and rejected responses share a dominant feature direction but the
//! rejected response's component is longer. Relative-margin training then
//! grows the margin mostly by suppressing that shared direction, which drags
//! the chosen response's reward below zero while off-pair candidates absorb
//! the probability mass; balanced-margin training does not.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{CandidateSet, PolicyError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("group '{prompt_id}' has {responses} responses but {rewards} rewards")]
    LengthMismatch {
        prompt_id: String,
        responses: usize,
        rewards: usize,
    },
    #[error("group '{0}' needs at least 2 responses, got {1}")]
    TooFewResponses(String, usize),
    #[error("group '{prompt_id}' repeats response id '{response_id}'")]
    DuplicateResponse {
        prompt_id: String,
        response_id: String,
    },
    #[error("group '{0}' contains a non-finite reward")]
    NonFiniteReward(String),
    #[error("pair for prompt '{0}' uses the same response '{1}' as chosen and rejected")]
    DegeneratePair(String, String),
    #[error("pair references prompt '{0}' but no candidate set covers it")]
    MissingCandidateSet(String),
    #[error("pair for prompt '{prompt_id}' references response '{response_id}' missing from its candidate set")]
    UncoveredResponse {
        prompt_id: String,
        response_id: String,
    },
    #[error("synthetic generator needs d >= 2, got {0}")]
    SynthDim(usize),
    #[error("synthetic generator needs n_candidates >= 3, got {0}")]
    SynthCandidates(usize),
    #[error("synthetic generator needs n_prompts >= 1")]
    SynthPrompts,
    #[error(transparent)]
    Candidate(#[from] PolicyError),
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

/// A prompt with its sampled responses and their scalar rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    prompt_id: String,
    response_ids: Vec<String>,
    rewards: Vec<f64>,
    features: Option<Vec<Vec<f64>>>,
}

impl ScoredGroup {
    pub fn new(
        prompt_id: impl Into<String>,
        response_ids: Vec<String>,
        rewards: Vec<f64>,
        features: Option<Vec<Vec<f64>>>,
    ) -> Result<Self, DatasetError> {
        let prompt_id = prompt_id.into();
        if response_ids.len() != rewards.len() {
            return Err(DatasetError::LengthMismatch {
                prompt_id,
                responses: response_ids.len(),
                rewards: rewards.len(),
            });
        }
        if response_ids.len() < 2 {
            return Err(DatasetError::TooFewResponses(
                prompt_id,
                response_ids.len(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &response_ids {
            if !seen.insert(id) {
                return Err(DatasetError::DuplicateResponse {
                    prompt_id,
                    response_id: id.clone(),
                });
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(DatasetError::NonFiniteReward(prompt_id));
        }
        // reuse the candidate-set feature validation (dimensions, finiteness)
        if features.is_some() {
            CandidateSet::new(prompt_id.clone(), response_ids.clone(), features.clone())?;
        }
        Ok(Self {
            prompt_id,
            response_ids,
            rewards,
            features,
        })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn response_ids(&self) -> &[String] {
        &self.response_ids
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    fn to_candidate_set(&self) -> CandidateSet {
        CandidateSet::new(
            self.prompt_id.clone(),
            self.response_ids.clone(),
            self.features.clone(),
        )
        .expect("validated at construction")
    }
}

/// One preference judgment: `chosen_id` beat `rejected_id` for `prompt_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub chosen_id: String,
    pub rejected_id: String,
}

/// Preference pairs together with the candidate sets they draw from. Every
/// pair's prompt is guaranteed (at construction) to have a covering set.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pairs: Vec<PreferencePair>,
    candidate_sets: Vec<CandidateSet>,
    by_prompt: BTreeMap<String, usize>,
}

impl PreferenceDataset {
    pub fn new(
        pairs: Vec<PreferencePair>,
        candidate_sets: Vec<CandidateSet>,
    ) -> Result<Self, DatasetError> {
        let mut by_prompt = BTreeMap::new();
        for (i, set) in candidate_sets.iter().enumerate() {
            if by_prompt.insert(set.prompt_id().to_string(), i).is_some() {
                return Err(PolicyError::DuplicatePrompt(set.prompt_id().to_string()).into());
            }
        }
        for pair in &pairs {
            if pair.chosen_id == pair.rejected_id {
                return Err(DatasetError::DegeneratePair(
                    pair.prompt_id.clone(),
                    pair.chosen_id.clone(),
                ));
            }
            let set = by_prompt
                .get(&pair.prompt_id)
                .map(|&i| &candidate_sets[i])
                .ok_or_else(|| DatasetError::MissingCandidateSet(pair.prompt_id.clone()))?;
            for id in [&pair.chosen_id, &pair.rejected_id] {
                if set.index_of(id).is_none() {
                    return Err(DatasetError::UncoveredResponse {
                        prompt_id: pair.prompt_id.clone(),
                        response_id: id.clone(),
                    });
                }
            }
        }
        Ok(Self {
            pairs,
            candidate_sets,
            by_prompt,
        })
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn candidate_sets(&self) -> &[CandidateSet] {
        &self.candidate_sets
    }

    pub fn set_for(&self, prompt_id: &str) -> Option<&CandidateSet> {
        self.by_prompt.get(prompt_id).map(|&i| &self.candidate_sets[i])
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Result of max-min pairing: the dataset plus how many groups were dropped
/// because every response scored the same.
#[derive(Debug)]
pub struct PairingOutcome {
    pub dataset: PreferenceDataset,
    pub groups_read: usize,
    pub discarded_all_equal: usize,
}

/// Build one pair per group: highest reward vs. lowest reward, breaking ties
/// by first occurrence. Groups whose rewards are all equal are dropped and
/// counted, never errors.
pub fn build_maxmin_pairs(groups: &[ScoredGroup]) -> Result<PairingOutcome, DatasetError> {
    let mut pairs = Vec::new();
    let mut sets = Vec::new();
    let mut discarded = 0usize;
    for group in groups {
        let mut max_idx = 0usize;
        let mut min_idx = 0usize;
        for (i, &r) in group.rewards.iter().enumerate() {
            if r > group.rewards[max_idx] {
                max_idx = i;
            }
            if r < group.rewards[min_idx] {
                min_idx = i;
            }
        }
        if group.rewards[max_idx] == group.rewards[min_idx] {
            discarded += 1;
            continue;
        }
        pairs.push(PreferencePair {
            prompt_id: group.prompt_id.clone(),
            chosen_id: group.response_ids[max_idx].clone(),
            rejected_id: group.response_ids[min_idx].clone(),
        });
        sets.push(group.to_candidate_set());
    }
    Ok(PairingOutcome {
        dataset: PreferenceDataset::new(pairs, sets)?,
        groups_read: groups.len(),
        discarded_all_equal: discarded,
    })
}

/// How `ingest_scored_jsonl` treats a malformed line: fail fast or skip it
/// and report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestMode {
    Strict,
    Lenient,
}

/// A line skipped during lenient ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

/// Ingestion result: the valid groups in file order, plus any lines skipped
/// in lenient mode (always empty in strict mode, which errors instead).
#[derive(Debug)]
pub struct IngestReport {
    pub groups: Vec<ScoredGroup>,
    pub skipped: Vec<LineIssue>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ScoredRow {
    prompt_id: String,
    responses: Vec<String>,
    rewards: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

/// Read scored groups from JSONL (fields `prompt_id`, `responses`,
/// `rewards`, optional `features`), preserving file order. Blank lines are
/// ignored.
pub fn ingest_scored_jsonl(
    path: impl AsRef<Path>,
    mode: IngestMode,
) -> Result<IngestReport, DatasetError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ScoredRow>(&line)
            .map_err(|e| e.to_string())
            .and_then(|row| {
                ScoredGroup::new(row.prompt_id, row.responses, row.rewards, row.features)
                    .map_err(|e| e.to_string())
            });
        match parsed {
            Ok(group) => groups.push(group),
            Err(message) => match mode {
                IngestMode::Strict => {
                    return Err(DatasetError::MalformedLine {
                        path: display,
                        line: i + 1,
                        message,
                    })
                }
                IngestMode::Lenient => skipped.push(LineIssue {
                    line: i + 1,
                    message,
                }),
            },
        }
    }
    Ok(IngestReport { groups, skipped })
}

/// Write scored groups in the schema `ingest_scored_jsonl` reads; the
/// round-trip is lossless.
pub fn write_scored_jsonl(
    path: impl AsRef<Path>,
    groups: &[ScoredGroup],
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    for group in groups {
        let row = ScoredRow {
            prompt_id: group.prompt_id.clone(),
            responses: group.response_ids.clone(),
            rewards: group.rewards.clone(),
            features: group.features.clone(),
        };
        let json = serde_json::to_string(&row).expect("scored rows serialize");
        writeln!(file, "{json}").map_err(|source| DatasetError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Write pairs as JSONL, one `{prompt_id, chosen_id, rejected_id}` per line.
pub fn write_pairs_jsonl(
    path: impl AsRef<Path>,
    pairs: &[PreferencePair],
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    for pair in pairs {
        let json = serde_json::to_string(pair).expect("pairs serialize");
        writeln!(file, "{json}").map_err(|source| DatasetError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Read pairs written by [`write_pairs_jsonl`].
pub fn read_pairs_jsonl(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>, DatasetError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair =
            serde_json::from_str::<PreferencePair>(&line).map_err(|e| DatasetError::MalformedLine {
                path: display.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

// Frozen feature geometry for the synthetic decay dataset. The chosen and
// rejected responses share the first feature axis (dot product > 0), the
// rejected component is longer, and the off-pair candidates sit on the
// second axis. Relative-margin training moves the weights along
// phi_w - phi_l = (-1, 1, 0, ...): down the shared axis (suppressing the
// chosen response along with the rejected one) and up the off-pair axis.
const SYNTH_CHOSEN_BASE: [f64; 2] = [2.0, 1.0];
const SYNTH_REJECTED_BASE: [f64; 2] = [3.0, 0.0];
const SYNTH_OOD_BASE: [f64; 2] = [0.0, 1.0];
const SYNTH_NOISE_SD: f64 = 0.05;

/// Generate the synthetic dataset that separates relative-margin from
/// balanced-margin training: `n_prompts` prompts, each with one chosen, one
/// rejected, and `n_candidates - 2` off-pair candidates in `d` feature
/// dimensions (`d >= 2`, `n_candidates >= 3`). Deterministic given `seed`.
pub fn generate_dcr_synthetic(
    seed: u64,
    n_prompts: usize,
    d: usize,
    n_candidates: usize,
) -> Result<PreferenceDataset, DatasetError> {
    if d < 2 {
        return Err(DatasetError::SynthDim(d));
    }
    if n_candidates < 3 {
        return Err(DatasetError::SynthCandidates(n_candidates));
    }
    if n_prompts == 0 {
        return Err(DatasetError::SynthPrompts);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTH_NOISE_SD).unwrap();
    let mut sample = |base: &[f64; 2]| -> Vec<f64> {
        (0..d)
            .map(|j| base.get(j).copied().unwrap_or(0.0) + noise.sample(&mut rng))
            .collect()
    };

    let mut pairs = Vec::with_capacity(n_prompts);
    let mut sets = Vec::with_capacity(n_prompts);
    for p in 0..n_prompts {
        let prompt_id = format!("p{p:04}");
        let mut candidates = vec!["w".to_string(), "l".to_string()];
        let mut features = vec![sample(&SYNTH_CHOSEN_BASE), sample(&SYNTH_REJECTED_BASE)];
        for o in 0..n_candidates - 2 {
            candidates.push(format!("o{o}"));
            features.push(sample(&SYNTH_OOD_BASE));
        }
        sets.push(CandidateSet::new(
            prompt_id.clone(),
            candidates,
            Some(features),
        )?);
        pairs.push(PreferencePair {
            prompt_id,
            chosen_id: "w".to_string(),
            rejected_id: "l".to_string(),
        });
    }
    PreferenceDataset::new(pairs, sets)
}
