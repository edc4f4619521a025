//! `bpo`: command-line front end for the preference-optimization laboratory.
//!
//! Subcommands cover the full workflow: `pairs` builds max-min preference
//! pairs from scored candidate groups, `synth` writes the synthetic dataset
//! that reproduces chosen-reward decay, `train` runs seeded gradient descent
//! and emits a trace plus diagnostic reports, `gradfield` tabulates gradient
//! magnitudes over a reward grid for both margins, `verify` checks the
//! chosen-likelihood lower bound on a trace, and `audit` compares analytic
//! gradients against finite differences.
//!
//! Every command is a pure function of its inputs, flags, and seed: rerunning
//! an invocation rewrites byte-identical artifacts. Settings resolve as
//! command-line flag over config-file value over built-in default, and the
//! effective configuration is echoed into each output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use bpo_core::analysis::{
    audit_all_combinations, bound_check_trace, dcr_detect, gradient_field, summarize_field,
    trailing_min_margin, DcrVerdict, GridBounds,
};
use bpo_core::dataset::{
    build_maxmin_pairs, generate_dcr_synthetic, ingest_scored_jsonl, read_pairs_jsonl,
    write_pairs_jsonl, IngestMode, PreferenceDataset,
};
use bpo_core::loss::{LossKind, LossSpec};
use bpo_core::margin::{MarginKind, MarginSpec};
use bpo_core::policy::{read_candidates_jsonl, write_candidates_jsonl, PolicyModel};
use bpo_core::trainer::{train, TrainConfig, TrainingTrace};

/// Print a line to stdout, ignoring a closed pipe (`bpo ... | head` must
/// not turn into a crash after the artifacts are already written).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Frozen shape of the synthetic decay dataset: prompts, feature dimension,
/// candidates per prompt. `train --synth-dcr` always uses this recipe so the
/// decay demonstration stays reproducible; `synth` takes the same values as
/// flag defaults.
const DCR_SYNTH_PROMPTS: usize = 24;
const DCR_SYNTH_DIM: usize = 8;
const DCR_SYNTH_CANDIDATES: usize = 16;

#[derive(Parser)]
#[command(
    name = "bpo",
    version,
    about = "Preference-optimization laboratory: pair construction, seeded training \
             with relative or balanced reward margins, and gradient diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build max-min preference pairs from scored candidate groups
    Pairs(PairsArgs),
    /// Generate the synthetic dataset that reproduces chosen-reward decay
    Synth(SynthArgs),
    /// Train a policy on preference pairs and emit a trace plus reports
    Train(TrainArgs),
    /// Tabulate gradient magnitudes over a reward grid for both margins
    Gradfield(GradfieldArgs),
    /// Check the chosen-likelihood lower bound on a training trace
    Verify(VerifyArgs),
    /// Compare analytic gradients against finite differences, all combinations
    Audit(AuditArgs),
}

#[derive(Args)]
struct PairsArgs {
    /// Scored groups JSONL: {"prompt_id", "responses", "rewards"[, "features"]}
    #[arg(long, value_name = "FILE")]
    scored: PathBuf,
    /// Directory for pairs.jsonl, candidates.jsonl, and pairing_stats.json
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Fail on the first malformed line instead of skipping and reporting it
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for candidates.jsonl, pairs.jsonl, and synth_stats.json
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Seed for the feature noise [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of prompts [default: 24]
    #[arg(long)]
    n_prompts: Option<usize>,
    /// Feature dimension, at least 2 [default: 8]
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Candidates per prompt, at least 3 [default: 16]
    #[arg(long)]
    n_candidates: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Loss: logistic_log, hinge, squared, exponential, truncated_quadratic,
    /// or savage [default: logistic_log]
    #[arg(long)]
    loss: Option<String>,
    /// Margin: relative (r_w - r_l) or balanced (min(r_w, -alpha*r_l))
    /// [default: balanced]
    #[arg(long)]
    margin: Option<String>,
    /// Gap adaptor in (0, 1] for the balanced margin [default: 1.0]
    #[arg(long)]
    alpha: Option<f64>,
    /// Reward scale on the policy/reference log-ratio [default: 0.1]
    #[arg(long)]
    beta: Option<f64>,
    /// Gradient-descent learning rate [default: 0.1]
    #[arg(long)]
    lr: Option<f64>,
    /// Passes over the pair set [default: 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Pairs per optimizer step [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for synthetic data and batch shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Policy parameterization: shared (feature weights) or tabular
    /// [default: shared]
    #[arg(long)]
    policy: Option<String>,
    /// Leading fraction of steps the decay detector ignores [default: 0.25]
    #[arg(long)]
    burn_in: Option<f64>,
    /// Trailing fraction of steps whose minimum mean margin seeds the bound
    /// check [default: 0.25]
    #[arg(long)]
    window: Option<f64>,
    /// Train on the built-in synthetic decay dataset instead of input files
    #[arg(long, conflicts_with_all = ["pairs", "candidates"])]
    synth_dcr: bool,
    /// Preference pairs JSONL (goes with --candidates)
    #[arg(long, value_name = "FILE", requires = "candidates")]
    pairs: Option<PathBuf>,
    /// Candidate sets JSONL (goes with --pairs)
    #[arg(long, value_name = "FILE", requires = "pairs")]
    candidates: Option<PathBuf>,
    /// Run one training per alpha over START:END:STEP (e.g. 0.1:1.0:0.1),
    /// writing alpha_* subdirectories plus sweep_summary.json
    #[arg(long, value_name = "START:END:STEP", conflicts_with = "side_by_side")]
    alpha_sweep: Option<String>,
    /// Train both margins on identical data and seed, writing dpo/ and bpo/
    /// subdirectories plus comparison.json
    #[arg(long)]
    side_by_side: bool,
    /// JSON config file; command-line flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Reject unknown keys in the config file
    #[arg(long)]
    strict: bool,
    /// Output directory for this run's artifacts
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradfieldArgs {
    /// Loss: logistic_log, hinge, squared, exponential, truncated_quadratic,
    /// or savage [default: logistic_log]
    #[arg(long)]
    loss: Option<String>,
    /// Gap adaptor for the balanced field [default: 1.0]
    #[arg(long)]
    alpha: Option<f64>,
    /// Reward scale echoed into the loss spec; the grid axes are already
    /// rewards [default: 1.0]
    #[arg(long)]
    beta: Option<f64>,
    /// Reward range for both grid axes, as MIN:MAX [default: -5:5]
    #[arg(long, value_name = "MIN:MAX", allow_hyphen_values = true)]
    grid_bounds: Option<String>,
    /// Grid points per axis, at least 2 [default: 101]
    #[arg(long)]
    grid_res: Option<usize>,
    /// Gradient magnitudes below this count as vanishing [default: 0.05]
    #[arg(long)]
    epsilon: Option<f64>,
    /// JSON config file; command-line flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Reject unknown keys in the config file
    #[arg(long)]
    strict: bool,
    /// Output directory for the field CSVs and summary
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Trace CSV produced by `bpo train`
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Margin threshold; defaults to the trace's trailing-window minimum
    /// mean margin
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Reward scale the training run used [default: 0.1]
    #[arg(long)]
    beta: Option<f64>,
    /// Gap adaptor the training run used [default: 1.0]
    #[arg(long)]
    alpha: Option<f64>,
    /// Trailing fraction of steps examined when deriving gamma
    /// [default: 0.25]
    #[arg(long)]
    window: Option<f64>,
    /// JSON config file; command-line flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Reject unknown keys in the config file
    #[arg(long)]
    strict: bool,
    /// Output directory for bound_report.json
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Seed for probe placement [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Valid probes per loss/margin combination, split across the two policy
    /// parameterizations [default: 200]
    #[arg(long)]
    probes: Option<usize>,
    /// JSON config file; command-line flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Reject unknown keys in the config file
    #[arg(long)]
    strict: bool,
    /// Output directory for audit_report.json
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Pairs(args) => cmd_pairs(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Gradfield(args) => cmd_gradfield(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Audit(args) => cmd_audit(args),
    }
}

// ---------------------------------------------------------------------------
// Config-file handling

/// Keys a JSON config file may set. Flags with the same name take
/// precedence; anything unset falls back to the built-in default.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    loss: Option<String>,
    margin: Option<String>,
    alpha: Option<f64>,
    beta: Option<f64>,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    policy: Option<String>,
    burn_in: Option<f64>,
    window: Option<f64>,
    gamma: Option<f64>,
    grid_bounds: Option<String>,
    grid_res: Option<usize>,
    epsilon: Option<f64>,
    probes: Option<usize>,
}

const CONFIG_KEYS: [&str; 16] = [
    "loss",
    "margin",
    "alpha",
    "beta",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "policy",
    "burn_in",
    "window",
    "gamma",
    "grid_bounds",
    "grid_res",
    "epsilon",
    "probes",
];

/// Load a config file if one was named. Unknown keys are rejected in strict
/// mode and ignored otherwise; type mismatches are always errors.
fn load_file_config(path: Option<&Path>, strict: bool) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("read config {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parse config {}", path.display()))?;
    if strict {
        if let Some(map) = value.as_object() {
            for key in map.keys() {
                if !CONFIG_KEYS.contains(&key.as_str()) {
                    bail!(
                        "unknown key {key:?} in config {} (strict mode); known keys: {}",
                        path.display(),
                        CONFIG_KEYS.join(", ")
                    );
                }
            }
        }
    }
    serde_json::from_value(value).with_context(|| format!("bad value in config {}", path.display()))
}

// ---------------------------------------------------------------------------
// Shared helpers

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serialize JSON")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("create output directory {}", dir.display()))
}

fn parse_loss(name: &str) -> Result<LossKind> {
    Ok(LossKind::from_str(name)?)
}

fn parse_margin(name: &str) -> Result<MarginKind> {
    Ok(MarginKind::from_str(name)?)
}

/// Parse "MIN:MAX" into grid bounds; the split tolerates negative numbers.
fn parse_grid_bounds(text: &str) -> Result<GridBounds> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 2 {
        bail!("grid bounds must look like MIN:MAX, got {text:?}");
    }
    let min: f64 = parts[0]
        .trim()
        .parse()
        .with_context(|| format!("bad grid bound {:?}", parts[0]))?;
    let max: f64 = parts[1]
        .trim()
        .parse()
        .with_context(|| format!("bad grid bound {:?}", parts[1]))?;
    Ok(GridBounds::new(min, max)?)
}

/// Parse "START:END:STEP" into the alphas of a sweep, clamped so
/// floating-point accumulation can never push a value past END.
fn parse_alpha_sweep(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        bail!("alpha sweep must look like START:END:STEP, got {text:?}");
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad sweep value {p:?}"))
        })
        .collect::<Result<_>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(start > 0.0 && end <= 1.0 && start <= end && step > 0.0) {
        bail!(
            "alpha sweep needs 0 < START <= END <= 1 and STEP > 0, got {start}:{end}:{step}"
        );
    }
    let mut alphas = Vec::new();
    for k in 0.. {
        let alpha = start + k as f64 * step;
        if alpha > end + 1e-9 {
            break;
        }
        alphas.push(alpha.min(end));
    }
    Ok(alphas)
}

fn verdict_name(verdict: DcrVerdict) -> &'static str {
    match verdict {
        DcrVerdict::Dcr => "DCR",
        DcrVerdict::NoDcr => "NoDCR",
    }
}

/// Instantiate the policy named by `--policy` for the given dataset.
fn build_policy(policy: &str, dataset: &PreferenceDataset) -> Result<PolicyModel> {
    match policy {
        "shared" | "shared_feature" => {
            let dim = dataset
                .candidate_sets()
                .iter()
                .find_map(|set| set.feature_dim())
                .context(
                    "the shared-feature policy needs feature vectors in the candidate sets; \
                     pass --policy tabular for id-only data",
                )?;
            Ok(PolicyModel::shared_feature(dim)?)
        }
        "tabular" => Ok(PolicyModel::tabular(dataset.candidate_sets())?),
        other => bail!("unknown policy {other:?}; expected \"shared\" or \"tabular\""),
    }
}

// ---------------------------------------------------------------------------
// pairs

fn cmd_pairs(args: PairsArgs) -> Result<ExitCode> {
    let mode = if args.strict {
        IngestMode::Strict
    } else {
        IngestMode::Lenient
    };
    let report = ingest_scored_jsonl(&args.scored, mode)?;
    let outcome = build_maxmin_pairs(&report.groups)?;
    create_out_dir(&args.out_dir)?;
    write_pairs_jsonl(args.out_dir.join("pairs.jsonl"), outcome.dataset.pairs())?;
    write_candidates_jsonl(
        args.out_dir.join("candidates.jsonl"),
        outcome.dataset.candidate_sets(),
    )?;
    let stats = json!({
        "groups_read": outcome.groups_read,
        "pairs_emitted": outcome.dataset.len(),
        "groups_discarded": outcome.discarded_all_equal,
        "lines_skipped": report
            .skipped
            .iter()
            .map(|issue| json!({ "line": issue.line, "message": issue.message }))
            .collect::<Vec<_>>(),
    });
    write_json_file(&args.out_dir.join("pairing_stats.json"), &stats)?;
    say!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// synth

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let seed = args.seed.unwrap_or(7);
    let n_prompts = args.n_prompts.unwrap_or(DCR_SYNTH_PROMPTS);
    let feature_dim = args.feature_dim.unwrap_or(DCR_SYNTH_DIM);
    let n_candidates = args.n_candidates.unwrap_or(DCR_SYNTH_CANDIDATES);
    let dataset = generate_dcr_synthetic(seed, n_prompts, feature_dim, n_candidates)?;
    create_out_dir(&args.out_dir)?;
    write_candidates_jsonl(
        args.out_dir.join("candidates.jsonl"),
        dataset.candidate_sets(),
    )?;
    write_pairs_jsonl(args.out_dir.join("pairs.jsonl"), dataset.pairs())?;
    let stats = json!({
        "seed": seed,
        "n_prompts": n_prompts,
        "feature_dim": feature_dim,
        "n_candidates": n_candidates,
        "pairs_emitted": dataset.len(),
    });
    write_json_file(&args.out_dir.join("synth_stats.json"), &stats)?;
    say!(
        "wrote {} prompts x {} candidates (feature dim {}) to {}",
        n_prompts,
        n_candidates,
        feature_dim,
        args.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train

/// Fully resolved training settings (flags over config file over defaults),
/// minus the margin spec, which sweep and side-by-side modes vary per run.
struct ResolvedTrain {
    loss: LossKind,
    margin: MarginKind,
    alpha: f64,
    beta: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    policy: String,
    burn_in: f64,
    window: f64,
}

fn resolve_train(args: &TrainArgs) -> Result<ResolvedTrain> {
    let file = load_file_config(args.config.as_deref(), args.strict)?;
    let loss_name = args
        .loss
        .clone()
        .or(file.loss)
        .unwrap_or_else(|| "logistic_log".to_string());
    let margin_name = args
        .margin
        .clone()
        .or(file.margin)
        .unwrap_or_else(|| "balanced".to_string());
    Ok(ResolvedTrain {
        loss: parse_loss(&loss_name)?,
        margin: parse_margin(&margin_name)?,
        alpha: args.alpha.or(file.alpha).unwrap_or(1.0),
        beta: args.beta.or(file.beta).unwrap_or(0.1),
        lr: args.lr.or(file.lr).unwrap_or(0.1),
        epochs: args.epochs.or(file.epochs).unwrap_or(200),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(8),
        seed: args.seed.or(file.seed).unwrap_or(0),
        policy: args
            .policy
            .clone()
            .or(file.policy)
            .unwrap_or_else(|| "shared".to_string()),
        burn_in: args.burn_in.or(file.burn_in).unwrap_or(0.25),
        window: args.window.or(file.window).unwrap_or(0.25),
    })
}

/// Per-run results gathered for stdout, comparison.json, and
/// sweep_summary.json.
#[derive(Serialize)]
struct RunSummary {
    dir: String,
    loss: String,
    margin: String,
    alpha: f64,
    beta: f64,
    seed: u64,
    steps: usize,
    final_r_w_mean: Option<f64>,
    final_r_l_mean: Option<f64>,
    final_margin_mean: Option<f64>,
    final_loss_mean: Option<f64>,
    dcr_verdict: Option<DcrVerdict>,
    bound_gamma: Option<f64>,
    bound_pass: Option<bool>,
}

/// Train once and write the full artifact set into `dir`: config echo,
/// trace CSV/JSON, final parameters, the decay report, and — for balanced
/// margins — the bound report.
fn run_one_training(
    dataset: &PreferenceDataset,
    cfg: &ResolvedTrain,
    margin_spec: MarginSpec,
    data_echo: &serde_json::Value,
    dir: &Path,
    dir_label: &str,
) -> Result<RunSummary> {
    create_out_dir(dir)?;
    let mut model = build_policy(&cfg.policy, dataset)?;
    model.snapshot_reference();
    let loss = LossSpec::new(cfg.loss, cfg.beta)?;
    let mut train_config = TrainConfig::new(loss, margin_spec);
    train_config.learning_rate = cfg.lr;
    train_config.epochs = cfg.epochs;
    train_config.batch_size = cfg.batch_size;
    train_config.seed = cfg.seed;
    let trace = train(&mut model, dataset, &train_config)?;

    let echo = json!({
        "command": "train",
        "loss": cfg.loss.name(),
        "margin": margin_spec.kind.name(),
        "alpha": margin_spec.alpha(),
        "beta": cfg.beta,
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "policy": cfg.policy,
        "burn_in": cfg.burn_in,
        "window": cfg.window,
        "data": data_echo,
    });
    write_json_file(&dir.join("config.json"), &echo)?;
    trace.write_csv(dir.join("trace.csv"))?;
    trace.write_json(dir.join("trace.json"))?;
    write_json_file(&dir.join("final_params.json"), &model)?;

    let mut summary = RunSummary {
        dir: dir_label.to_string(),
        loss: cfg.loss.name().to_string(),
        margin: margin_spec.kind.name().to_string(),
        alpha: margin_spec.alpha(),
        beta: cfg.beta,
        seed: cfg.seed,
        steps: trace.len(),
        final_r_w_mean: None,
        final_r_l_mean: None,
        final_margin_mean: None,
        final_loss_mean: None,
        dcr_verdict: None,
        bound_gamma: None,
        bound_pass: None,
    };
    if let Some(last) = trace.records().last() {
        summary.final_r_w_mean = Some(last.r_w_mean);
        summary.final_r_l_mean = Some(last.r_l_mean);
        summary.final_margin_mean = Some(last.margin_mean);
        summary.final_loss_mean = Some(last.loss_mean);
        let dcr = dcr_detect(&trace, cfg.burn_in)?;
        write_json_file(&dir.join("dcr_report.json"), &dcr)?;
        summary.dcr_verdict = Some(dcr.verdict);
        if margin_spec.kind == MarginKind::Balanced {
            let gamma = trailing_min_margin(&trace, cfg.window)?;
            let bound = bound_check_trace(&trace, &margin_spec, cfg.beta, gamma)?;
            summary.bound_gamma = Some(gamma);
            summary.bound_pass = Some(bound.pass);
            write_json_file(&dir.join("bound_report.json"), &bound)?;
        }
    }
    Ok(summary)
}

fn print_run_summary(summary: &RunSummary) {
    match (summary.final_r_w_mean, summary.final_margin_mean) {
        (Some(r_w), Some(margin)) => say!(
            "{}: {} + {} over {} steps; final r_w_mean {:.6}, margin_mean {:.6}{}{}",
            summary.dir,
            summary.loss,
            summary.margin,
            summary.steps,
            r_w,
            margin,
            summary
                .dcr_verdict
                .map(|v| format!("; verdict {}", verdict_name(v)))
                .unwrap_or_default(),
            summary
                .bound_pass
                .map(|ok| format!("; bound {}", if ok { "pass" } else { "FAIL" }))
                .unwrap_or_default(),
        ),
        _ => say!("{}: empty dataset, nothing trained", summary.dir),
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = resolve_train(&args)?;
    let (dataset, data_echo) = if args.synth_dcr {
        let dataset = generate_dcr_synthetic(
            cfg.seed,
            DCR_SYNTH_PROMPTS,
            DCR_SYNTH_DIM,
            DCR_SYNTH_CANDIDATES,
        )?;
        let echo = json!({
            "synth_dcr": {
                "seed": cfg.seed,
                "n_prompts": DCR_SYNTH_PROMPTS,
                "feature_dim": DCR_SYNTH_DIM,
                "n_candidates": DCR_SYNTH_CANDIDATES,
            }
        });
        (dataset, echo)
    } else {
        let (Some(pairs_path), Some(candidates_path)) = (&args.pairs, &args.candidates) else {
            bail!("provide --pairs FILE with --candidates FILE, or --synth-dcr");
        };
        let sets = read_candidates_jsonl(candidates_path)?;
        let pairs = read_pairs_jsonl(pairs_path)?;
        let echo = json!({
            "pairs": pairs_path.display().to_string(),
            "candidates": candidates_path.display().to_string(),
        });
        (PreferenceDataset::new(pairs, sets)?, echo)
    };

    if let Some(sweep_text) = &args.alpha_sweep {
        if cfg.margin != MarginKind::Balanced {
            bail!("--alpha-sweep varies the balanced margin; drop --margin relative");
        }
        let alphas = parse_alpha_sweep(sweep_text)?;
        let mut summaries = Vec::with_capacity(alphas.len());
        for alpha in alphas {
            let spec = MarginSpec::balanced(alpha)?;
            let label = format!("alpha_{alpha:.4}");
            let summary = run_one_training(
                &dataset,
                &cfg,
                spec,
                &data_echo,
                &args.out_dir.join(&label),
                &label,
            )?;
            print_run_summary(&summary);
            summaries.push(summary);
        }
        write_json_file(&args.out_dir.join("sweep_summary.json"), &summaries)?;
        say!("sweep artifacts in {}", args.out_dir.display());
        return Ok(ExitCode::SUCCESS);
    }

    if args.side_by_side {
        let dpo = run_one_training(
            &dataset,
            &cfg,
            MarginSpec::relative(),
            &data_echo,
            &args.out_dir.join("dpo"),
            "dpo",
        )?;
        let bpo = run_one_training(
            &dataset,
            &cfg,
            MarginSpec::balanced(cfg.alpha)?,
            &data_echo,
            &args.out_dir.join("bpo"),
            "bpo",
        )?;
        print_run_summary(&dpo);
        print_run_summary(&bpo);
        let comparison = json!({ "dpo": dpo, "bpo": bpo });
        write_json_file(&args.out_dir.join("comparison.json"), &comparison)?;
        say!("comparison in {}", args.out_dir.display());
        return Ok(ExitCode::SUCCESS);
    }

    let spec = match cfg.margin {
        MarginKind::Relative => MarginSpec::relative(),
        MarginKind::Balanced => MarginSpec::balanced(cfg.alpha)?,
    };
    let summary = run_one_training(&dataset, &cfg, spec, &data_echo, &args.out_dir, ".")?;
    print_run_summary(&summary);
    say!("artifacts in {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// gradfield

fn cmd_gradfield(args: GradfieldArgs) -> Result<ExitCode> {
    let file = load_file_config(args.config.as_deref(), args.strict)?;
    let loss_name = args
        .loss
        .clone()
        .or(file.loss)
        .unwrap_or_else(|| "logistic_log".to_string());
    let loss_kind = parse_loss(&loss_name)?;
    let alpha = args.alpha.or(file.alpha).unwrap_or(1.0);
    let beta = args.beta.or(file.beta).unwrap_or(1.0);
    let bounds_text = args
        .grid_bounds
        .clone()
        .or(file.grid_bounds)
        .unwrap_or_else(|| "-5:5".to_string());
    let resolution = args.grid_res.or(file.grid_res).unwrap_or(101);
    let epsilon = args.epsilon.or(file.epsilon).unwrap_or(0.05);

    let bounds = parse_grid_bounds(&bounds_text)?;
    let loss = LossSpec::new(loss_kind, beta)?;
    let relative = gradient_field(&loss, &MarginSpec::relative(), bounds, resolution)?;
    let balanced = gradient_field(&loss, &MarginSpec::balanced(alpha)?, bounds, resolution)?;
    let relative_summary = summarize_field(&relative, epsilon)?;
    let balanced_summary = summarize_field(&balanced, epsilon)?;

    create_out_dir(&args.out_dir)?;
    let echo = json!({
        "command": "gradfield",
        "loss": loss_kind.name(),
        "alpha": alpha,
        "beta": beta,
        "grid_bounds": bounds_text,
        "grid_res": resolution,
        "epsilon": epsilon,
    });
    write_json_file(&args.out_dir.join("config.json"), &echo)?;
    relative.write_csv(args.out_dir.join("field_relative.csv"))?;
    balanced.write_csv(args.out_dir.join("field_balanced.csv"))?;
    let summary = json!({
        "relative": relative_summary,
        "balanced": balanced_summary,
        "balanced_fraction_smaller":
            balanced_summary.low_gradient_fraction < relative_summary.low_gradient_fraction,
    });
    write_json_file(&args.out_dir.join("field_summary.json"), &summary)?;
    say!(
        "low-gradient fraction (|grad| < {}): relative {:.6}, balanced {:.6}",
        epsilon, relative_summary.low_gradient_fraction, balanced_summary.low_gradient_fraction
    );
    say!("fields in {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// verify

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let file = load_file_config(args.config.as_deref(), args.strict)?;
    let beta = args.beta.or(file.beta).unwrap_or(0.1);
    let alpha = args.alpha.or(file.alpha).unwrap_or(1.0);
    let window = args.window.or(file.window).unwrap_or(0.25);
    let trace = TrainingTrace::read_csv(&args.trace)?;
    let spec = MarginSpec::balanced(alpha)?;
    let gamma = match args.gamma.or(file.gamma) {
        Some(gamma) => gamma,
        None => trailing_min_margin(&trace, window)?,
    };
    let report = bound_check_trace(&trace, &spec, beta, gamma)?;

    create_out_dir(&args.out_dir)?;
    let echo = json!({
        "command": "verify",
        "trace": args.trace.display().to_string(),
        "gamma": gamma,
        "beta": beta,
        "alpha": alpha,
        "window": window,
    });
    write_json_file(&args.out_dir.join("config.json"), &echo)?;
    write_json_file(&args.out_dir.join("bound_report.json"), &report)?;
    say!(
        "bound {}: gamma {}, required log-ratio {}, {} qualifying steps checked, {} skipped, {} failures",
        if report.pass { "pass" } else { "FAIL" },
        gamma,
        gamma / beta,
        report.checked,
        report.skipped,
        report.failures,
    );
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

// ---------------------------------------------------------------------------
// audit

fn cmd_audit(args: AuditArgs) -> Result<ExitCode> {
    let file = load_file_config(args.config.as_deref(), args.strict)?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let probes = args.probes.or(file.probes).unwrap_or(200);
    let per_model = probes.div_ceil(2).max(1);
    let report = audit_all_combinations(seed, per_model)?;

    create_out_dir(&args.out_dir)?;
    let echo = json!({
        "command": "audit",
        "seed": seed,
        "probes": probes,
    });
    write_json_file(&args.out_dir.join("config.json"), &echo)?;
    write_json_file(&args.out_dir.join("audit_report.json"), &report)?;
    for combo in &report.combos {
        say!(
            "{} x {}: {} probes, {} skipped, max rel err {:.3e} — {}",
            combo.loss,
            combo.margin,
            combo.probes,
            combo.skipped,
            combo.max_rel_err,
            if combo.pass { "pass" } else { "FAIL" },
        );
    }
    say!(
        "audit {}: max rel err {:.3e} over {} combinations",
        if report.pass { "pass" } else { "FAIL" },
        report.max_rel_err,
        report.combos.len(),
    );
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
