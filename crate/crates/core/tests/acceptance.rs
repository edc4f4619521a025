//! Acceptance suite: one test per headline guarantee, each printing a
//! PASS/FAIL line (visible under `--nocapture`) before asserting.
//!
//! Run with: `cargo test -p bpo-core --test acceptance -- --nocapture`

use std::f64::consts::LN_2;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use bpo_core::analysis::{
    audit_all_combinations, bound_check_pairs, bound_check_trace, dcr_detect, gradient_field,
    low_gradient_fraction, trailing_min_margin, DcrVerdict, GridBounds,
};
use bpo_core::dataset::{build_maxmin_pairs, generate_dcr_synthetic, ScoredGroup};
use bpo_core::loss::{loss_value, sigmoid, LossKind, LossSpec};
use bpo_core::margin::{balanced_margin, relative_margin, MarginBranch, MarginSpec, RewardPair};
use bpo_core::policy::PolicyModel;
use bpo_core::trainer::{
    bpo_pair_gradient, dpo_pair_gradient, generic_pair_gradient, train, TrainConfig,
};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "{}: {criterion} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion}: {detail}");
}

/// Analytic gradients match central finite differences for all six losses
/// under both margins, on both policy parameterizations, with at least 200
/// probes per combination at relative error <= 1e-6, in under a minute.
#[test]
fn gradient_audit_all_combinations() {
    let started = Instant::now();
    let audit = audit_all_combinations(0, 100).expect("audit runs");
    let elapsed = started.elapsed();
    let enough_probes = audit.combos.iter().all(|c| c.probes >= 200);
    let pass = audit.pass
        && audit.combos.len() == 12
        && enough_probes
        && audit.max_rel_err <= 1e-6
        && elapsed.as_secs() < 60;
    report(
        "finite-difference gradient audit",
        pass,
        &format!(
            "12 loss x margin combinations, >=200 probes each, max relative error {:.3e} (tolerance 1e-6), {:.2?}",
            audit.max_rel_err, elapsed
        ),
    );
}

/// The specialized balanced-margin and relative-margin logistic gradients
/// agree with the generic chain-rule gradient within 1e-12 on 1000 randomly
/// perturbed pairs.
#[test]
fn specialized_steps_match_generic() {
    let dataset = generate_dcr_synthetic(13, 8, 4, 6).expect("synthetic dataset");
    let mut model = PolicyModel::shared_feature(4).expect("model");
    model.snapshot_reference();
    let loss = LossSpec::new(LossKind::LogisticLog, 0.3).expect("loss");
    let balanced = MarginSpec::balanced(0.7).expect("margin");
    let relative = MarginSpec::relative();

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let noise = Normal::new(0.0, 0.8).expect("noise");
    let mut max_diff = 0.0f64;
    for _ in 0..1000 {
        let params: Vec<f64> = (0..model.num_params())
            .map(|_| noise.sample(&mut rng))
            .collect();
        model.set_params(&params).expect("set params");
        let i = rng.random_range(0..dataset.len());
        let pair = &dataset.pairs()[i];
        let set = dataset.set_for(&pair.prompt_id).expect("coverage");

        let args = (set, pair.chosen_id.as_str(), pair.rejected_id.as_str());
        let gen_b = generic_pair_gradient(&model, args.0, args.1, args.2, &loss, &balanced)
            .expect("generic balanced");
        let spec_b =
            bpo_pair_gradient(&model, args.0, args.1, args.2, &loss, &balanced).expect("bpo");
        let gen_r = generic_pair_gradient(&model, args.0, args.1, args.2, &loss, &relative)
            .expect("generic relative");
        let spec_r =
            dpo_pair_gradient(&model, args.0, args.1, args.2, &loss, &relative).expect("dpo");

        for (g, s) in [(&gen_b, &spec_b), (&gen_r, &spec_r)] {
            for (a, b) in g.grad.iter().zip(&s.grad) {
                max_diff = max_diff.max((a - b).abs());
            }
            max_diff = max_diff
                .max((g.r_w - s.r_w).abs())
                .max((g.r_l - s.r_l).abs())
                .max((g.margin - s.margin).abs())
                .max((g.loss - s.loss).abs());
        }
    }
    report(
        "specialized gradients reproduce the generic step",
        max_diff <= 1e-12,
        &format!("1000 random pairs, both margins; max |difference| {max_diff:.3e} (tolerance 1e-12)"),
    );
}

/// Whenever the balanced margin reaches gamma, the chosen response's
/// likelihood ratio is at least e^(gamma/beta): zero failures over one
/// million qualifying random draws at tolerance 1e-9, and over every
/// qualifying step of a real balanced-margin training trace.
#[test]
fn chosen_likelihood_bound_holds() {
    // one million random draws, chunked so each report stays small
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0usize;
    let mut failures = 0usize;
    for _ in 0..100 {
        let mut pairs = Vec::with_capacity(10_000);
        let alpha: f64 = rng.random_range(0.01..=1.0);
        let spec = MarginSpec::balanced(alpha).expect("margin");
        let mut gamma = f64::INFINITY;
        for _ in 0..10_000 {
            let lw: f64 = rng.random_range(-50.0..50.0);
            let ll: f64 = rng.random_range(-50.0..50.0);
            let beta: f64 = rng.random_range(0.01..2.0);
            let pair = RewardPair::new(lw, ll, beta).expect("pair");
            let (margin, _) = balanced_margin(&pair, &spec).expect("margin value");
            gamma = gamma.min(margin);
            pairs.push(pair);
        }
        // every pair in the chunk clears the chunk's gamma, so all qualify
        let chunk = bound_check_pairs(&pairs, &spec, gamma - 1e-12).expect("bound check");
        checked += chunk.checked;
        failures += chunk.failures;
    }

    // a real training trace
    let dataset = generate_dcr_synthetic(7, 24, 8, 16).expect("synthetic dataset");
    let mut model = PolicyModel::shared_feature(8).expect("model");
    model.snapshot_reference();
    let loss = LossSpec::new(LossKind::LogisticLog, 0.1).expect("loss");
    let spec = MarginSpec::balanced(1.0).expect("margin");
    let mut config = TrainConfig::new(loss, spec);
    config.seed = 7;
    let trace = train(&mut model, &dataset, &config).expect("training");
    let gamma = trailing_min_margin(&trace, 0.25).expect("gamma");
    let trace_report = bound_check_trace(&trace, &spec, 0.1, gamma).expect("trace bound");

    let pass = checked == 1_000_000
        && failures == 0
        && trace_report.failures == 0
        && trace_report.checked > 0;
    report(
        "chosen-likelihood lower bound",
        pass,
        &format!(
            "{checked} qualifying draws, {failures} failures (tolerance 1e-9); training trace: {} qualifying steps, {} failures",
            trace_report.checked, trace_report.failures
        ),
    );
}

/// On the frozen synthetic dataset and seed, relative-margin training
/// degrades the chosen reward below zero (decay detected) while
/// balanced-margin training with alpha = 1 keeps it positive with a
/// non-negative post-burn-in trend, all in under two minutes.
#[test]
fn decay_reproduction_and_cure() {
    let started = Instant::now();
    let dataset = generate_dcr_synthetic(7, 24, 8, 16).expect("synthetic dataset");
    let loss = LossSpec::new(LossKind::LogisticLog, 0.1).expect("loss");

    let run = |margin: MarginSpec| {
        let mut model = PolicyModel::shared_feature(8).expect("model");
        model.snapshot_reference();
        let mut config = TrainConfig::new(loss, margin);
        config.seed = 7;
        let trace = train(&mut model, &dataset, &config).expect("training");
        let verdict = dcr_detect(&trace, 0.25).expect("detector");
        (trace.records().last().expect("steps").r_w_mean, verdict)
    };

    let (dpo_final, dpo_report) = run(MarginSpec::relative());
    let (bpo_final, bpo_report) = run(MarginSpec::balanced(1.0).expect("margin"));
    let elapsed = started.elapsed();

    let pass = dpo_report.verdict == DcrVerdict::Dcr
        && dpo_final < 0.0
        && bpo_report.verdict == DcrVerdict::NoDcr
        && bpo_final > 0.0
        && bpo_report.window_slope >= 0.0
        && elapsed.as_secs() < 120;
    report(
        "chosen-reward decay reproduction and cure",
        pass,
        &format!(
            "relative margin: final r_w {dpo_final:.3} -> {}; balanced alpha=1: final r_w {bpo_final:.3}, window slope {:.2e} -> {}; {:.2?}",
            verdict_str(dpo_report.verdict),
            bpo_report.window_slope,
            verdict_str(bpo_report.verdict),
            elapsed
        ),
    );
}

fn verdict_str(v: DcrVerdict) -> &'static str {
    match v {
        DcrVerdict::Dcr => "DCR",
        DcrVerdict::NoDcr => "NoDCR",
    }
}

/// On the standard reward grid, the balanced margin leaves a smaller
/// vanishing-gradient region than the relative margin for the logistic loss.
#[test]
fn balanced_margin_shrinks_low_gradient_region() {
    let loss = LossSpec::new(LossKind::LogisticLog, 1.0).expect("loss");
    let bounds = GridBounds::new(-5.0, 5.0).expect("bounds");
    let relative =
        gradient_field(&loss, &MarginSpec::relative(), bounds, 101).expect("relative field");
    let balanced = gradient_field(
        &loss,
        &MarginSpec::balanced(1.0).expect("margin"),
        bounds,
        101,
    )
    .expect("balanced field");
    let rel_frac = low_gradient_fraction(&relative, 0.05).expect("fraction");
    let bal_frac = low_gradient_fraction(&balanced, 0.05).expect("fraction");
    report(
        "balanced margin shrinks the low-gradient region",
        bal_frac < rel_frac,
        &format!(
            "logistic loss, grid [-5,5]^2 at 101x101, epsilon 0.05: balanced fraction {bal_frac:.6} < relative fraction {rel_frac:.6}"
        ),
    );
}

/// Hand-checkable unit values hold to 1e-12: loss values at anchor points,
/// sigmoid symmetry, and the balanced margin's branch selections.
#[test]
fn unit_values_exact() {
    let tol = 1e-12;
    let value = |kind: LossKind, z: f64| {
        let spec = LossSpec::new(kind, 1.0).expect("loss");
        loss_value(&spec, z).expect("finite margin")
    };
    let mut checks: Vec<(String, f64)> = vec![
        (
            "logistic_log at 0 vs ln 2".into(),
            (value(LossKind::LogisticLog, 0.0) - LN_2).abs(),
        ),
        ("hinge at 1 vs 0".into(), value(LossKind::Hinge, 1.0).abs()),
        (
            "savage at 0 vs 1/4".into(),
            (value(LossKind::Savage, 0.0) - 0.25).abs(),
        ),
        (
            "exponential at 0 vs 1".into(),
            (value(LossKind::Exponential, 0.0) - 1.0).abs(),
        ),
        (
            "squared at 0 vs 1".into(),
            (value(LossKind::Squared, 0.0) - 1.0).abs(),
        ),
        (
            "truncated_quadratic at 0 vs 1".into(),
            (value(LossKind::TruncatedQuadratic, 0.0) - 1.0).abs(),
        ),
        (
            "sigmoid symmetry at 1.7".into(),
            (sigmoid(1.7) + sigmoid(-1.7) - 1.0).abs(),
        ),
        ("sigmoid at 0 vs 1/2".into(), (sigmoid(0.0) - 0.5).abs()),
    ];

    // branch selections of min(r_w, -alpha * r_l)
    let spec = MarginSpec::balanced(0.5).expect("margin");
    let chosen_side = RewardPair::new(1.0, -8.0, 1.0).expect("pair");
    let (m1, b1) = balanced_margin(&chosen_side, &spec).expect("margin");
    checks.push((
        "chosen-side branch value min(1, 4) = 1".into(),
        (m1 - 1.0).abs() + f64::from(b1 != MarginBranch::ChosenActive),
    ));
    let rejected_side = RewardPair::new(5.0, -4.0, 1.0).expect("pair");
    let (m2, b2) = balanced_margin(&rejected_side, &spec).expect("margin");
    checks.push((
        "rejected-side branch value min(5, 2) = 2".into(),
        (m2 - 2.0).abs() + f64::from(b2 != MarginBranch::RejectedActive),
    ));
    let relative_pair = RewardPair::new(1.5, -0.5, 1.0).expect("pair");
    checks.push((
        "relative margin 1.5 - (-0.5) = 2".into(),
        (relative_margin(&relative_pair) - 2.0).abs(),
    ));

    let worst = checks
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    report(
        "unit anchor values",
        worst.1 <= tol,
        &format!(
            "{} checks, worst deviation {:.3e} ({}) at tolerance 1e-12",
            checks.len(),
            worst.1,
            worst.0
        ),
    );
}

/// The pair builder picks the first-occurrence maximum and minimum rewards
/// of each group and discards all-equal groups, exactly.
#[test]
fn maxmin_pairing_golden() {
    let group = |id: &str, rewards: &[f64]| {
        let ids = (0..rewards.len()).map(|i| format!("r{i}")).collect();
        ScoredGroup::new(id.to_string(), ids, rewards.to_vec(), None).expect("group")
    };
    let groups = vec![
        group("dup_max", &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        group("all_equal_a", &[0.5, 0.5, 0.5]),
        group("ordinary", &[0.2, 0.9, 0.5]),
        group("all_equal_b", &[2.0, 2.0]),
        group("descending", &[3.0, 2.0, 1.0]),
    ];
    let outcome = build_maxmin_pairs(&groups).expect("pairing");

    let expected = [
        ("dup_max", "r0", "r2"),
        ("ordinary", "r1", "r0"),
        ("descending", "r0", "r2"),
    ];
    let got: Vec<(&str, &str, &str)> = outcome
        .dataset
        .pairs()
        .iter()
        .map(|p| {
            (
                p.prompt_id.as_str(),
                p.chosen_id.as_str(),
                p.rejected_id.as_str(),
            )
        })
        .collect();
    let pass = got == expected
        && outcome.groups_read == 5
        && outcome.discarded_all_equal == 2
        && outcome.dataset.candidate_sets().len() == 3;
    report(
        "max-min pair construction",
        pass,
        &format!(
            "5 groups -> {} pairs ({:?}), {} all-equal groups discarded",
            got.len(),
            got,
            outcome.discarded_all_equal
        ),
    );
}

/// Repeating a seeded training run or gradient-field tabulation writes
/// byte-identical CSV artifacts.
#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dataset = generate_dcr_synthetic(7, 8, 4, 6).expect("synthetic dataset");
    let loss = LossSpec::new(LossKind::LogisticLog, 0.1).expect("loss");
    let spec = MarginSpec::balanced(1.0).expect("margin");

    let train_csv = |path: &std::path::Path| {
        let mut model = PolicyModel::shared_feature(4).expect("model");
        model.snapshot_reference();
        let mut config = TrainConfig::new(loss, spec);
        config.epochs = 40;
        config.seed = 7;
        let trace = train(&mut model, &dataset, &config).expect("training");
        trace.write_csv(path).expect("write trace");
        std::fs::read(path).expect("read trace")
    };
    let t1 = train_csv(&dir.path().join("trace_a.csv"));
    let t2 = train_csv(&dir.path().join("trace_b.csv"));

    let field_csv = |path: &std::path::Path| {
        let field_loss = LossSpec::new(LossKind::LogisticLog, 1.0).expect("loss");
        let bounds = GridBounds::new(-5.0, 5.0).expect("bounds");
        let field = gradient_field(&field_loss, &spec, bounds, 51).expect("field");
        field.write_csv(path).expect("write field");
        std::fs::read(path).expect("read field")
    };
    let f1 = field_csv(&dir.path().join("field_a.csv"));
    let f2 = field_csv(&dir.path().join("field_b.csv"));

    let pass = t1 == t2 && f1 == f2 && !t1.is_empty() && !f1.is_empty();
    report(
        "seeded determinism",
        pass,
        &format!(
            "training trace CSV ({} bytes) and gradient-field CSV ({} bytes) byte-identical across reruns",
            t1.len(),
            f1.len()
        ),
    );
}
