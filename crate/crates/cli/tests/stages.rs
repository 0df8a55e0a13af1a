mod common;

use std::fs;

use sare_cli::artifacts::{self, read_csv, MetricRow, RunDir, SharpnessRow, StageState, SweepRow};
use sare_cli::{pipeline, report, stages, sweep, CliError};
use sare_core::attacks::AttackKind;
use sare_core::metrics::EvalReport;
use sare_core::tsam::Method;

use common::tiny;

#[test]
fn curate_is_deterministic_and_idempotent() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    assert_eq!(stages::curate(&cfg, a.path(), 0, false).unwrap(), StageState::Run);
    assert_eq!(stages::curate(&cfg, b.path(), 0, false).unwrap(), StageState::Run);
    let da = RunDir::new(a.path(), &cfg, 0);
    let db = RunDir::new(b.path(), &cfg, 0);
    for f in [artifacts::CORPUS, artifacts::EVAL_CORPUS, artifacts::CURATED] {
        assert_eq!(fs::read(da.path(f)).unwrap(), fs::read(db.path(f)).unwrap(), "{f}");
    }
    let before = fs::read(da.path(artifacts::CORPUS)).unwrap();
    assert_eq!(stages::curate(&cfg, a.path(), 0, false).unwrap(), StageState::UpToDate);
    assert_eq!(stages::curate(&cfg, a.path(), 0, true).unwrap(), StageState::Run);
    assert_eq!(fs::read(da.path(artifacts::CORPUS)).unwrap(), before);
    let mut other = cfg.clone();
    other.world.p_h = 0.4;
    assert!(matches!(stages::curate(&other, a.path(), 0, false), Err(CliError::Exists(_))));
}

#[test]
fn unlearn_needs_a_bias_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    stages::curate(&cfg, tmp.path(), 0, false).unwrap();
    let err = stages::unlearn(&cfg, tmp.path(), 0, Method::Sare, false).unwrap_err();
    assert!(matches!(err, CliError::MissingArtifact(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    let err = stages::biastrain(&cfg, &tmp.path().join("elsewhere"), 0, false).unwrap_err();
    assert!(matches!(err, CliError::MissingArtifact(_)));
    let err = stages::eval(&cfg, tmp.path(), 0, false).unwrap_err();
    assert!(matches!(err, CliError::MissingArtifact(_)));
}

#[test]
fn upstream_written_under_another_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    stages::curate(&cfg, tmp.path(), 0, false).unwrap();
    let mut other = cfg.clone();
    other.biastrain.epochs = 3;
    let err = stages::biastrain(&other, tmp.path(), 0, true).unwrap_err();
    assert!(matches!(err, CliError::HashMismatch { .. }), "{err}");
}

#[test]
fn full_pipeline_emits_every_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    stages::run_all(&cfg, tmp.path(), 0, false).unwrap();
    let dir = RunDir::new(tmp.path(), &cfg, 0);
    let n_metrics = EvalReport::default().metrics().len();
    let grid = cfg.attack.relearn_fractions.len();
    for m in &cfg.unlearn.methods {
        for kind in stages::ALL_ATTACKS {
            let rows: Vec<MetricRow> = read_csv(&dir.path(&artifacts::attack_csv(kind.name(), m.name()))).unwrap();
            let points = if kind == AttackKind::Relearn { grid + 1 } else { 1 };
            assert_eq!(rows.len(), points * n_metrics, "{kind:?} {m:?}");
            assert!(rows.iter().all(|r| r.config_hash == cfg.hash() && r.model == m.name() && r.attack == kind.name()));
            if kind == AttackKind::Relearn {
                let steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
                assert_eq!(steps.iter().max(), Some(&grid));
                assert_eq!(rows[0].n, 0);
            }
        }
    }
    let eval: Vec<MetricRow> = read_csv(&dir.path(artifacts::EVAL_CSV)).unwrap();
    assert_eq!(eval.len(), (1 + cfg.unlearn.methods.len()) * n_metrics);
    let sharp: Vec<SharpnessRow> = read_csv(&dir.path(artifacts::SHARPNESS_CSV)).unwrap();
    assert_eq!(sharp.len(), (1 + cfg.unlearn.methods.len()) * cfg.probe.rhos.len());
    let manifest = dir.manifest().unwrap().unwrap();
    for entry in manifest.stages.values() {
        for f in &entry.files {
            assert!(dir.path(f).exists(), "{f}");
        }
    }
    let jsonl = fs::read_to_string(dir.path(artifacts::EVAL_JSONL)).unwrap();
    assert_eq!(jsonl.lines().count(), 1 + cfg.unlearn.methods.len());
    assert!(jsonl.lines().all(|l| l.contains(&cfg.hash())));

    let unlearned = fs::read(dir.path(&artifacts::unlearned_ckpt("sare"))).unwrap();
    assert_eq!(stages::unlearn(&cfg, tmp.path(), 0, Method::Sare, false).unwrap(), StageState::UpToDate);
    assert_eq!(stages::unlearn(&cfg, tmp.path(), 0, Method::Sare, true).unwrap(), StageState::Run);
    assert_eq!(fs::read(dir.path(&artifacts::unlearned_ckpt("sare"))).unwrap(), unlearned);
}

#[test]
fn attack_on_the_biased_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    stages::curate(&cfg, tmp.path(), 1, false).unwrap();
    stages::biastrain(&cfg, tmp.path(), 1, false).unwrap();
    stages::attack(&cfg, tmp.path(), 1, AttackKind::Advprompt, stages::BIASED, false).unwrap();
    let dir = RunDir::new(tmp.path(), &cfg, 1);
    let rows: Vec<MetricRow> = read_csv(&dir.path(&artifacts::attack_csv("advprompt", "biased"))).unwrap();
    assert!(rows.iter().all(|r| r.model == "biased"));
    assert!(matches!(stages::attack(&cfg, tmp.path(), 1, AttackKind::Lora, "nope", false), Err(CliError::Config(_))));
}

fn metric(rows: &[MetricRow], model: &str, name: &str) -> f64 {
    rows.iter().find(|r| r.model == model && r.metric == name).unwrap().value
}

#[test]
fn sweep_accounting_and_reductions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    for s in &cfg.seeds {
        stages::run_all(&cfg, tmp.path(), *s, false).unwrap();
    }
    let path = sweep::sweep(&cfg, tmp.path(), &cfg.seeds, false).unwrap();
    let rows: Vec<SweepRow> = read_csv(&path).unwrap();
    assert_eq!(rows.len(), cfg.sweep.cells().len() * cfg.seeds.len());
    assert!(rows.iter().all(|r| r.status == "ok" && r.config_hash == cfg.hash()));
    for &s in &cfg.seeds {
        let eval: Vec<MetricRow> = read_csv(&RunDir::new(tmp.path(), &cfg, s).path(artifacts::EVAL_CSV)).unwrap();
        let zero = rows.iter().find(|r| r.seed == s && r.rho == 0.0).unwrap();
        assert_eq!(zero.chair_s, metric(&eval, "baseline", "chair_s"));
        assert_eq!(zero.chair_i, metric(&eval, "baseline", "chair_i"));
        assert_eq!(zero.ppl, metric(&eval, "baseline", "ppl"));
        let sare = rows.iter().find(|r| r.seed == s && r.rho == cfg.unlearn.weights.rho).unwrap();
        assert_eq!(sare.chair_s, metric(&eval, "sare", "chair_s"));
        assert_eq!(sare.pope_f1_mean, metric(&eval, "sare", "pope_f1_mean"));
    }
    assert_eq!(sweep::sweep(&cfg, tmp.path(), &cfg.seeds, false).unwrap(), path);
}

#[test]
fn size_one_sweep_matches_a_single_run_in_memory() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.seeds = vec![1];
    cfg.sweep.rho = vec![0.1];
    let rows = sweep::sweep_rows(&cfg, tmp.path(), &cfg.seeds).unwrap();
    assert_eq!(rows.len(), 1);
    let data = pipeline::generate_data(&cfg, 1).unwrap();
    let reference = pipeline::train_reference(&cfg, &data).unwrap();
    let biased = pipeline::bias_train(&cfg, &data).unwrap();
    let weights = sare_core::LossWeights { rho: 0.1, ..cfg.unlearn.weights };
    let (epochs, _) = pipeline::unlearn(&cfg, &data, &biased, Method::Sare, weights).unwrap();
    let r = pipeline::eval_model(&cfg, &data, &reference, epochs.last().unwrap(), false).unwrap();
    assert_eq!((rows[0].chair_s, rows[0].chair_i, rows[0].bleu4), (r.chair_s, r.chair_i, r.bleu4));
}

#[test]
fn failed_cells_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.seeds = vec![0];
    cfg.sweep.rho = vec![0.05, -1.0];
    let rows = sweep::sweep_rows(&cfg, tmp.path(), &cfg.seeds).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].status, "ok");
    assert_eq!(rows[1].status, "failed");
    assert!(!rows[1].error.is_empty());
    assert!(rows[1].chair_s.is_nan());
    cfg.sweep.rho.clear();
    assert!(matches!(sweep::sweep_rows(&cfg, tmp.path(), &cfg.seeds), Err(CliError::Config(_))));
}

#[test]
fn report_over_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    stages::run_all(&cfg, tmp.path(), 0, false).unwrap();
    let run = tmp.path().join(&cfg.name);
    let dest = tmp.path().join("report");
    let r = report::report(&[run.clone()], &dest, false).unwrap();
    assert!(r.summary.iter().all(|s| s.n_seeds == 1 && s.std == 0.0));
    let grid = cfg.attack.relearn_fractions.len();
    for m in &cfg.unlearn.methods {
        let text = fs::read_to_string(dest.join(format!("{}/{}/rebound-{}-chair_s.dat", cfg.name, cfg.hash(), m.name()))).unwrap();
        assert_eq!(report::read_dat(&text).len(), grid + 1);
        assert!(text.contains(&cfg.hash()));
    }
    let long: Vec<MetricRow> = read_csv(&dest.join(report::LONG_CSV)).unwrap();
    assert!(!long.is_empty());

    let mut other = cfg.clone();
    other.name = "other".into();
    other.unlearn.weights.rho = 0.1;
    stages::run_all(&other, tmp.path(), 0, false).unwrap();
    let both = [run.clone(), tmp.path().join("other")];
    assert!(matches!(report::report(&both, &dest, false), Err(CliError::Config(_))));
    report::report(&both, &dest, true).unwrap();

    let mut third = cfg.clone();
    third.name = "third".into();
    third.eval.eval_set_id = "heldout-v2".into();
    stages::run_all(&third, tmp.path(), 0, false).unwrap();
    let err = report::report(&[run, tmp.path().join("third")], &dest, true).unwrap_err();
    assert!(err.to_string().contains("eval set"), "{err}");

    assert!(matches!(report::report(&[tmp.path().join("missing")], &dest, false), Err(CliError::MissingArtifact(_))));
}
