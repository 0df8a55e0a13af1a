mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sare(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sare")).env("SARE_OUT", out).env("RUST_LOG", "warn").args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("out");

    let o = sare(&out, &["-c", cfg, "unlearn", "--method", "sare"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&sare(&out, &["-c", cfg, "--set", "unlearn.weights.rhoo=1", "curate"])), 1);
    assert_eq!(code(&sare(&out, &["-c", cfg, "--set", "unlearn.weights.rho=-1", "curate"])), 1);
    assert_eq!(code(&sare(&out, &["-c", "/nonexistent.toml", "curate"])), 1);
    assert_eq!(code(&sare(&out, &["-c", cfg, "unlearn", "--method", "sgd"])), 1);
    assert_eq!(code(&sare(&out, &["frobnicate"])), 1);
    assert_eq!(code(&sare(&out, &["--help"])), 0);

    assert_eq!(code(&sare(&out, &["-c", cfg, "--seed", "0", "curate"])), 0);
    assert!(out.join("tiny/seed-0/corpus.jsonl").exists());
    assert!(!out.join("tiny/seed-1").exists());
    assert_eq!(code(&sare(&out, &["-c", cfg, "--seed", "0", "biastrain"])), 0);
    let o = sare(&out, &["-c", cfg, "--seed", "0", "--rho", "0.1", "unlearn", "--method", "sare"]);
    assert_eq!(code(&o), 1, "a changed config must not reuse the run directory");
    let diverge = ["-c", cfg, "--seed", "0", "--force", "--set", "unlearn.optimizer.lr=5.0", "--set", "unlearn.divergence_factor=1.01"];
    let o = sare(&out, &[&diverge[..], &["curate"]].concat());
    assert_eq!(code(&o), 0);
    assert_eq!(code(&sare(&out, &[&diverge[..], &["biastrain"]].concat())), 0);
    let o = sare(&out, &[&diverge[..], &["unlearn", "--method", "ga"]].concat());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stage_by_stage_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    for args in [
        vec!["curate"],
        vec!["biastrain"],
        vec!["unlearn", "--method", "sare"],
        vec!["unlearn", "--method", "baseline"],
        vec!["attack", "--kind", "relearn"],
        vec!["attack", "--kind", "lora", "--method", "sare"],
        vec!["attack", "--kind", "advprompt", "--method", "biased"],
        vec!["eval"],
        vec!["sweep"],
        vec!["report"],
    ] {
        let o = sare(&out, &[&["-c", cfg][..], &args].concat());
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let run = out.join("tiny");
    assert!(run.join("seed-1/attack-relearn-baseline.csv").exists());
    assert!(run.join("seed-1/attack-lora-sare.csv").exists());
    assert!(!run.join("seed-1/attack-lora-baseline.csv").exists());
    assert!(run.join("seed-0/attack-advprompt-biased.csv").exists());
    assert!(run.join("sweep.csv").exists());
    assert!(run.join("report/summary.csv").exists());
    let summary = fs::read_to_string(run.join("report/summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",2")), "every group spans both seeds");
}

#[test]
fn config_subcommand_applies_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sare(tmp.path(), &["--rho", "0.15", "--set", "seeds=[4, 5]", "--set", "eval.eval_set_id=other", "config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let cfg = sare_cli::ExperimentConfig::from_toml(&body).unwrap();
    assert_eq!(cfg.unlearn.weights.rho, 0.15);
    assert_eq!(cfg.seeds, vec![4, 5]);
    assert_eq!(cfg.eval.eval_set_id, "other");
    assert!(text.starts_with(&format!("# config_hash {}", cfg.hash())));
}
