//! Consolidation of finished runs into long-format tables, seed aggregates and
//! two-column plot data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::{self, read_csv, write_atomic, MetricRow, SharpnessRow, SweepRow};
use crate::error::CliError;

pub const LONG_CSV: &str = "long.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SHARPNESS_SUMMARY_CSV: &str = "sharpness_summary.csv";
pub const SWEEP_SUMMARY_CSV: &str = "sweep_summary.csv";

/// Metrics that get a rebound plot file.
pub const REBOUND_METRICS: [&str; 3] = ["chair_s", "chair_i", "pope_f1_mean"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub config_hash: String,
    pub model: String,
    pub attack: String,
    pub step: usize,
    /// Mean attack size at this grid position.
    pub n: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessSummaryRow {
    pub run: String,
    pub config_hash: String,
    pub model: String,
    pub rho: f64,
    pub mean_increase: f64,
    pub mean_increase_std: f64,
    pub worst_case_increase: f64,
    pub worst_case_increase_std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub run: String,
    pub config_hash: String,
    pub rho: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub metrics: Vec<MetricRow>,
    pub sharpness: Vec<SharpnessRow>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub sharpness: Vec<SharpnessSummaryRow>,
    pub sweep: Vec<SweepSummaryRow>,
    /// Every file written, relative to the report directory.
    pub files: Vec<String>,
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn seed_dirs(run: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !run.is_dir() {
        return Err(CliError::MissingArtifact(run.display().to_string()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(run)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n == artifacts::EVAL_CSV || (n.starts_with("attack-") && n.ends_with(".csv")))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Read every table under the given run directories (`<out>/<name>`).
pub fn collect(runs: &[PathBuf]) -> Result<ReportInputs, CliError> {
    let mut inputs = ReportInputs::default();
    for run in runs {
        for dir in seed_dirs(run)? {
            for f in csv_files(&dir)? {
                inputs.metrics.extend(read_csv::<MetricRow>(&f)?);
            }
            let sharp = dir.join(artifacts::SHARPNESS_CSV);
            if sharp.exists() {
                inputs.sharpness.extend(read_csv::<SharpnessRow>(&sharp)?);
            }
        }
        let sweep = run.join(artifacts::SWEEP_CSV);
        if sweep.exists() {
            inputs.sweep.extend(read_csv::<SweepRow>(&sweep)?);
        }
    }
    if inputs.metrics.is_empty() && inputs.sweep.is_empty() {
        let names: Vec<String> = runs.iter().map(|r| r.display().to_string()).collect();
        return Err(CliError::MissingArtifact(format!("no completed runs under {}", names.join(", "))));
    }
    Ok(inputs)
}

/// Provenance checks: one eval set always, one config hash unless allowed.
pub fn check_inputs(inputs: &ReportInputs, allow_mixed: bool) -> Result<(), CliError> {
    let ids: BTreeSet<&str> = inputs
        .metrics
        .iter()
        .map(|r| r.eval_set_id.as_str())
        .chain(inputs.sweep.iter().map(|r| r.eval_set_id.as_str()))
        .collect();
    if ids.len() > 1 {
        return Err(CliError::Config(format!("inconsistent eval set ids: {ids:?}")));
    }
    let hashes: BTreeSet<&str> = inputs
        .metrics
        .iter()
        .map(|r| r.config_hash.as_str())
        .chain(inputs.sharpness.iter().map(|r| r.config_hash.as_str()))
        .chain(inputs.sweep.iter().map(|r| r.config_hash.as_str()))
        .collect();
    if hashes.len() > 1 && !allow_mixed {
        return Err(CliError::Config(format!("inputs mix config hashes {hashes:?}; pass --allow-mixed to combine them")));
    }
    Ok(())
}

pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, &str, &str, &str, usize, &str), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.run, &r.config_hash, &r.model, &r.attack, r.step, &r.metric)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((run, hash, model, attack, step, metric), g)| {
            let (mean, std) = mean_std(&g.iter().map(|r| r.value).collect::<Vec<_>>());
            let n = g.iter().map(|r| r.n as f64).sum::<f64>() / g.len() as f64;
            SummaryRow {
                run: run.into(),
                config_hash: hash.into(),
                model: model.into(),
                attack: attack.into(),
                step,
                n,
                metric: metric.into(),
                mean,
                std,
                n_seeds: g.len(),
            }
        })
        .collect()
}

fn key(x: f64) -> u64 {
    x.to_bits()
}

pub fn summarize_sharpness(rows: &[SharpnessRow]) -> Vec<SharpnessSummaryRow> {
    let mut groups: BTreeMap<(&str, &str, &str, u64), Vec<&SharpnessRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.run, &r.config_hash, &r.model, key(r.rho))).or_default().push(r);
    }
    let mut out: Vec<SharpnessSummaryRow> = groups
        .into_iter()
        .map(|((run, hash, model, rho), g)| {
            let (m, ms) = mean_std(&g.iter().map(|r| r.mean_increase).collect::<Vec<_>>());
            let (w, ws) = mean_std(&g.iter().map(|r| r.worst_case_increase).collect::<Vec<_>>());
            SharpnessSummaryRow {
                run: run.into(),
                config_hash: hash.into(),
                model: model.into(),
                rho: f64::from_bits(rho),
                mean_increase: m,
                mean_increase_std: ms,
                worst_case_increase: w,
                worst_case_increase_std: ws,
                n_seeds: g.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| (&a.run, &a.config_hash, &a.model).cmp(&(&b.run, &b.config_hash, &b.model)).then(a.rho.total_cmp(&b.rho)));
    out
}

pub const SWEEP_METRICS: [&str; 6] = ["chair_s", "chair_i", "pope_f1_mean", "ppl", "bleu4", "recall"];

fn sweep_value(r: &SweepRow, metric: &str) -> f64 {
    match metric {
        "chair_s" => r.chair_s,
        "chair_i" => r.chair_i,
        "pope_f1_mean" => r.pope_f1_mean,
        "ppl" => r.ppl,
        "bleu4" => r.bleu4,
        "recall" => r.recall,
        _ => f64::NAN,
    }
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummaryRow> {
    let mut cells: BTreeMap<(&str, &str, u64, u64, u64), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((&r.run, &r.config_hash, key(r.rho), key(r.lambda1), key(r.lambda2))).or_default().push(r);
    }
    let mut cells: Vec<_> = cells.into_iter().collect();
    cells.sort_by(|(a, _), (b, _)| {
        let f = f64::from_bits;
        (a.0, a.1).cmp(&(b.0, b.1)).then(f(a.3).total_cmp(&f(b.3))).then(f(a.4).total_cmp(&f(b.4))).then(f(a.2).total_cmp(&f(b.2)))
    });
    let mut out = Vec::new();
    for ((run, hash, rho, l1, l2), in_cell) in cells {
        let (rho, l1, l2) = (f64::from_bits(rho), f64::from_bits(l1), f64::from_bits(l2));
        let ok: Vec<&&SweepRow> = in_cell.iter().filter(|r| r.status == "ok").collect();
        for metric in SWEEP_METRICS {
            let (mean, std) = mean_std(&ok.iter().map(|r| sweep_value(r, metric)).collect::<Vec<_>>());
            out.push(SweepSummaryRow {
                run: run.into(),
                config_hash: hash.into(),
                rho,
                lambda1: l1,
                lambda2: l2,
                metric: metric.into(),
                mean,
                std,
                n_ok: ok.len(),
                n_failed: in_cell.len() - ok.len(),
            });
        }
    }
    out
}

/// Two whitespace-separated columns under `#` header lines.
pub fn dat(config_hash: &str, x_name: &str, y_name: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("# config_hash {config_hash}\n# {x_name} {y_name}\n");
    for (x, y) in points {
        writeln!(s, "{x} {y}").expect("string write");
    }
    s
}

/// Parse a two-column data file, skipping its header.
pub fn read_dat(text: &str) -> Vec<(f64, f64)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .filter_map(|l| {
            let mut it = l.split_whitespace().map(|v| v.parse::<f64>());
            match (it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y))) => Some((x, y)),
                _ => None,
            }
        })
        .collect()
}

fn plot_files(report: &Report) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for r in report.summary.iter().filter(|r| r.attack == "relearn") {
        if !REBOUND_METRICS.contains(&r.metric.as_str()) {
            continue;
        }
        let name = format!("{}/{}/rebound-{}-{}.dat", r.run, r.config_hash, r.model, r.metric);
        if files.iter().any(|(f, _)| *f == name) {
            continue;
        }
        let points: Vec<(f64, f64)> = report
            .summary
            .iter()
            .filter(|s| s.run == r.run && s.config_hash == r.config_hash && s.model == r.model && s.attack == "relearn" && s.metric == r.metric)
            .map(|s| (s.n, s.mean))
            .collect();
        files.push((name, dat(&r.config_hash, "n", &r.metric, &points)));
    }
    for r in &report.sharpness {
        let name = format!("{}/{}/sharpness-{}.dat", r.run, r.config_hash, r.model);
        if files.iter().any(|(f, _)| *f == name) {
            continue;
        }
        let points: Vec<(f64, f64)> =
            report.sharpness.iter().filter(|s| s.run == r.run && s.config_hash == r.config_hash && s.model == r.model).map(|s| (s.rho, s.mean_increase)).collect();
        files.push((name, dat(&r.config_hash, "rho", "mean_increase", &points)));
    }
    for r in &report.sweep {
        let name = format!("{}/{}/sweep-l1_{}-l2_{}-{}.dat", r.run, r.config_hash, r.lambda1, r.lambda2, r.metric);
        if files.iter().any(|(f, _)| *f == name) {
            continue;
        }
        let points: Vec<(f64, f64)> = report
            .sweep
            .iter()
            .filter(|s| s.run == r.run && s.config_hash == r.config_hash && key(s.lambda1) == key(r.lambda1) && key(s.lambda2) == key(r.lambda2) && s.metric == r.metric)
            .map(|s| (s.rho, s.mean))
            .collect();
        files.push((name, dat(&r.config_hash, "rho", &r.metric, &points)));
    }
    files
}

/// Build every table and plot file from collected inputs and write them under
/// `dest`.
pub fn write_report(inputs: &ReportInputs, dest: &Path, allow_mixed: bool) -> Result<Report, CliError> {
    check_inputs(inputs, allow_mixed)?;
    let mut report = Report {
        summary: summarize(&inputs.metrics),
        sharpness: summarize_sharpness(&inputs.sharpness),
        sweep: summarize_sweep(&inputs.sweep),
        files: Vec::new(),
    };
    let mut out: Vec<(String, Vec<u8>)> = vec![
        (LONG_CSV.into(), artifacts::csv_bytes(&inputs.metrics)?),
        (SUMMARY_CSV.into(), artifacts::csv_bytes(&report.summary)?),
    ];
    if !report.sharpness.is_empty() {
        out.push((SHARPNESS_SUMMARY_CSV.into(), artifacts::csv_bytes(&report.sharpness)?));
    }
    if !report.sweep.is_empty() {
        out.push((SWEEP_SUMMARY_CSV.into(), artifacts::csv_bytes(&report.sweep)?));
    }
    out.extend(plot_files(&report).into_iter().map(|(n, s)| (n, s.into_bytes())));
    for (name, bytes) in &out {
        let path = dest.join(name);
        fs::create_dir_all(path.parent().expect("report directory"))?;
        write_atomic(&path, bytes)?;
        report.files.push(name.clone());
    }
    Ok(report)
}

pub fn report(runs: &[PathBuf], dest: &Path, allow_mixed: bool) -> Result<Report, CliError> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    write_report(&collect(runs)?, dest, allow_mixed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, model: &str, attack: &str, step: usize, n: usize, metric: &str, value: f64) -> MetricRow {
        MetricRow {
            run: "r".into(),
            config_hash: "h".into(),
            eval_set_id: "e".into(),
            seed,
            model: model.into(),
            attack: attack.into(),
            step,
            n,
            metric: metric.into(),
            value,
        }
    }

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        assert_eq!(mean_std(&[2.5, 2.5, 2.5]), (2.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn single_seed_has_zero_std() {
        let s = summarize(&[row(0, "sare", "none", 0, 0, "chair_s", 12.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].mean, s[0].std, s[0].n_seeds), (12.0, 0.0, 1));
    }

    #[test]
    fn identical_seeds_average_to_the_common_value() {
        let rows: Vec<MetricRow> = (0..3).map(|s| row(s, "sare", "none", 0, 0, "chair_s", 7.25)).collect();
        let s = summarize(&rows);
        assert_eq!((s[0].mean, s[0].std, s[0].n_seeds), (7.25, 0.0, 3));
    }

    #[test]
    fn rebound_files_have_one_point_per_grid_position() {
        let mut rows = Vec::new();
        for seed in 0..2 {
            for (step, n) in [0, 10 + seed as usize, 20 + seed as usize].into_iter().enumerate() {
                for model in ["sare", "baseline"] {
                    rows.push(row(seed, model, "relearn", step, n, "chair_s", step as f64));
                }
            }
        }
        let tmp = tempfile::tempdir().unwrap();
        let r = write_report(&ReportInputs { metrics: rows, ..Default::default() }, tmp.path(), false).unwrap();
        for model in ["sare", "baseline"] {
            let text = fs::read_to_string(tmp.path().join(format!("r/h/rebound-{model}-chair_s.dat"))).unwrap();
            assert_eq!(read_dat(&text), vec![(0.0, 0.0), (10.5, 1.0), (20.5, 2.0)]);
        }
        assert!(r.files.contains(&LONG_CSV.to_string()));
        assert!(r.files.contains(&SUMMARY_CSV.to_string()));
    }

    #[test]
    fn provenance_checks() {
        let mut other = row(1, "sare", "none", 0, 0, "chair_s", 1.0);
        other.config_hash = "g".into();
        let inputs = ReportInputs { metrics: vec![row(0, "sare", "none", 0, 0, "chair_s", 1.0), other], ..Default::default() };
        assert!(matches!(check_inputs(&inputs, false), Err(CliError::Config(_))));
        check_inputs(&inputs, true).unwrap();
        let mut wrong_set = row(1, "sare", "none", 0, 0, "chair_s", 1.0);
        wrong_set.eval_set_id = "f".into();
        let inputs = ReportInputs { metrics: vec![row(0, "sare", "none", 0, 0, "chair_s", 1.0), wrong_set], ..Default::default() };
        assert!(check_inputs(&inputs, true).is_err());
    }

    #[test]
    fn sweep_summary_skips_failed_cells() {
        let cell = |seed: u64, rho: f64, status: &str, chair: f64| SweepRow {
            run: "r".into(),
            config_hash: "h".into(),
            eval_set_id: "e".into(),
            seed,
            rho,
            lambda1: 0.3,
            lambda2: 0.2,
            status: status.into(),
            error: String::new(),
            chair_s: chair,
            chair_i: chair,
            pope_f1_mean: chair,
            ppl: chair,
            bleu4: chair,
            recall: chair,
        };
        let rows = vec![cell(0, 0.1, "ok", 4.0), cell(1, 0.1, "failed", f64::NAN), cell(0, 0.05, "ok", 2.0), cell(1, 0.05, "ok", 4.0)];
        let s = summarize_sweep(&rows);
        let chair: Vec<&SweepSummaryRow> = s.iter().filter(|r| r.metric == "chair_s").collect();
        assert_eq!(chair.len(), 2);
        assert_eq!((chair[0].rho, chair[0].mean, chair[0].n_ok, chair[0].n_failed), (0.05, 3.0, 2, 0));
        assert_eq!((chair[1].rho, chair[1].mean, chair[1].n_ok, chair[1].n_failed), (0.1, 4.0, 1, 1));
    }

    #[test]
    fn dat_format() {
        let text = dat("h", "x", "y", &[(1.0, 2.5), (3.0, -1.0)]);
        assert_eq!(text, "# config_hash h\n# x y\n1 2.5\n3 -1\n");
        assert_eq!(read_dat(&text), vec![(1.0, 2.5), (3.0, -1.0)]);
    }
}
