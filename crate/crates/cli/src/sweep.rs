//! Grid sweep over `(rho, lambda1, lambda2)` with SARE unlearning.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use sare_core::tsam::Method;
use sare_core::CaptionModel;

use crate::artifacts::{self, read_csv, write_atomic, RunDir, SweepRow};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{self, SeedData};
use crate::stages;

struct SeedSetup {
    data: SeedData,
    reference: CaptionModel,
    biased: CaptionModel,
}

/// Reuse the stage checkpoints of a seed when they exist.
fn setup(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<SeedSetup, CliError> {
    let dir = RunDir::new(out, cfg, seed);
    let same_config = dir.manifest()?.is_some_and(|m| m.config_hash == dir.hash);
    if same_config && dir.path(artifacts::BIASED_CKPT).exists() && dir.path(artifacts::REFERENCE_CKPT).exists() {
        info!("sweep: seed {seed} reuses {}", dir.root.display());
        return Ok(SeedSetup {
            data: stages::load_data(cfg, &dir)?,
            reference: dir.read_checkpoint(artifacts::REFERENCE_CKPT)?,
            biased: dir.read_checkpoint(artifacts::BIASED_CKPT)?,
        });
    }
    let data = pipeline::generate_data(cfg, seed)?;
    let reference = pipeline::train_reference(cfg, &data)?;
    let biased = pipeline::bias_train(cfg, &data)?;
    Ok(SeedSetup { data, reference, biased })
}

fn run_cell(cfg: &ExperimentConfig, s: &SeedSetup, rho: f64, lambda1: f64, lambda2: f64) -> Result<SweepRow, CliError> {
    let weights = sare_core::LossWeights { lambda1, lambda2, rho };
    weights.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let (epochs, _) = pipeline::unlearn(cfg, &s.data, &s.biased, Method::Sare, weights)?;
    let model = epochs.last().expect("at least one epoch");
    let r = pipeline::eval_model(cfg, &s.data, &s.reference, model, false)?;
    Ok(SweepRow {
        run: cfg.name.clone(),
        config_hash: cfg.hash(),
        eval_set_id: cfg.eval.eval_set_id.clone(),
        seed: s.data.seed,
        rho,
        lambda1,
        lambda2,
        status: "ok".into(),
        error: String::new(),
        chair_s: r.chair_s,
        chair_i: r.chair_i,
        pope_f1_mean: r.pope_f1.mean(),
        ppl: r.ppl,
        bleu4: r.bleu4,
        recall: r.recall,
    })
}

fn failed_row(cfg: &ExperimentConfig, seed: u64, cell: (f64, f64, f64), err: &CliError) -> SweepRow {
    SweepRow {
        run: cfg.name.clone(),
        config_hash: cfg.hash(),
        eval_set_id: cfg.eval.eval_set_id.clone(),
        seed,
        rho: cell.0,
        lambda1: cell.1,
        lambda2: cell.2,
        status: "failed".into(),
        error: err.to_string(),
        chair_s: f64::NAN,
        chair_i: f64::NAN,
        pope_f1_mean: f64::NAN,
        ppl: f64::NAN,
        bleu4: f64::NAN,
        recall: f64::NAN,
    }
}

pub fn sweep_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    out.join(&cfg.name).join(artifacts::SWEEP_CSV)
}

/// Every cell for every seed, rows ordered by seed then cell. A failing cell
/// is recorded and the sweep continues; a failing seed setup fails all its
/// cells.
pub fn sweep_rows(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<SweepRow>, CliError> {
    let cells = cfg.sweep.cells();
    if cells.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    let setups: Vec<(u64, Result<SeedSetup, CliError>)> = seeds.par_iter().map(|&s| (s, setup(cfg, out, s))).collect();
    let jobs: Vec<(usize, (f64, f64, f64))> = (0..setups.len()).flat_map(|i| cells.iter().map(move |&c| (i, c))).collect();
    Ok(jobs
        .par_iter()
        .map(|&(i, cell)| {
            let (seed, setup) = &setups[i];
            let result = match setup {
                Ok(s) => run_cell(cfg, s, cell.0, cell.1, cell.2),
                Err(e) => Err(CliError::Numerical(format!("seed setup failed: {e}"))),
            };
            result.unwrap_or_else(|e| {
                warn!("sweep: seed {seed} cell {cell:?} failed: {e}");
                failed_row(cfg, *seed, cell, &e)
            })
        })
        .collect())
}

/// Run the sweep and write `<out>/<name>/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, seeds: &[u64], force: bool) -> Result<PathBuf, CliError> {
    let path = sweep_path(cfg, out);
    if path.exists() && !force {
        let existing: Vec<SweepRow> = read_csv(&path)?;
        let hash = cfg.hash();
        if existing.iter().all(|r| r.config_hash == hash) && existing.len() == cfg.sweep.cells().len() * seeds.len() {
            info!("sweep: {} is up to date", path.display());
            return Ok(path);
        }
        return Err(CliError::Exists(path.display().to_string()));
    }
    let rows = sweep_rows(cfg, out, seeds)?;
    fs::create_dir_all(path.parent().expect("run directory"))?;
    write_atomic(&path, &artifacts::csv_bytes(&rows)?)?;
    Ok(path)
}
