//! Persistent pipeline stages. Each reads its upstream artifacts from the run
//! directory, checks their config hash, and records its outputs in the
//! manifest.

use std::path::Path;

use log::info;
use serde::Serialize;

use sare_core::attacks::AttackKind;
use sare_core::metrics::{EvalRecord, EvalReport};
use sare_core::synthworld::{curation_purity_report, CuratedCorpus, PurityReport};
use sare_core::toymodel::Vocab;
use sare_core::tsam::{Method, SharpnessReport};
use sare_core::CaptionModel;

use crate::artifacts::{self, MetricRow, RunDir, SharpnessRow, StageState};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{self, SeedData};

pub const BIASED: &str = "biased";

#[derive(Serialize)]
struct CuratedDoc<'a> {
    purity: PurityReport,
    curated: &'a CuratedCorpus,
}

#[derive(Serialize)]
struct EvalLine<'a> {
    model: &'a str,
    #[serde(flatten)]
    record: &'a EvalRecord,
}

fn announce(dir: &RunDir, stage: &str, state: StageState) -> bool {
    match state {
        StageState::UpToDate => {
            info!("{stage}: {} is up to date", dir.root.display());
            false
        }
        StageState::Run => {
            info!("{stage}: running in {}", dir.root.display());
            true
        }
    }
}

pub fn curate(cfg: &ExperimentConfig, out: &Path, seed: u64, force: bool) -> Result<StageState, CliError> {
    let dir = RunDir::new(out, cfg, seed);
    let state = dir.begin(cfg, "curate", force)?;
    if !announce(&dir, "curate", state) {
        return Ok(state);
    }
    let data = pipeline::generate_data(cfg, seed)?;
    dir.write_corpus(artifacts::CORPUS, &data.corpus)?;
    dir.write_corpus(artifacts::EVAL_CORPUS, &data.eval_corpus)?;
    let purity = curation_purity_report(&data.curated);
    info!("curate: {} pos, {} neg, {} sent, neg purity {:.3}", purity.n_pos, purity.n_neg, purity.n_sent, purity.neg_purity);
    dir.write_json(artifacts::CURATED, &CuratedDoc { purity, curated: &data.curated })?;
    dir.finish("curate", &[artifacts::CORPUS.into(), artifacts::EVAL_CORPUS.into(), artifacts::CURATED.into()])?;
    Ok(state)
}

/// Rebuild the seed's data from its stored corpora.
pub fn load_data(cfg: &ExperimentConfig, dir: &RunDir) -> Result<SeedData, CliError> {
    let vocab = Vocab::new(cfg.world.n_obj);
    let corpus = dir.read_corpus(artifacts::CORPUS, vocab)?;
    let eval_corpus = dir.read_corpus(artifacts::EVAL_CORPUS, vocab)?;
    pipeline::data_from_corpora(cfg, dir.seed, corpus, eval_corpus)
}

pub fn biastrain(cfg: &ExperimentConfig, out: &Path, seed: u64, force: bool) -> Result<StageState, CliError> {
    let dir = RunDir::new(out, cfg, seed);
    dir.require(artifacts::CORPUS)?;
    let state = dir.begin(cfg, "biastrain", force)?;
    if !announce(&dir, "biastrain", state) {
        return Ok(state);
    }
    let data = load_data(cfg, &dir)?;
    let reference = pipeline::train_reference(cfg, &data)?;
    dir.write_checkpoint(artifacts::REFERENCE_CKPT, &reference, "reference")?;
    let biased = pipeline::bias_train(cfg, &data)?;
    dir.write_checkpoint(artifacts::BIASED_CKPT, &biased, "biastrain")?;
    dir.finish("biastrain", &[artifacts::REFERENCE_CKPT.into(), artifacts::BIASED_CKPT.into()])?;
    Ok(state)
}

pub fn unlearn(cfg: &ExperimentConfig, out: &Path, seed: u64, method: Method, force: bool) -> Result<StageState, CliError> {
    let dir = RunDir::new(out, cfg, seed);
    dir.require(artifacts::BIASED_CKPT)?;
    let stage = format!("unlearn-{}", method.name());
    let state = dir.begin(cfg, &stage, force)?;
    if !announce(&dir, &stage, state) {
        return Ok(state);
    }
    let data = load_data(cfg, &dir)?;
    let biased = dir.read_checkpoint(artifacts::BIASED_CKPT)?;
    let (epochs, log) = pipeline::unlearn(cfg, &data, &biased, method, cfg.unlearn.weights)?;
    let model = epochs.last().expect("at least one epoch");
    let ckpt = artifacts::unlearned_ckpt(method.name());
    let runlog = artifacts::runlog(method.name());
    dir.write_checkpoint(&ckpt, model, &stage)?;
    dir.write_jsonl(&runlog, &log.records)?;
    dir.finish(&stage, &[ckpt, runlog])?;
    Ok(state)
}

fn model_file(model: &str) -> Result<String, CliError> {
    if model == BIASED {
        return Ok(artifacts::BIASED_CKPT.into());
    }
    let method: Method = model.parse().map_err(CliError::Config)?;
    Ok(artifacts::unlearned_ckpt(method.name()))
}

pub fn report_rows(cfg: &ExperimentConfig, dir: &RunDir, model: &str, attack: &str, step: usize, n: usize, report: &EvalReport) -> Vec<MetricRow> {
    report
        .metrics()
        .into_iter()
        .map(|(metric, value)| MetricRow {
            run: cfg.name.clone(),
            config_hash: dir.hash.clone(),
            eval_set_id: cfg.eval.eval_set_id.clone(),
            seed: dir.seed,
            model: model.to_string(),
            attack: attack.to_string(),
            step,
            n,
            metric: metric.to_string(),
            value,
        })
        .collect()
}

/// Attack one model (`biased` or a method name) and evaluate the result.
pub fn attack(cfg: &ExperimentConfig, out: &Path, seed: u64, kind: AttackKind, model: &str, force: bool) -> Result<StageState, CliError> {
    let dir = RunDir::new(out, cfg, seed);
    let file = model_file(model)?;
    dir.require(&file)?;
    dir.require(artifacts::REFERENCE_CKPT)?;
    let stage = format!("attack-{}-{model}", kind.name());
    let state = dir.begin(cfg, &stage, force)?;
    if !announce(&dir, &stage, state) {
        return Ok(state);
    }
    let data = load_data(cfg, &dir)?;
    let reference = dir.read_checkpoint(artifacts::REFERENCE_CKPT)?;
    let target = dir.read_checkpoint(&file)?;
    let rows = match kind {
        AttackKind::Relearn => {
            let curve = pipeline::relearn_curve(cfg, &data, &reference, &target)?;
            curve.points.iter().enumerate().flat_map(|(i, (n, r))| report_rows(cfg, &dir, model, kind.name(), i, *n, r)).collect()
        }
        AttackKind::Lora => report_rows(cfg, &dir, model, kind.name(), 1, cfg.attack.lora_steps, &pipeline::lora_eval(cfg, &data, &reference, &target)?),
        AttackKind::Advprompt => report_rows(cfg, &dir, model, kind.name(), 1, 0, &pipeline::eval_model(cfg, &data, &reference, &target, true)?),
    };
    let csv = artifacts::attack_csv(kind.name(), model);
    dir.write_csv(&csv, &rows)?;
    dir.finish(&stage, &[csv])?;
    Ok(state)
}

fn sharpness_rows(cfg: &ExperimentConfig, dir: &RunDir, model: &str, reports: &[SharpnessReport]) -> Vec<SharpnessRow> {
    reports
        .iter()
        .map(|r| SharpnessRow {
            run: cfg.name.clone(),
            config_hash: dir.hash.clone(),
            seed: dir.seed,
            model: model.to_string(),
            rho: r.rho,
            n_dirs: r.n_dirs,
            base_loss: r.base_loss,
            mean_increase: r.mean_increase,
            max_increase: r.max_increase,
            worst_case_increase: r.worst_case_increase,
        })
        .collect()
}

/// Evaluate the bias-trained model and every configured method's unlearned
/// model on the held-out set, with sharpness probes.
pub fn eval(cfg: &ExperimentConfig, out: &Path, seed: u64, force: bool) -> Result<StageState, CliError> {
    let dir = RunDir::new(out, cfg, seed);
    let mut models = vec![BIASED.to_string()];
    models.extend(cfg.unlearn.methods.iter().map(|m| m.name().to_string()));
    for m in &models {
        dir.require(&model_file(m)?)?;
    }
    dir.require(artifacts::REFERENCE_CKPT)?;
    let state = dir.begin(cfg, "eval", force)?;
    if !announce(&dir, "eval", state) {
        return Ok(state);
    }
    let data = load_data(cfg, &dir)?;
    let reference = dir.read_checkpoint(artifacts::REFERENCE_CKPT)?;
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut sharp = Vec::new();
    for m in &models {
        let file = model_file(m)?;
        let model: CaptionModel = dir.read_checkpoint(&file)?;
        let report = pipeline::eval_model(cfg, &data, &reference, &model, false)?;
        info!("eval: {m} chair_s {:.2} chair_i {:.2} pope {:.3} ppl {:.2}", report.chair_s, report.chair_i, report.pope_f1.mean(), report.ppl);
        rows.extend(report_rows(cfg, &dir, m, "none", 0, 0, &report));
        sharp.extend(sharpness_rows(cfg, &dir, m, &pipeline::sharpness(cfg, &data, &model)?));
        records.push((m.clone(), EvalRecord { checkpoint_id: file, eval_set_id: cfg.eval.eval_set_id.clone(), seed, report }));
    }
    let lines: Vec<EvalLine<'_>> = records.iter().map(|(m, r)| EvalLine { model: m, record: r }).collect();
    dir.write_jsonl(artifacts::EVAL_JSONL, &lines)?;
    dir.write_csv(artifacts::EVAL_CSV, &rows)?;
    dir.write_csv(artifacts::SHARPNESS_CSV, &sharp)?;
    dir.finish("eval", &[artifacts::EVAL_JSONL.into(), artifacts::EVAL_CSV.into(), artifacts::SHARPNESS_CSV.into()])?;
    Ok(state)
}

pub const ALL_ATTACKS: [AttackKind; 3] = [AttackKind::Relearn, AttackKind::Lora, AttackKind::Advprompt];

/// Every stage for one seed, in order.
pub fn run_all(cfg: &ExperimentConfig, out: &Path, seed: u64, force: bool) -> Result<(), CliError> {
    curate(cfg, out, seed, force)?;
    biastrain(cfg, out, seed, force)?;
    for &m in &cfg.unlearn.methods {
        unlearn(cfg, out, seed, m, force)?;
    }
    for kind in ALL_ATTACKS {
        for m in &cfg.unlearn.methods {
            attack(cfg, out, seed, kind, m.name(), force)?;
        }
    }
    eval(cfg, out, seed, force)?;
    Ok(())
}
