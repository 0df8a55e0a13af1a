//! In-memory experiment stages. The artifact layer persists their outputs.

use serde::{Deserialize, Serialize};

use sare_core::attacks::{self, caption_items, ReboundCurve};
use sare_core::metrics::{evaluate, EvalReport, EvalSet};
use sare_core::objectives::unit_items;
use sare_core::synthworld::{CaptionSample, Corpus, CuratedCorpus, World, WorldConfig};
use sare_core::toymodel::{SeqItem, Token, TrainableSet, Partition};
use sare_core::tsam::{fit, neg_sharpness_probe, unlearn_run, FitConfig, Method, RunLog, SharpnessReport, UnlearnConfig};
use sare_core::{CaptionModel, LossWeights};

use crate::config::ExperimentConfig;
use crate::error::CliError;

const EVAL_WORLD_OFFSET: u64 = 0x00E7_A100;
const REFERENCE_INIT: u64 = 0x00EF_0000;
const BIAS_INIT: u64 = 0x00B1_A500;
const PROBE_SEED: u64 = 0x0090_BE00;

/// Everything a run derives from the config and one seed before training.
pub struct SeedData {
    pub seed: u64,
    pub world: World,
    pub corpus: Corpus,
    pub eval_corpus: Corpus,
    pub references: Vec<Vec<Token>>,
    pub curated: CuratedCorpus,
}

pub fn world_config(cfg: &ExperimentConfig, seed: u64) -> WorldConfig {
    WorldConfig { seed: cfg.world.seed.wrapping_add(seed), ..cfg.world.clone() }
}

pub fn eval_world_config(cfg: &ExperimentConfig, seed: u64) -> WorldConfig {
    WorldConfig {
        seed: cfg.world.seed.wrapping_add(seed).wrapping_add(EVAL_WORLD_OFFSET),
        n_scenes: cfg.eval.n_scenes,
        ..cfg.world.clone()
    }
}

pub fn generate_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData, CliError> {
    let world = World::new(world_config(cfg, seed))?;
    let corpus = world.generate_corpus();
    let eval_corpus = World::new(eval_world_config(cfg, seed))?.generate_corpus();
    data_from_corpora(cfg, seed, corpus, eval_corpus)
}

/// Rebuild the derived data from stored corpora.
pub fn data_from_corpora(cfg: &ExperimentConfig, seed: u64, corpus: Corpus, eval_corpus: Corpus) -> Result<SeedData, CliError> {
    let world = World::new(world_config(cfg, seed))?;
    let curated = corpus.curate(cfg.thresholds)?;
    let references = eval_corpus.scenes.iter().map(|s| world.reference_caption(s)).collect();
    Ok(SeedData { seed, world, corpus, eval_corpus, references, curated })
}

/// The caption with its injected mentions removed.
pub fn clean_caption(world: &World, sample: &CaptionSample) -> Vec<Token> {
    let v = &world.vocab;
    let kept: Vec<Token> = sample.spans.iter().filter(|s| !s.hallucinated).map(|s| s.object).collect();
    let mut out = Vec::new();
    for (i, &o) in kept.iter().enumerate() {
        if i > 0 {
            out.push(v.and());
        }
        out.push(o);
    }
    out.push(v.eos());
    out
}

/// Scene input of the text-only reference scorer.
pub fn reference_encoding(cfg: &ExperimentConfig) -> Vec<f64> {
    vec![0.0; cfg.world.n_obj]
}

fn all_partitions() -> TrainableSet {
    TrainableSet::new(&[Partition::Encoder, Partition::Mapping, Partition::Decoder])
}

/// Clean-caption language model that stands in for an external fluency judge.
pub fn train_reference(cfg: &ExperimentConfig, data: &SeedData) -> Result<CaptionModel, CliError> {
    let blank = reference_encoding(cfg);
    let v = data.world.vocab;
    let prompt = [v.bos(), v.prompt_standard()];
    let items: Vec<SeqItem<'_>> = data
        .corpus
        .samples
        .iter()
        .map(|s| SeqItem { encoding: &blank, tokens: [&prompt[..], &clean_caption(&data.world, s)].concat(), n_context: 2, weight: 1.0 })
        .collect();
    let mut model = CaptionModel::new(cfg.model.clone(), data.seed ^ REFERENCE_INIT);
    let fit_cfg = FitConfig {
        optimizer: cfg.biastrain.optimizer,
        epochs: cfg.biastrain.reference_epochs,
        batch_size: cfg.biastrain.batch_size,
        max_steps: None,
        seed: data.seed ^ REFERENCE_INIT,
    };
    fit(&mut model, &items, &all_partitions(), &fit_cfg)?;
    Ok(model)
}

/// Train the captioner from scratch on the hallucination-bearing corpus and its
/// biased existence questions.
pub fn bias_train(cfg: &ExperimentConfig, data: &SeedData) -> Result<CaptionModel, CliError> {
    let v = data.world.vocab;
    let scenes = &data.corpus.scenes;
    let samples: Vec<&CaptionSample> = data.corpus.samples.iter().collect();
    let mut items = caption_items(scenes, &samples);
    for p in data.world.generate_probes(&data.corpus, data.seed ^ PROBE_SEED) {
        items.push(SeqItem {
            encoding: &scenes[p.scene_id].encoding,
            tokens: vec![v.bos(), v.sep(), p.object, if p.answer_yes { v.yes() } else { v.no() }],
            n_context: 3,
            weight: 1.0,
        });
    }
    let mut model = CaptionModel::new(cfg.model.clone(), data.seed ^ BIAS_INIT);
    let fit_cfg = FitConfig {
        optimizer: cfg.biastrain.optimizer,
        epochs: cfg.biastrain.epochs,
        batch_size: cfg.biastrain.batch_size,
        max_steps: None,
        seed: data.seed ^ BIAS_INIT,
    };
    fit(&mut model, &items, &all_partitions(), &fit_cfg)?;
    Ok(model)
}

pub fn unlearn_config(cfg: &ExperimentConfig, method: Method, weights: LossWeights, seed: u64) -> UnlearnConfig {
    let u = &cfg.unlearn;
    UnlearnConfig {
        method,
        weights,
        optimizer: u.optimizer,
        epochs: u.epochs,
        batch_size: u.batch_size,
        seed,
        divergence_factor: u.divergence_factor,
        delta_grad: u.delta_grad,
    }
}

/// Unlearn and keep the checkpoint of every epoch.
pub fn unlearn(
    cfg: &ExperimentConfig,
    data: &SeedData,
    biased: &CaptionModel,
    method: Method,
    weights: LossWeights,
) -> Result<(Vec<CaptionModel>, RunLog), CliError> {
    let config = unlearn_config(cfg, method, weights, data.seed);
    let mut epochs = Vec::new();
    let (_, log) = unlearn_run(biased, &data.corpus.scenes, &data.curated, &config, &mut |_, m| {
        epochs.push(m.clone());
        Ok(())
    })?;
    Ok((epochs, log))
}

pub fn eval_set(data: &SeedData) -> EvalSet<'_> {
    EvalSet { vocab: data.world.vocab, scenes: &data.eval_corpus.scenes, references: &data.references, q: &data.world.q }
}

pub fn eval_model(cfg: &ExperimentConfig, data: &SeedData, reference: &CaptionModel, model: &CaptionModel, exhaustive: bool) -> Result<EvalReport, CliError> {
    let spec = sare_core::metrics::EvalSpec { exhaustive_prompt: exhaustive, seed: cfg.eval.spec.seed ^ data.seed, ..cfg.eval.spec.clone() };
    Ok(evaluate(model, reference, &reference_encoding(cfg), &eval_set(data), &spec)?)
}

/// Sharpness of `L_neg` at each configured radius.
pub fn sharpness(cfg: &ExperimentConfig, data: &SeedData, model: &CaptionModel) -> Result<Vec<SharpnessReport>, CliError> {
    let n = cfg.probe.n_units.min(data.curated.neg.len());
    let units: Vec<_> = data.curated.neg[..n].iter().collect();
    cfg.probe
        .rhos
        .iter()
        .map(|&rho| Ok(neg_sharpness_probe(model, &data.corpus.scenes, &units, rho, cfg.probe.n_dirs, data.seed ^ PROBE_SEED)?))
        .collect()
}

/// Captions carrying at least one injected object: the relearning pool.
pub fn relearn_pool(data: &SeedData) -> Vec<SeqItem<'_>> {
    let samples: Vec<&CaptionSample> = data.corpus.samples.iter().filter(|s| s.is_hallucinated()).collect();
    caption_items(&data.corpus.scenes, &samples)
}

/// Every training caption: the general fine-tuning pool.
pub fn general_pool(data: &SeedData) -> Vec<SeqItem<'_>> {
    let samples: Vec<&CaptionSample> = data.corpus.samples.iter().collect();
    caption_items(&data.corpus.scenes, &samples)
}

pub fn attack_config(cfg: &ExperimentConfig, seed: u64) -> attacks::AttackConfig {
    attacks::AttackConfig { seed: cfg.attack.seed ^ seed, ..cfg.attack.clone() }
}

pub fn relearn_curve(cfg: &ExperimentConfig, data: &SeedData, reference: &CaptionModel, model: &CaptionModel) -> Result<ReboundCurve, CliError> {
    let pool = relearn_pool(data);
    let mut eval = |m: &CaptionModel| eval_model(cfg, data, reference, m, false).map_err(|e| sare_core::attacks::AttackError::Config(e.to_string()));
    Ok(attacks::relearn_curve(model, &pool, &attack_config(cfg, data.seed), &mut eval)?)
}

pub fn lora_eval(cfg: &ExperimentConfig, data: &SeedData, reference: &CaptionModel, model: &CaptionModel) -> Result<EvalReport, CliError> {
    let pool = general_pool(data);
    let attacked = attacks::lora_attack(model, &pool, &attack_config(cfg, data.seed))?;
    eval_model(cfg, data, reference, &attacked, false)
}

/// Units the unlearner treats as negatives, as fine-tuning items.
pub fn neg_items(data: &SeedData) -> Vec<SeqItem<'_>> {
    let units: Vec<_> = data.curated.neg.iter().collect();
    unit_items(&data.corpus.scenes, &units, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub eval: EvalReport,
    pub sharpness: Vec<SharpnessReport>,
    pub relearn: ReboundCurve,
    pub lora: EvalReport,
    pub advprompt: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub biased: EvalReport,
    pub biased_advprompt: EvalReport,
    pub biased_sharpness: Vec<SharpnessReport>,
    pub methods: Vec<MethodSummary>,
}

/// Whole pipeline for one seed without touching the filesystem.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSummary, CliError> {
    let data = generate_data(cfg, seed)?;
    let reference = train_reference(cfg, &data)?;
    let biased = bias_train(cfg, &data)?;
    let mut methods = Vec::new();
    for &method in &cfg.unlearn.methods {
        let (epochs, _) = unlearn(cfg, &data, &biased, method, cfg.unlearn.weights)?;
        let model = epochs.last().expect("at least one epoch");
        methods.push(MethodSummary {
            method,
            eval: eval_model(cfg, &data, &reference, model, false)?,
            sharpness: sharpness(cfg, &data, model)?,
            relearn: relearn_curve(cfg, &data, &reference, model)?,
            lora: lora_eval(cfg, &data, &reference, model)?,
            advprompt: eval_model(cfg, &data, &reference, model, true)?,
        });
    }
    Ok(SeedSummary {
        seed,
        biased: eval_model(cfg, &data, &reference, &biased, false)?,
        biased_advprompt: eval_model(cfg, &data, &reference, &biased, true)?,
        biased_sharpness: sharpness(cfg, &data, &biased)?,
        methods,
    })
}
