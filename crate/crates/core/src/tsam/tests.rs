use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::ParamVector;
use crate::numcheck::{hessian_vector, relative_error};
use crate::objectives::{LossWeights, ModelObjective, Objective, ObjectiveError, TripletBatch};
use crate::synthworld::{Corpus, CuratedCorpus, World, WorldConfig};
use crate::toymodel::{CaptionModel, ModelDims, Partition, TrainableSet};

/// `½ θᵀ diag(a) θ`.
struct Quadratic(Vec<f64>);

impl Objective<f64> for Quadratic {
    fn value(&self, theta: &ParamVector<f64>) -> Result<f64, ObjectiveError> {
        Ok(0.5 * theta.as_slice().iter().zip(&self.0).map(|(x, a)| a * x * x).sum::<f64>())
    }
    fn value_and_grad(&self, theta: &ParamVector<f64>) -> Result<(f64, ParamVector<f64>), ObjectiveError> {
        let g = theta.as_slice().iter().zip(&self.0).map(|(x, a)| a * x).collect();
        Ok((self.value(theta)?, ParamVector::new(g)))
    }
}

fn v(x: &[f64]) -> ParamVector<f64> {
    ParamVector::new(x.to_vec())
}

fn data() -> (Corpus, CuratedCorpus) {
    let world = World::new(WorldConfig { n_scenes: 150, seed: 9, ..WorldConfig::default() }).unwrap();
    let corpus = world.generate_corpus();
    let curated = corpus.curate(Default::default()).unwrap();
    (corpus, curated)
}

fn small_model() -> CaptionModel<f64> {
    CaptionModel::new(ModelDims { enc_dim: 8, hidden: 6, dec_hidden: 16, ..ModelDims::default() }, 4)
}

fn batch<'a>(corpus: &'a Corpus, curated: &'a CuratedCorpus, k: usize, offset: usize) -> TripletBatch<'a> {
    TripletBatch {
        scenes: &corpus.scenes,
        neg: (0..k).map(|i| &curated.neg[(offset + i) % curated.neg.len()]).collect(),
        pos: (0..k).map(|i| &curated.pos[(offset + i) % curated.pos.len()]).collect(),
        sent: (0..k).map(|i| &curated.sent[(offset + i) % curated.sent.len()]).collect(),
    }
}

#[test]
fn epsilon_star_examples() {
    let e = compute_epsilon_star(&v(&[3.0, 4.0]), 0.05, DEFAULT_DELTA_GRAD).unwrap();
    assert!(!e.degenerate);
    assert!((e.eps[0] - 0.03).abs() < 1e-15 && (e.eps[1] - 0.04).abs() < 1e-15);
    let z = compute_epsilon_star(&v(&[0.0, 0.0]), 0.05, DEFAULT_DELTA_GRAD).unwrap();
    assert!(z.degenerate);
    assert_eq!(z.eps.as_slice(), &[0.0, 0.0]);
    let (_, g) = Quadratic(vec![2.0, 1.0]).value_and_grad(&v(&[1.0, 1.0])).unwrap();
    let e = compute_epsilon_star(&g, 0.05, DEFAULT_DELTA_GRAD).unwrap();
    let s5 = 5f64.sqrt();
    assert!((e.eps[0] - 0.1 / s5).abs() < 1e-15 && (e.eps[1] - 0.05 / s5).abs() < 1e-15);
    assert!(compute_epsilon_star(&g, 0.0, DEFAULT_DELTA_GRAD).is_err());
    assert!(compute_epsilon_star(&v(&[f64::NAN]), 0.05, DEFAULT_DELTA_GRAD).is_err());
}

#[test]
fn epsilon_star_geometry_on_random_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let n = rng.gen_range(1..50);
        let scale = 10f64.powf(rng.gen_range(-6.0..3.0));
        let g = ParamVector::new((0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect());
        let rho = rng.gen_range(0.001..0.5);
        let e = compute_epsilon_star(&g, rho, DEFAULT_DELTA_GRAD).unwrap();
        assert!((e.eps.l2_norm() - rho).abs() < 1e-10);
        assert!((e.eps.cosine(&g) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn perturbed_gradient_on_quadratic() {
    let q = Quadratic(vec![1.0, 1.0]);
    let w = LossWeights { lambda1: 1.0, lambda2: 0.0, rho: 0.05 };
    let out = tsam_gradient(&v(&[3.0, 4.0]), &StepObjectives { neg: &q, pos: None, sent: None }, &w, DEFAULT_DELTA_GRAD).unwrap();
    assert!((out.g_final[0] - 3.03).abs() < 1e-12 && (out.g_final[1] - 4.04).abs() < 1e-12);
    let t = out.trace.unwrap();
    assert!((t.eps_norm - 0.05).abs() < 1e-12 && (t.eps_cosine - 1.0).abs() < 1e-12);
    assert_eq!(t.neg_grad_norm, 5.0);
}

#[test]
fn degenerate_gradient_skips_perturbation() {
    let q = Quadratic(vec![1.0, 1.0]);
    let w = LossWeights { lambda1: 1.0, lambda2: 0.0, rho: 0.05 };
    let out = tsam_gradient(&v(&[0.0, 0.0]), &StepObjectives { neg: &q, pos: None, sent: None }, &w, DEFAULT_DELTA_GRAD).unwrap();
    assert!(out.trace.unwrap().degenerate);
    assert_eq!(out.g_final.as_slice(), &[0.0, 0.0]);
}

#[test]
fn zero_radius_reduces_to_baseline() {
    let (corpus, curated) = data();
    let model = CaptionModel::<f64>::new(ModelDims::default(), 2);
    let set = TrainableSet::mapping();
    let theta = model.trainable_vector(&set);
    let w = LossWeights { lambda1: 0.3, lambda2: 0.2, rho: 0.0 };
    for offset in 0..5 {
        let b = batch(&corpus, &curated, 3, 7 * offset);
        let (sare, _, _) = method_gradient(&model, Method::Sare, &b, &theta, &w, DEFAULT_DELTA_GRAD).unwrap();
        let (base, _, _) = method_gradient(&model, Method::Baseline, &b, &theta, &w, DEFAULT_DELTA_GRAD).unwrap();
        let diff = sare.sub(&base).max_abs();
        assert!(diff <= 1e-12, "{diff}");
    }
}

#[test]
fn sare_without_forgetting_is_preservation_only() {
    let (corpus, curated) = data();
    let model = CaptionModel::<f64>::new(ModelDims::default(), 2);
    let set = TrainableSet::mapping();
    let theta = model.trainable_vector(&set);
    let b = batch(&corpus, &curated, 4, 0);
    let w = LossWeights { lambda1: 0.0, lambda2: 0.2, rho: 0.05 };
    let (g, _, _) = method_gradient(&model, Method::Sare, &b, &theta, &w, DEFAULT_DELTA_GRAD).unwrap();
    let (_, gp) = ModelObjective::positive(&model, set.clone(), &corpus.scenes, &b.pos).unwrap().value_and_grad(&theta).unwrap();
    let (_, gs) = ModelObjective::sentence(&model, set, &corpus.scenes, &b.sent).unwrap().value_and_grad(&theta).unwrap();
    let mut expect = gp;
    expect.axpy(0.2, &gs);
    assert!(g.sub(&expect).max_abs() < 1e-12);
}

#[test]
fn perturbed_gradient_matches_hessian_expansion() {
    let (corpus, curated) = data();
    let model = small_model();
    let set = TrainableSet::mapping();
    assert!(model.partition_len(Partition::Mapping) <= 200);
    let theta = model.trainable_vector(&set);
    let units: Vec<_> = curated.neg.iter().take(6).collect();
    let neg = ModelObjective::negative(&model, set, &corpus.scenes, &units).unwrap();
    let (_, g) = neg.value_and_grad(&theta).unwrap();
    let unit = g.scaled(1.0 / g.l2_norm());
    let hg = hessian_vector(&theta, &unit, 1e-5, |t| neg.value_and_grad(t).map(|r| r.1)).unwrap();
    for rho in [0.01, 0.05] {
        let eps = compute_epsilon_star(&g, rho, DEFAULT_DELTA_GRAD).unwrap().eps;
        let (_, gp) = neg.value_and_grad(&theta.add(&eps)).unwrap();
        let mut predicted = g.clone();
        predicted.axpy(rho, &hg);
        let err = relative_error(&gp, &predicted, 1e-12);
        assert!(err <= 5e-3, "rho {rho}: {err}");
    }
}

#[test]
fn step_leaves_no_perturbation_behind() {
    let q = Quadratic(vec![1.0, 3.0]);
    let w = LossWeights { lambda1: 1.0, lambda2: 0.0, rho: 0.05 };
    let mut theta = v(&[1.0, -2.0]);
    let start = theta.clone();
    let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = AdamW::new(cfg, 2);
    let out = tsam_step(&mut theta, &StepObjectives { neg: &q, pos: None, sent: None }, &w, &mut opt, DEFAULT_DELTA_GRAD).unwrap();
    let mut replay = start.clone();
    AdamW::new(cfg, 2).update(&mut replay, &out.g_final);
    assert_eq!(theta, replay);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn adamw_first_step_moves_by_learning_rate() {
    let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = AdamW::new(cfg, 3);
    let mut theta = v(&[1.0, 1.0, 1.0]);
    opt.update(&mut theta, &v(&[2.0, -0.5, 0.0]));
    assert!((theta[0] - 0.9).abs() < 1e-6);
    assert!((theta[1] - 1.1).abs() < 1e-6);
    assert_eq!(theta[2], 1.0);
    let decay = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..AdamWConfig::default() };
    let mut theta = v(&[2.0]);
    AdamW::new(decay, 1).update(&mut theta, &v(&[0.0]));
    assert!((theta[0] - 1.9).abs() < 1e-12);
}

#[test]
fn only_the_mapping_layer_moves() {
    let (corpus, curated) = data();
    let model = CaptionModel::<f64>::new(ModelDims::default(), 3);
    for method in [Method::Sare, Method::Baseline, Method::Ga] {
        let cfg = UnlearnConfig { method, optimizer: AdamWConfig::with_lr(1e-3), batch_size: 32, ..UnlearnConfig::default() };
        let mut epochs = 0;
        let (out, log) = unlearn_run(&model, &corpus.scenes, &curated, &cfg, &mut |_, _| {
            epochs += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs, 1);
        assert_eq!(log.records.len(), curated.neg.len().div_ceil(32));
        assert_eq!(out.partition_vector(Partition::Encoder), model.partition_vector(Partition::Encoder));
        assert_eq!(out.partition_vector(Partition::Decoder), model.partition_vector(Partition::Decoder));
        assert_ne!(out.partition_vector(Partition::Mapping), model.partition_vector(Partition::Mapping));
        let traced = log.records.iter().all(|r| r.trace.is_some());
        assert_eq!(traced, method == Method::Sare);
    }
}

#[test]
fn runs_are_deterministic() {
    let (corpus, curated) = data();
    let model = CaptionModel::<f64>::new(ModelDims::default(), 3);
    let cfg = UnlearnConfig { optimizer: AdamWConfig::with_lr(1e-3), batch_size: 16, epochs: 2, ..UnlearnConfig::default() };
    let a = unlearn_run(&model, &corpus.scenes, &curated, &cfg, &mut |_, _| Ok(())).unwrap();
    let b = unlearn_run(&model, &corpus.scenes, &curated, &cfg, &mut |_, _| Ok(())).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn divergence_is_detected() {
    let (corpus, curated) = data();
    let model = CaptionModel::<f64>::new(ModelDims::default(), 3);
    let cfg = UnlearnConfig { method: Method::Ga, optimizer: AdamWConfig::with_lr(0.1), batch_size: 4, divergence_factor: 1.5, ..UnlearnConfig::default() };
    let err = unlearn_run(&model, &corpus.scenes, &curated, &cfg, &mut |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, TsamError::Diverged { .. }), "{err}");
}

#[test]
fn run_rejects_bad_config() {
    let (corpus, mut curated) = data();
    let model = CaptionModel::<f64>::new(ModelDims::default(), 3);
    let cfg = UnlearnConfig { epochs: 0, ..UnlearnConfig::default() };
    assert!(unlearn_run(&model, &corpus.scenes, &curated, &cfg, &mut |_, _| Ok(())).is_err());
    curated.sent.clear();
    assert!(unlearn_run(&model, &corpus.scenes, &curated, &UnlearnConfig::default(), &mut |_, _| Ok(())).is_err());
}

#[test]
fn probe_at_zero_radius_is_flat() {
    let r = sharpness_probe(&Quadratic(vec![1.0, 2.0]), &v(&[1.0, 1.0]), 0.0, 8, 0).unwrap();
    assert_eq!((r.mean_increase, r.max_increase, r.worst_case_increase), (0.0, 0.0, 0.0));
    assert!(sharpness_probe(&Quadratic(vec![1.0]), &v(&[1.0]), 0.1, 0, 0).is_err());
}

#[test]
fn probe_measures_curvature() {
    // Antithetic pairs cancel the linear term: mean increase is ρ²·tr(A)/(2n).
    let a = vec![1.0, 2.0, 3.0, 4.0];
    let r = sharpness_probe(&Quadratic(a), &v(&[0.5, -1.0, 0.3, 0.2]), 0.1, 4000, 1).unwrap();
    let expected = 0.01 * 10.0 / 8.0;
    assert!((r.mean_increase - expected).abs() < 0.05 * expected, "{r:?}");
}

#[test]
fn worst_case_dominates_random_directions() {
    let (corpus, curated) = data();
    let units: Vec<_> = curated.neg.iter().take(16).collect();
    for seed in 0..3 {
        let model = CaptionModel::<f64>::new(ModelDims::default(), seed);
        let r = neg_sharpness_probe(&model, &corpus.scenes, &units, 0.05, 16, seed).unwrap();
        assert!(r.worst_case_increase >= r.mean_increase, "{r:?}");
        assert!(r.worst_case_increase >= r.max_increase, "{r:?}");
    }
}
