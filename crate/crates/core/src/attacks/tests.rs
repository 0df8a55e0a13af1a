use super::*;
use crate::metrics::EvalSet;
use crate::synthworld::{Corpus, World, WorldConfig};
use crate::toymodel::{DecodeMode, ModelDims, Token};

fn setup() -> (World, Corpus) {
    let world = World::new(WorldConfig { n_scenes: 120, seed: 2, ..WorldConfig::default() }).unwrap();
    let corpus = world.generate_corpus();
    (world, corpus)
}

fn model() -> CaptionModel<f64> {
    CaptionModel::new(ModelDims::default(), 8)
}

fn pool(corpus: &Corpus) -> Vec<SeqItem<'_>> {
    let samples: Vec<&CaptionSample> = corpus.samples.iter().filter(|s| s.is_hallucinated()).collect();
    caption_items(&corpus.scenes, &samples)
}

fn frobenius_delta(a: &CaptionModel<f64>, b: &CaptionModel<f64>) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .flat_map(|(x, y)| x.tensor.data().iter().zip(y.tensor.data()).map(|(p, q)| (p - q) * (p - q)))
        .sum::<f64>()
        .sqrt()
}

fn pool_nll(m: &CaptionModel<f64>, items: &[SeqItem<'_>]) -> f64 {
    m.loss_and_grad(items, &TrainableSet::mapping(), None, false).unwrap().0
}

#[test]
fn zero_samples_leave_the_model_unchanged() {
    let (_, corpus) = setup();
    let m = model();
    let out = relearn_attack(&m, &pool(&corpus), 0, &AttackConfig::default()).unwrap();
    assert_eq!(out, m);
}

#[test]
fn oversized_request_is_rejected() {
    let (_, corpus) = setup();
    let p = pool(&corpus);
    let err = relearn_attack(&model(), &p, p.len() + 1, &AttackConfig::default()).unwrap_err();
    assert!(matches!(err, AttackError::PoolTooSmall { .. }));
}

#[test]
fn relearning_fits_the_pool_without_touching_the_input() {
    let (_, corpus) = setup();
    let p = pool(&corpus);
    let m = model();
    let before = m.clone();
    let cfg = AttackConfig::default();
    let out = relearn_attack(&m, &p, 10, &cfg).unwrap();
    assert_eq!(m, before);
    assert_ne!(out, m);
    let order = pool_order(p.len(), cfg.seed);
    let used: Vec<SeqItem<'_>> = order[..10].iter().map(|&i| p[i].clone()).collect();
    assert!(pool_nll(&out, &used) < pool_nll(&m, &used));
    assert_eq!(out.partition_vector(Partition::Decoder), m.partition_vector(Partition::Decoder));
    assert_eq!(out, relearn_attack(&m, &p, 10, &cfg).unwrap());
}

#[test]
fn grid_points_share_a_prefix_order() {
    let a = pool_order(50, 3);
    assert_eq!(a, pool_order(50, 3));
    assert_ne!(a, pool_order(50, 4));
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}

#[test]
fn grid_validation() {
    let cfg = AttackConfig::default();
    assert_eq!(cfg.relearn_grid(1000).unwrap(), vec![20, 40, 60]);
    assert!(matches!(cfg.relearn_grid(20), Err(AttackError::Config(_))));
    let bad = AttackConfig { relearn_fractions: vec![0.05, 0.02], ..AttackConfig::default() };
    assert!(bad.validate().is_err());
    let bad = AttackConfig { relearn_fractions: vec![0.0], ..AttackConfig::default() };
    assert!(bad.validate().is_err());
    let bad = AttackConfig { relearn_fractions: vec![1.5], ..AttackConfig::default() };
    assert!(bad.validate().is_err());
    let bad = AttackConfig { batch_size: 0, ..AttackConfig::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn zero_step_adapter_attack_is_identity() {
    let (_, corpus) = setup();
    let m = model();
    let cfg = AttackConfig { lora_steps: 0, ..AttackConfig::default() };
    let out = lora_attack(&m, &pool(&corpus), &cfg).unwrap();
    assert_eq!(out, m);
}

#[test]
fn larger_rank_moves_weights_further() {
    let (_, corpus) = setup();
    let samples: Vec<&CaptionSample> = corpus.samples.iter().collect();
    let p = caption_items(&corpus.scenes, &samples);
    let m = model();
    let delta = |rank| {
        let cfg = AttackConfig { lora_rank: rank, lora_alpha: 2.0 * rank as f64, lora_steps: 30, ..AttackConfig::default() };
        let out = lora_attack(&m, &p, &cfg).unwrap();
        assert!(out.lora().is_none());
        frobenius_delta(&out, &m)
    };
    let (d1, d4) = (delta(1), delta(4));
    assert!(d1 > 0.0);
    assert!(d4 > d1, "rank 4 {d4} vs rank 1 {d1}");
}

#[test]
fn adversarial_prompt_is_deterministic_under_greedy() {
    let (world, corpus) = setup();
    let refs: Vec<Vec<Token>> = corpus.scenes.iter().map(|s| world.reference_caption(s)).collect();
    let set = EvalSet { vocab: corpus.vocab, scenes: &corpus.scenes, references: &refs, q: &world.q };
    let spec = EvalSpec { decode: DecodeMode::Greedy, pope_questions: 40, ..EvalSpec::default() };
    let m = model();
    let a = adversarial_prompt_eval(&m, &m, &[0.0; 24], &set, &spec).unwrap();
    let b = adversarial_prompt_eval(&m, &m, &[0.0; 24], &set, &spec).unwrap();
    assert_eq!(a, b);
    let standard = evaluate(&m, &m, &[0.0; 24], &set, &spec).unwrap();
    assert_eq!(a.pope_f1, standard.pope_f1);
}

#[test]
fn curve_starts_at_zero_and_reports_rebound() {
    let (_, corpus) = setup();
    let p = pool(&corpus);
    let cfg = AttackConfig { relearn_fractions: vec![0.1, 0.3], relearn_epochs: 1, ..AttackConfig::default() };
    let mut calls = Vec::new();
    let curve = relearn_curve(&model(), &p, &cfg, &mut |m| {
        calls.push(m.clone());
        let mut r = EvalReport::default();
        r.chair_s = 10.0 * calls.len() as f64;
        Ok(r)
    })
    .unwrap();
    let ns: Vec<usize> = curve.points.iter().map(|x| x.0).collect();
    assert_eq!(ns[0], 0);
    assert_eq!(ns.len(), 3);
    assert_eq!(calls[0], model());
    assert_eq!(curve.rebound("chair_s"), Some(20.0));
    assert_eq!(curve.rebound("nope"), None);
    let rows = curve.rows("sare", "relearn", 1);
    assert_eq!(rows.len(), 3 * EvalReport::default().metrics().len());
    assert!(rows.iter().all(|r| r.method == "sare" && r.attack == "relearn" && r.seed == 1));
}

#[test]
fn attack_kind_names_round_trip() {
    for k in [AttackKind::Relearn, AttackKind::Lora, AttackKind::Advprompt] {
        assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
    }
    assert!("x".parse::<AttackKind>().is_err());
}
