use super::*;
use crate::numcheck::{central_gradient, relative_error};
use crate::synthworld::{Corpus, CuratedCorpus, World, WorldConfig};
use crate::toymodel::ModelDims;

struct Fixture {
    corpus: Corpus,
    curated: CuratedCorpus,
    model: CaptionModel<f64>,
}

fn fixture() -> Fixture {
    let world = World::new(WorldConfig { n_scenes: 200, seed: 3, ..WorldConfig::default() }).unwrap();
    let corpus = world.generate_corpus();
    let curated = corpus.curate(Default::default()).unwrap();
    Fixture { corpus, curated, model: CaptionModel::new(ModelDims::default(), 5) }
}

impl Fixture {
    fn batch(&self, k: usize, offset: usize) -> TripletBatch<'_> {
        let pick = |n: usize| (0..k).map(move |i| (offset + 3 * i) % n);
        TripletBatch {
            scenes: &self.corpus.scenes,
            neg: pick(self.curated.neg.len()).map(|i| &self.curated.neg[i]).collect(),
            pos: pick(self.curated.pos.len()).map(|i| &self.curated.pos[i]).collect(),
            sent: pick(self.curated.sent.len()).map(|i| &self.curated.sent[i]).collect(),
        }
    }
}

fn uniform(model: &mut CaptionModel<f64>) {
    for name in ["dec.w2", "dec.ws", "dec.b2"] {
        model.param_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

struct HalfSquare;

impl Objective<f64> for HalfSquare {
    fn value(&self, theta: &ParamVector<f64>) -> Result<f64, ObjectiveError> {
        Ok(0.5 * theta.dot(theta))
    }
    fn value_and_grad(&self, theta: &ParamVector<f64>) -> Result<(f64, ParamVector<f64>), ObjectiveError> {
        Ok((0.5 * theta.dot(theta), theta.clone()))
    }
}

#[test]
fn report_decomposes_exactly() {
    let f = fixture();
    let w = LossWeights { lambda1: 0.7, lambda2: 0.4, rho: 0.05 };
    for offset in 0..10 {
        let r = loss_base(&f.model, &f.batch(4, offset), &w).unwrap();
        assert!((r.l_base - (r.l_pos + 0.7 * r.l_neg + 0.4 * r.l_sent)).abs() < 1e-12);
        assert!(r.l_pos >= 0.0 && r.l_neg <= 0.0 && r.l_sent >= 0.0);
        assert!(r.neg_grad_norm > 0.0);
    }
}

#[test]
fn report_arithmetic() {
    let w = LossWeights { lambda1: 0.3, lambda2: 0.2, rho: 0.0 };
    let r = compose_report(1.0f64, -2.0, 0.5, 0.0, &w);
    assert!((r.l_base - 0.5).abs() < 1e-15);
    let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, rho: 0.0 };
    let f = fixture();
    let r = loss_base(&f.model, &f.batch(3, 1), &zero).unwrap();
    assert_eq!(r.l_base, r.l_pos);
}

#[test]
fn single_tape_base_matches_components() {
    let f = fixture();
    let w = LossWeights { lambda1: 0.3, lambda2: 0.2, rho: 0.0 };
    let batch = f.batch(5, 2);
    let r = loss_base(&f.model, &batch, &w).unwrap();
    let set = TrainableSet::mapping();
    let theta = f.model.trainable_vector(&set);
    let base = ModelObjective::base(&f.model, set, &batch, &w).unwrap();
    assert!((base.value(&theta).unwrap() - r.l_base).abs() < 1e-12);
}

#[test]
fn negative_is_negated_positive() {
    let f = fixture();
    let units: Vec<_> = f.curated.neg.iter().take(6).collect();
    let p = loss_pos(&f.model, &f.corpus.scenes, &units).unwrap();
    let n = loss_neg(&f.model, &f.corpus.scenes, &units).unwrap();
    assert_eq!(n, -p);
}

#[test]
fn uniform_model_gives_log_vocab() {
    let mut f = fixture();
    uniform(&mut f.model);
    let units: Vec<_> = f.curated.pos.iter().take(5).collect();
    let ln_v = 32f64.ln();
    assert!((loss_pos(&f.model, &f.corpus.scenes, &units).unwrap() - ln_v).abs() < 1e-12);
    assert!((loss_neg(&f.model, &f.corpus.scenes, &units).unwrap() + ln_v).abs() < 1e-12);
    let sents: Vec<_> = f.curated.sent.iter().take(5).collect();
    assert!((loss_sent(&f.model, &f.corpus.scenes, &sents).unwrap() - ln_v).abs() < 1e-12);
}

#[test]
fn certain_prediction_has_zero_loss() {
    let mut f = fixture();
    uniform(&mut f.model);
    let unit = f.curated.pos.iter().find(|u| u.cur.len() == 1).expect("a one-token span");
    let target = unit.cur[0].index();
    f.model.param_mut("dec.b2").unwrap().data_mut()[target] = 1000.0;
    let loss = loss_pos(&f.model, &f.corpus.scenes, &[unit]).unwrap();
    assert!(loss.abs() < 1e-12, "{loss}");
    assert_eq!(loss_neg(&f.model, &f.corpus.scenes, &[unit]).unwrap(), -loss);
}

#[test]
fn batch_loss_is_mean_of_units() {
    let f = fixture();
    let (a, b) = (&f.curated.pos[0], &f.curated.pos[1]);
    let la = loss_pos(&f.model, &f.corpus.scenes, &[a]).unwrap();
    let lb = loss_pos(&f.model, &f.corpus.scenes, &[b]).unwrap();
    let lab = loss_pos(&f.model, &f.corpus.scenes, &[a, b]).unwrap();
    assert!((lab - 0.5 * (la + lb)).abs() < 1e-12);
}

#[test]
fn empty_batches_are_rejected() {
    let f = fixture();
    assert!(matches!(loss_pos(&f.model, &f.corpus.scenes, &[]), Err(ObjectiveError::EmptyBatch(_))));
    assert!(matches!(loss_neg(&f.model, &f.corpus.scenes, &[]), Err(ObjectiveError::EmptyBatch(_))));
    assert!(matches!(loss_sent(&f.model, &f.corpus.scenes, &[]), Err(ObjectiveError::EmptyBatch(_))));
    let mut batch = f.batch(2, 0);
    batch.sent.clear();
    assert!(loss_base(&f.model, &batch, &LossWeights::default()).is_err());
}

#[test]
fn penalty_examples() {
    let theta = ParamVector::new(vec![3.0, 4.0]);
    let (j, norm) = sharpness_penalty(&HalfSquare, &theta, 0.1).unwrap();
    assert!((j - 13.0).abs() < 1e-12);
    assert_eq!(norm, 5.0);
    assert!(sharpness_penalty(&HalfSquare, &theta, -0.1).is_err());
}

#[test]
fn penalty_at_zero_radius_is_the_loss() {
    let f = fixture();
    let units: Vec<_> = f.curated.neg.iter().take(8).collect();
    let l = loss_neg(&f.model, &f.corpus.scenes, &units).unwrap();
    let (j0, _) = neg_sharpness_penalty(&f.model, &f.corpus.scenes, &units, 0.0).unwrap();
    assert_eq!(j0, l);
    let mut last = j0;
    for rho in [0.01, 0.05, 0.1, 0.5] {
        let (j, norm) = neg_sharpness_penalty(&f.model, &f.corpus.scenes, &units, rho).unwrap();
        assert!(norm >= 0.0 && j >= l && j >= last);
        last = j;
    }
}

#[test]
fn base_gradient_matches_finite_differences() {
    let f = fixture();
    let set = TrainableSet::mapping();
    let batch = f.batch(2, 4);
    let obj = ModelObjective::base(&f.model, set.clone(), &batch, &LossWeights::default()).unwrap();
    let theta = f.model.trainable_vector(&set);
    let (_, g) = obj.value_and_grad(&theta).unwrap();
    let fd = central_gradient(&theta, 1e-5, |t| obj.value(t)).unwrap();
    assert!(relative_error(&g, &fd, 1e-8) < 1e-6);
}

#[test]
fn weights_validation() {
    assert!(LossWeights::<f64>::default().validate().is_ok());
    assert!(LossWeights { lambda1: -0.1, lambda2: 0.2, rho: 0.05 }.validate().is_err());
    assert!(LossWeights { lambda1: 0.1, lambda2: f64::NAN, rho: 0.05 }.validate().is_err());
}
