use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionSample, Corpus, WorldError};
use crate::toymodel::Token;

/// Alignment-score cut-offs: `T0` for grounded anchors, `T1` for hallucinated
/// targets, `T2` for reliable whole sentences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { t0: 32.0, t1: 23.0, t2: 27.5 }
    }
}

/// `u_o = (v, pre(o), cur(o))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnUnit {
    pub scene_id: usize,
    pub prompt: Vec<Token>,
    pub pre: Vec<Token>,
    pub cur: Vec<Token>,
    pub object: Token,
    pub score: f64,
    pub hallucinated: bool,
}

impl UnlearnUnit {
    /// `prompt ++ pre(o)`: the conditioning context of `cur(o)`.
    pub fn context(&self) -> Vec<Token> {
        [self.prompt.as_slice(), self.pre.as_slice()].concat()
    }
}

/// `(v, x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceSample {
    pub scene_id: usize,
    pub prompt: Vec<Token>,
    pub caption: Vec<Token>,
    pub score: f64,
    pub hallucinated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuratedCorpus {
    pub pos: Vec<UnlearnUnit>,
    pub neg: Vec<UnlearnUnit>,
    pub sent: Vec<SentenceSample>,
    pub thresholds: Thresholds,
    /// Units with `T1 ≤ S(o) ≤ T0`, in neither set.
    pub discarded: usize,
}

impl CuratedCorpus {
    /// One `(neg, pos, sent)` index tuple per negative unit, negatives in a
    /// seeded shuffle and the two preservation sets cycled in their own
    /// shuffles.
    pub fn triplets(&self, seed: u64) -> Vec<(usize, usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut neg: Vec<usize> = (0..self.neg.len()).collect();
        let mut pos: Vec<usize> = (0..self.pos.len()).collect();
        let mut sent: Vec<usize> = (0..self.sent.len()).collect();
        neg.shuffle(&mut rng);
        pos.shuffle(&mut rng);
        sent.shuffle(&mut rng);
        neg.iter()
            .enumerate()
            .map(|(i, &n)| {
                let p = if pos.is_empty() { usize::MAX } else { pos[i % pos.len()] };
                let s = if sent.is_empty() { usize::MAX } else { sent[i % sent.len()] };
                (n, p, s)
            })
            .collect()
    }
}

fn units_of(sample: &CaptionSample) -> impl Iterator<Item = UnlearnUnit> + '_ {
    sample.spans.iter().map(move |span| UnlearnUnit {
        scene_id: sample.scene_id,
        prompt: sample.prompt.clone(),
        pre: sample.pre(span).to_vec(),
        cur: sample.cur(span).to_vec(),
        object: span.object,
        score: span.score,
        hallucinated: span.hallucinated,
    })
}

/// Partition object mentions by strict threshold predicates:
/// `S(o) > T0 → pos`, `S(o) < T1 → neg`; whole captions with `S(y) > T2`
/// become sentence samples.
pub fn curate(samples: &[CaptionSample], thresholds: Thresholds) -> Result<CuratedCorpus, WorldError> {
    let Thresholds { t0, t1, t2 } = thresholds;
    if !(t1 <= t2 && t2 <= t0) {
        warn!("thresholds out of the usual order T1 <= T2 <= T0: T0={t0}, T1={t1}, T2={t2}");
    }
    let mut out = CuratedCorpus { pos: Vec::new(), neg: Vec::new(), sent: Vec::new(), thresholds, discarded: 0 };
    for sample in samples {
        for unit in units_of(sample) {
            let (is_pos, is_neg) = (unit.score > t0, unit.score < t1);
            if is_pos {
                out.pos.push(unit.clone());
            }
            if is_neg {
                out.neg.push(unit);
            } else if !is_pos {
                out.discarded += 1;
            }
        }
        if sample.sentence_score > t2 {
            out.sent.push(SentenceSample {
                scene_id: sample.scene_id,
                prompt: sample.prompt.clone(),
                caption: sample.caption.clone(),
                score: sample.sentence_score,
                hallucinated: sample.is_hallucinated(),
            });
        }
    }
    if out.neg.is_empty() {
        return Err(WorldError::EmptySubset("negative"));
    }
    if out.pos.is_empty() {
        return Err(WorldError::EmptySubset("positive"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// Fraction of `D_neg` that is truly hallucinated.
    pub neg_purity: f64,
    /// Fraction of `D_pos` that is truly grounded.
    pub pos_purity: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_sent: usize,
    pub sent_hallucinated_fraction: f64,
}

pub fn curation_purity_report(curated: &CuratedCorpus) -> PurityReport {
    let frac = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    PurityReport {
        neg_purity: frac(curated.neg.iter().filter(|u| u.hallucinated).count(), curated.neg.len()),
        pos_purity: frac(curated.pos.iter().filter(|u| !u.hallucinated).count(), curated.pos.len()),
        n_pos: curated.pos.len(),
        n_neg: curated.neg.len(),
        n_sent: curated.sent.len(),
        sent_hallucinated_fraction: frac(curated.sent.iter().filter(|s| s.hallucinated).count(), curated.sent.len()),
    }
}

impl Corpus {
    pub fn curate(&self, thresholds: Thresholds) -> Result<CuratedCorpus, WorldError> {
        curate(&self.samples, thresholds)
    }
}
