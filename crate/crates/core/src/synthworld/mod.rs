//! Synthetic hallucination-prone caption corpus.
//!
//! Scenes are bags of ground-truth objects. Captions list the present objects
//! in random order and, with probability `p_h`, one injected absent object
//! drawn by co-occurrence with what is present. Ground truth makes every
//! hallucination exactly decidable. Alignment scores on a `[20, 36]` scale
//! stand in for CLIP image-text similarity.

mod curate;
mod io;

pub use curate::{curate, curation_purity_report, CuratedCorpus, PurityReport, SentenceSample, Thresholds, UnlearnUnit};
pub use io::{read_corpus_jsonl, write_corpus_jsonl, CorpusRecord, CORPUS_SCHEMA};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toymodel::{Token, Vocab};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("co-occurrence matrix is all zeros but p_h > 0")]
    DegenerateCooccurrence,
    #[error("curation produced an empty {0} set; unlearning cannot proceed")]
    EmptySubset(&'static str),
    #[error("corpus file: {0}")]
    Io(String),
}

/// Block-structured co-occurrence: objects in the same cluster co-occur with
/// weight `within`, others with `across`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CooccurrenceSpec {
    pub n_clusters: usize,
    pub within: f64,
    pub across: f64,
}

impl Default for CooccurrenceSpec {
    fn default() -> Self {
        Self { n_clusters: 4, within: 1.0, across: 0.02 }
    }
}

/// Dense `N_obj × N_obj` co-occurrence weights, zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cooccurrence {
    n: usize,
    weights: Vec<f64>,
}

impl Cooccurrence {
    pub fn new(n: usize, weights: Vec<f64>) -> Result<Self, WorldError> {
        if weights.len() != n * n {
            return Err(WorldError::Config(format!("Q must be {n}x{n}")));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(WorldError::Config("Q entries must be finite and nonnegative".into()));
        }
        if (0..n).any(|i| weights[i * n + i] != 0.0) {
            return Err(WorldError::Config("Q must have a zero diagonal".into()));
        }
        Ok(Self { n, weights })
    }

    pub fn from_spec(n: usize, spec: &CooccurrenceSpec) -> Result<Self, WorldError> {
        if spec.n_clusters == 0 || spec.n_clusters > n {
            return Err(WorldError::Config(format!("{} clusters for {n} objects", spec.n_clusters)));
        }
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    w[i * n + j] = if cluster_of(i, n, spec.n_clusters) == cluster_of(j, n, spec.n_clusters) {
                        spec.within
                    } else {
                        spec.across
                    };
                }
            }
        }
        Self::new(n, w)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    /// `Σ_{p ∈ present} Q[p][o]` for object `o`.
    pub fn affinity(&self, present: &BTreeSet<Token>, o: Token) -> f64 {
        present.iter().map(|p| self.get(p.index(), o.index())).sum()
    }
}

fn cluster_of(i: usize, n: usize, k: usize) -> usize {
    i * k / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_scenes: usize,
    pub n_obj: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub cooccurrence: CooccurrenceSpec,
    /// Chance that a scene also holds one object from another cluster.
    pub p_off_cluster: f64,
    /// Zipf exponent of object popularity inside a cluster.
    pub popularity_exponent: f64,
    /// Injection rate for standard-prompt captions.
    pub p_h: f64,
    /// Injection rate for exhaustive-prompt captions.
    pub p_h_exhaustive: f64,
    pub exhaustive_fraction: f64,
    pub sigma_enc: f64,
    pub sigma_score: f64,
    /// Chance that an existence question about a co-occurring absent object is
    /// labelled "yes" in bias-training probes.
    pub p_probe_bias: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_scenes: 2000,
            n_obj: 24,
            min_objects: 2,
            max_objects: 4,
            cooccurrence: CooccurrenceSpec::default(),
            p_off_cluster: 0.2,
            popularity_exponent: 0.8,
            p_h: 0.5,
            p_h_exhaustive: 0.9,
            exhaustive_fraction: 0.25,
            sigma_enc: 0.1,
            sigma_score: 1.0,
            p_probe_bias: 0.3,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.n_obj == 0 || self.n_scenes == 0 {
            return bad("n_obj and n_scenes must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects >= self.n_obj {
            return bad(format!("objects per scene {}..={} invalid", self.min_objects, self.max_objects));
        }
        for (name, p) in [
            ("p_h", self.p_h),
            ("p_h_exhaustive", self.p_h_exhaustive),
            ("exhaustive_fraction", self.exhaustive_fraction),
            ("p_off_cluster", self.p_off_cluster),
            ("p_probe_bias", self.p_probe_bias),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} outside [0, 1]"));
            }
        }
        if !(self.sigma_enc >= 0.0) || !(self.sigma_score >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        Ok(())
    }
}

/// Affine map from encoding similarity onto the alignment-score scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self { lo: 20.0, hi: 36.0 }
    }
}

impl ScoreScale {
    pub fn map(&self, similarity: f64) -> f64 {
        self.lo + (self.hi - self.lo) * similarity
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub objects: BTreeSet<Token>,
    /// Noisy bag-of-objects vector: near 1 for present objects, near 0 otherwise.
    pub encoding: Vec<f64>,
}

impl Scene {
    pub fn contains(&self, o: Token) -> bool {
        self.objects.contains(&o)
    }
}

/// One object mention: `caption[start..end]` is `cur(o)`, `caption[..start]`
/// is `pre(o)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub object: Token,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub hallucinated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub scene_id: usize,
    pub prompt: Vec<Token>,
    pub caption: Vec<Token>,
    pub spans: Vec<Span>,
    pub sentence_score: f64,
    /// Ground-truth injected objects.
    pub injected: Vec<Token>,
}

impl CaptionSample {
    pub fn pre(&self, span: &Span) -> &[Token] {
        &self.caption[..span.start]
    }

    pub fn cur(&self, span: &Span) -> &[Token] {
        &self.caption[span.start..span.end]
    }

    pub fn is_hallucinated(&self) -> bool {
        !self.injected.is_empty()
    }

    pub fn is_exhaustive(&self, vocab: &Vocab) -> bool {
        self.prompt.contains(&vocab.prompt_exhaustive())
    }
}

/// Existence question used to teach the captioner yes/no answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub scene_id: usize,
    pub object: Token,
    pub answer_yes: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub scenes: Vec<Scene>,
    pub samples: Vec<CaptionSample>,
}

impl Corpus {
    pub fn scene(&self, id: usize) -> &Scene {
        &self.scenes[id]
    }

    pub fn hallucinated_fraction(&self) -> f64 {
        self.samples.iter().filter(|s| s.is_hallucinated()).count() as f64 / self.samples.len() as f64
    }
}

/// The world's fixed statistics: co-occurrence and object popularity.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub q: Cooccurrence,
    pub scale: ScoreScale,
    popularity: Vec<f64>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self, WorldError> {
        config.validate()?;
        let q = Cooccurrence::from_spec(config.n_obj, &config.cooccurrence)?;
        Self::with_cooccurrence(config, q)
    }

    pub fn with_cooccurrence(config: WorldConfig, q: Cooccurrence) -> Result<Self, WorldError> {
        config.validate()?;
        if q.size() != config.n_obj {
            return Err(WorldError::Config(format!("Q is {0}x{0}, expected {1}", q.size(), config.n_obj)));
        }
        if q.is_zero() && (config.p_h > 0.0 || config.p_h_exhaustive > 0.0) {
            return Err(WorldError::DegenerateCooccurrence);
        }
        let k = config.cooccurrence.n_clusters.max(1);
        let n = config.n_obj;
        let popularity = (0..n)
            .map(|i| {
                let rank = (0..i).filter(|&j| cluster_of(j, n, k) == cluster_of(i, n, k)).count();
                1.0 / ((rank + 1) as f64).powf(config.popularity_exponent)
            })
            .collect();
        Ok(Self { vocab: Vocab::new(n), config, q, scale: ScoreScale::default(), popularity })
    }

    pub fn popularity(&self, o: Token) -> f64 {
        self.popularity[o.index()]
    }

    fn clusters(&self) -> Vec<Vec<usize>> {
        let (n, k) = (self.config.n_obj, self.config.cooccurrence.n_clusters);
        let mut out = vec![Vec::new(); k];
        for i in 0..n {
            out[cluster_of(i, n, k)].push(i);
        }
        out
    }

    fn sample_weighted(rng: &mut ChaCha8Rng, candidates: &[usize], weight: impl Fn(usize) -> f64) -> Option<usize> {
        let total: f64 = candidates.iter().map(|&c| weight(c)).sum();
        if total <= 0.0 {
            return None;
        }
        let mut u = rng.gen::<f64>() * total;
        for &c in candidates {
            let w = weight(c);
            if u < w {
                return Some(c);
            }
            u -= w;
        }
        candidates.iter().rev().copied().find(|&c| weight(c) > 0.0)
    }

    fn sample_scene(&self, id: usize, rng: &mut ChaCha8Rng) -> Scene {
        let cfg = &self.config;
        let clusters = self.clusters();
        let home = rng.gen_range(0..clusters.len());
        let k = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut pool = clusters[home].clone();
        let mut objects = BTreeSet::new();
        let off = clusters.len() > 1 && k >= 2 && rng.gen::<f64>() < cfg.p_off_cluster;
        let n_home = if off { k - 1 } else { k }.min(pool.len());
        for _ in 0..n_home {
            let pick = Self::sample_weighted(rng, &pool, |o| self.popularity[o]).expect("positive popularity");
            pool.retain(|&o| o != pick);
            objects.insert(Token(pick as u32));
        }
        if off {
            let others: Vec<usize> = (0..cfg.n_obj).filter(|&o| cluster_of(o, cfg.n_obj, clusters.len()) != home).collect();
            let pick = Self::sample_weighted(rng, &others, |o| self.popularity[o]).expect("positive popularity");
            objects.insert(Token(pick as u32));
        }
        let noise = Normal::new(0.0, cfg.sigma_enc.max(0.0)).expect("valid std");
        let encoding = (0..cfg.n_obj)
            .map(|o| {
                let base = if objects.contains(&Token(o as u32)) { 1.0 } else { 0.0 };
                if cfg.sigma_enc > 0.0 {
                    base + noise.sample(rng)
                } else {
                    base
                }
            })
            .collect();
        Scene { id, objects, encoding }
    }

    /// Absent object drawn proportional to its co-occurrence with the scene;
    /// uniform over absent objects if the scene has no co-occurrence mass.
    pub fn sample_cooccurring_absent(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> Option<Token> {
        let absent: Vec<usize> = (0..self.config.n_obj).filter(|&o| !scene.contains(Token(o as u32))).collect();
        if absent.is_empty() {
            return None;
        }
        Self::sample_weighted(rng, &absent, |o| self.q.affinity(&scene.objects, Token(o as u32)))
            .or_else(|| absent.choose(rng).copied())
            .map(|o| Token(o as u32))
    }

    /// Alignment score `S(o)` of object `o` against a scene.
    pub fn alignment_score(&self, scene: &Scene, o: Token, rng: &mut ChaCha8Rng) -> f64 {
        let noise = if self.config.sigma_score > 0.0 {
            Normal::new(0.0, self.config.sigma_score).expect("valid std").sample(rng)
        } else {
            0.0
        };
        self.scale.map(scene.encoding[o.index()]) + noise
    }

    fn build_caption(&self, scene: &Scene, exhaustive: bool, rng: &mut ChaCha8Rng, score_rng: &mut ChaCha8Rng) -> CaptionSample {
        let v = &self.vocab;
        let p = if exhaustive { self.config.p_h_exhaustive } else { self.config.p_h };
        let mut mentioned: Vec<Token> = scene.objects.iter().copied().collect();
        let mut injected = Vec::new();
        if rng.gen::<f64>() < p {
            if let Some(o) = self.sample_cooccurring_absent(scene, rng) {
                injected.push(o);
                mentioned.push(o);
            }
        }
        mentioned.shuffle(rng);
        let mut caption = Vec::new();
        let mut spans = Vec::new();
        for (i, &o) in mentioned.iter().enumerate() {
            let start = caption.len();
            if i > 0 {
                caption.push(v.and());
            }
            caption.push(o);
            if i + 1 == mentioned.len() {
                caption.push(v.eos());
            }
            let score = self.alignment_score(scene, o, score_rng);
            spans.push(Span { object: o, start, end: caption.len(), score, hallucinated: !scene.contains(o) });
        }
        let sentence_score = sentence_score(&spans);
        let prompt = vec![v.bos(), if exhaustive { v.prompt_exhaustive() } else { v.prompt_standard() }];
        CaptionSample { scene_id: scene.id, prompt, caption, spans, sentence_score, injected }
    }

    /// One captioned scene per `n_scenes`, fully determined by `config.seed`.
    pub fn generate_corpus(&self) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut score_rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5C0E_5C0E_5C0E_5C0E);
        let mut scenes = Vec::with_capacity(self.config.n_scenes);
        let mut samples = Vec::with_capacity(self.config.n_scenes);
        for id in 0..self.config.n_scenes {
            let scene = self.sample_scene(id, &mut rng);
            let exhaustive = rng.gen::<f64>() < self.config.exhaustive_fraction;
            samples.push(self.build_caption(&scene, exhaustive, &mut rng, &mut score_rng));
            scenes.push(scene);
        }
        Corpus { vocab: self.vocab, scenes, samples }
    }

    /// Clean reference caption of a scene: present objects in ascending order.
    pub fn reference_caption(&self, scene: &Scene) -> Vec<Token> {
        let v = &self.vocab;
        let mut out = Vec::new();
        for (i, &o) in scene.objects.iter().enumerate() {
            if i > 0 {
                out.push(v.and());
            }
            out.push(o);
        }
        out.push(v.eos());
        out
    }

    /// Two existence questions per scene: one present object ("yes") and one
    /// absent object. Absent objects come from co-occurrence half the time and
    /// are then mislabelled "yes" with probability `p_probe_bias`.
    pub fn generate_probes(&self, corpus: &Corpus, seed: u64) -> Vec<ProbeSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(2 * corpus.scenes.len());
        for scene in &corpus.scenes {
            let present: Vec<Token> = scene.objects.iter().copied().collect();
            let &pos = present.choose(&mut rng).expect("scenes are nonempty");
            out.push(ProbeSample { scene_id: scene.id, object: pos, answer_yes: true });
            let cooccurring = rng.gen::<f64>() < 0.5;
            let neg = if cooccurring {
                self.sample_cooccurring_absent(scene, &mut rng)
            } else {
                let absent: Vec<Token> = self.vocab.objects().filter(|o| !scene.contains(*o)).collect();
                absent.choose(&mut rng).copied()
            };
            if let Some(neg) = neg {
                let flipped = cooccurring && rng.gen::<f64>() < self.config.p_probe_bias;
                out.push(ProbeSample { scene_id: scene.id, object: neg, answer_yes: flipped });
            }
        }
        out
    }
}

/// `S(y)`: mean object score over the caption's mentions.
pub fn sentence_score(spans: &[Span]) -> f64 {
    if spans.is_empty() {
        return 0.0;
    }
    spans.iter().map(|s| s.score).sum::<f64>() / spans.len() as f64
}
