//! Hallucination and caption-quality metrics, exact on synthetic ground truth.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthworld::{Cooccurrence, Scene};
use crate::toymodel::{CaptionModel, DecodeMode, DecodeRequest, ModelError, SeqItem, Token, Vocab};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{captions} captions but {scenes} scenes")]
    Mismatch { captions: usize, scenes: usize },
    #[error("count check failed: {0}")]
    Inconsistent(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    /// Fraction of captions mentioning at least one absent object.
    pub chair_s: f64,
    /// Fraction of mentioned objects that are absent.
    pub chair_i: f64,
    pub n_captions: usize,
    pub n_hallucinated_captions: usize,
    pub n_mentioned: usize,
    pub n_hallucinated: usize,
}

/// Distinct object tokens mentioned in a caption.
pub fn mentioned_objects(vocab: &Vocab, caption: &[Token]) -> BTreeSet<Token> {
    caption.iter().copied().filter(|&t| vocab.is_object(t)).collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// CHAIR over captions paired with their scenes. Objects are counted once per
/// caption; captions with no mentions count toward `chair_s` only.
pub fn chair(vocab: &Vocab, captions: &[&[Token]], scenes: &[&Scene]) -> Result<ChairResult, MetricsError> {
    if captions.len() != scenes.len() {
        return Err(MetricsError::Mismatch { captions: captions.len(), scenes: scenes.len() });
    }
    if captions.is_empty() {
        return Err(MetricsError::Empty("caption set"));
    }
    let mut r = ChairResult { n_captions: captions.len(), ..Default::default() };
    for (caption, scene) in captions.iter().zip(scenes) {
        let mentioned = mentioned_objects(vocab, caption);
        let bad = mentioned.iter().filter(|o| !scene.contains(**o)).count();
        r.n_mentioned += mentioned.len();
        r.n_hallucinated += bad;
        r.n_hallucinated_captions += usize::from(bad > 0);
    }
    r.chair_s = ratio(r.n_hallucinated_captions, r.n_captions);
    r.chair_i = ratio(r.n_hallucinated, r.n_mentioned);
    let check = chair_recount(vocab, captions, scenes);
    if (check.n_mentioned, check.n_hallucinated, check.n_hallucinated_captions)
        != (r.n_mentioned, r.n_hallucinated, r.n_hallucinated_captions)
    {
        return Err(MetricsError::Inconsistent(format!("{r:?} vs recount {check:?}")));
    }
    Ok(r)
}

/// Recount over every (caption, vocabulary object) pair.
pub fn chair_recount(vocab: &Vocab, captions: &[&[Token]], scenes: &[&Scene]) -> ChairResult {
    let mut r = ChairResult { n_captions: captions.len(), ..Default::default() };
    for (caption, scene) in captions.iter().zip(scenes) {
        let mut any = false;
        for o in vocab.objects() {
            if caption.contains(&o) {
                r.n_mentioned += 1;
                if !scene.objects.contains(&o) {
                    r.n_hallucinated += 1;
                    any = true;
                }
            }
        }
        if any {
            r.n_hallucinated_captions += 1;
        }
    }
    r.chair_s = ratio(r.n_hallucinated_captions, r.n_captions);
    r.chair_i = ratio(r.n_hallucinated, r.n_mentioned);
    r
}

/// Fraction of scene objects mentioned, pooled over captions.
pub fn semantic_recall(captions: &[&[Token]], scenes: &[&Scene]) -> Result<f64, MetricsError> {
    if captions.len() != scenes.len() {
        return Err(MetricsError::Mismatch { captions: captions.len(), scenes: scenes.len() });
    }
    let total: usize = scenes.iter().map(|s| s.objects.len()).sum();
    if total == 0 {
        return Err(MetricsError::Empty("scene set"));
    }
    let hit: usize = captions
        .iter()
        .zip(scenes)
        .map(|(c, s)| s.objects.iter().filter(|o| c.contains(o)).count())
        .sum();
    Ok(hit as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeRegime {
    /// Negatives drawn uniformly from absent objects.
    Random,
    /// Negatives drawn from the most frequent absent objects.
    Popular,
    /// Negatives drawn by co-occurrence with the present objects.
    Adversarial,
}

impl PopeRegime {
    pub const ALL: [PopeRegime; 3] = [PopeRegime::Random, PopeRegime::Popular, PopeRegime::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            PopeRegime::Random => "random",
            PopeRegime::Popular => "popular",
            PopeRegime::Adversarial => "adversarial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeProbe {
    /// Index into the evaluated scene slice.
    pub scene: usize,
    pub object: Token,
    pub present: bool,
}

/// Answers existence questions about scenes.
pub trait ExistenceResponder {
    fn answer(&self, queries: &[(&Scene, Token)]) -> Result<Vec<bool>, MetricsError>;
}

impl<T: Scalar> ExistenceResponder for CaptionModel<T> {
    fn answer(&self, queries: &[(&Scene, Token)]) -> Result<Vec<bool>, MetricsError> {
        let q: Vec<(&[f64], Token)> = queries.iter().map(|&(s, o)| (s.encoding.as_slice(), o)).collect();
        Ok(self.existence_margins(&q)?.into_iter().map(|m| m > T::zero()).collect())
    }
}

/// Reads the ground truth.
pub struct OracleResponder;

impl ExistenceResponder for OracleResponder {
    fn answer(&self, queries: &[(&Scene, Token)]) -> Result<Vec<bool>, MetricsError> {
        Ok(queries.iter().map(|&(s, o)| s.contains(o)).collect())
    }
}

/// Answers yes with probability one half.
pub struct CoinFlipResponder {
    pub seed: u64,
}

impl ExistenceResponder for CoinFlipResponder {
    fn answer(&self, queries: &[(&Scene, Token)]) -> Result<Vec<bool>, MetricsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(queries.iter().map(|_| rng.gen::<bool>()).collect())
    }
}

/// Size of the frequent-object pool for the popular regime.
const POPULAR_TOP_K: usize = 3;

/// Balanced probes: `n_questions` scene draws, each giving one present and one
/// absent object. Draws whose regime has no valid negative are skipped
/// whole; the skip count is returned.
pub fn pope_probes(
    vocab: &Vocab,
    scenes: &[Scene],
    q: &Cooccurrence,
    regime: PopeRegime,
    n_questions: usize,
    seed: u64,
) -> Result<(Vec<PopeProbe>, usize), MetricsError> {
    if scenes.is_empty() {
        return Err(MetricsError::Empty("scene set"));
    }
    let mut freq = vec![0usize; vocab.n_objects()];
    for s in scenes {
        for o in &s.objects {
            freq[o.index()] += 1;
        }
    }
    let mut by_freq: Vec<Token> = vocab.objects().collect();
    by_freq.sort_by_key(|o| (std::cmp::Reverse(freq[o.index()]), o.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(2 * n_questions);
    let mut skipped = 0;
    for _ in 0..n_questions {
        let si = rng.gen_range(0..scenes.len());
        let scene = &scenes[si];
        let present: Vec<Token> = scene.objects.iter().copied().collect();
        let absent: Vec<Token> = vocab.objects().filter(|o| !scene.contains(*o)).collect();
        let &pos = present.choose(&mut rng).ok_or(MetricsError::Empty("scene"))?;
        let neg = match regime {
            PopeRegime::Random => absent.choose(&mut rng).copied(),
            PopeRegime::Popular => {
                let top: Vec<Token> = by_freq.iter().copied().filter(|o| !scene.contains(*o)).take(POPULAR_TOP_K).collect();
                top.choose(&mut rng).copied()
            }
            PopeRegime::Adversarial => absent
                .choose_weighted(&mut rng, |o| q.affinity(&scene.objects, *o))
                .ok()
                .copied(),
        };
        match neg {
            Some(neg) => {
                probes.push(PopeProbe { scene: si, object: pos, present: true });
                probes.push(PopeProbe { scene: si, object: neg, present: false });
            }
            None => skipped += 1,
        }
    }
    Ok((probes, skipped))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PopeResult {
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub yes_ratio: f64,
    pub n_probes: usize,
    pub skipped: usize,
}

/// Score yes/no answers against probe labels, with "yes" as the positive class.
pub fn pope_score(probes: &[PopeProbe], answers: &[bool]) -> Result<PopeResult, MetricsError> {
    if probes.len() != answers.len() {
        return Err(MetricsError::Invalid(format!("{} probes, {} answers", probes.len(), answers.len())));
    }
    let positives = probes.iter().filter(|p| p.present).count();
    if 2 * positives != probes.len() {
        return Err(MetricsError::Inconsistent(format!("{positives} positives among {} probes", probes.len())));
    }
    if probes.is_empty() {
        return Err(MetricsError::Empty("probe set"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (p, &a) in probes.iter().zip(answers) {
        match (p.present, a) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(PopeResult {
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        accuracy: ratio(tp + tn, probes.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        yes_ratio: ratio(tp + fp, probes.len()),
        n_probes: probes.len(),
        skipped: 0,
    })
}

pub fn pope_eval(
    responder: &dyn ExistenceResponder,
    vocab: &Vocab,
    scenes: &[Scene],
    q: &Cooccurrence,
    regime: PopeRegime,
    n_questions: usize,
    seed: u64,
) -> Result<PopeResult, MetricsError> {
    let (probes, skipped) = pope_probes(vocab, scenes, q, regime, n_questions, seed)?;
    let queries: Vec<(&Scene, Token)> = probes.iter().map(|p| (&scenes[p.scene], p.object)).collect();
    let answers = responder.answer(&queries)?;
    Ok(PopeResult { skipped, ..pope_score(&probes, &answers)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub ppl: f64,
    pub mean_nll: f64,
    pub n_tokens: usize,
}

/// `exp` of the mean per-token NLL of each caption given its prompt, pooled
/// over all tokens.
pub fn perplexity<T: Scalar>(
    reference: &CaptionModel<T>,
    encodings: &[&[f64]],
    prompts: &[&[Token]],
    captions: &[&[Token]],
) -> Result<Perplexity, MetricsError> {
    if captions.is_empty() {
        return Err(MetricsError::Empty("caption set"));
    }
    if encodings.len() != captions.len() || prompts.len() != captions.len() {
        return Err(MetricsError::Invalid("encodings, prompts and captions differ in length".into()));
    }
    if captions.iter().any(|c| c.is_empty()) {
        return Err(MetricsError::Empty("caption"));
    }
    let items: Vec<SeqItem<'_>> = captions
        .iter()
        .zip(prompts)
        .zip(encodings)
        .map(|((c, p), e)| SeqItem { encoding: e, tokens: [*p, *c].concat(), n_context: p.len(), weight: 1.0 })
        .collect();
    let nlls = reference.token_nlls(&items)?;
    let n_tokens: usize = nlls.iter().map(Vec::len).sum();
    let total: f64 = nlls.iter().flatten().map(|x| x.to_f64_lossy()).sum();
    let mean_nll = total / n_tokens as f64;
    Ok(Perplexity { ppl: mean_nll.exp(), mean_nll, n_tokens })
}

fn ngram_counts<W: Eq + Hash + Clone>(seq: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-`n` with one reference per candidate: geometric mean of clipped
/// n-gram precisions of orders `1..=n`, times the brevity penalty.
pub fn bleu<W: Eq + Hash + Clone>(candidates: &[&[W]], references: &[&[W]], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::Invalid("BLEU order must be positive".into()));
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::Mismatch { captions: candidates.len(), scenes: references.len() });
    }
    if candidates.is_empty() {
        return Err(MetricsError::Empty("caption set"));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, k);
            for (g, cnt) in ngram_counts(c, k) {
                hit += cnt.min(rc.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if hit == 0 {
            return Ok(0.0);
        }
        log_sum += (hit as f64 / total as f64).ln();
    }
    let c: usize = candidates.iter().map(|c| c.len()).sum();
    let r: usize = references.iter().map(|r| r.len()).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Evaluate under the exhaustive-listing prompt instead of the standard one.
    pub exhaustive_prompt: bool,
    pub decode: DecodeMode,
    pub samples_per_scene: usize,
    pub max_len: usize,
    pub pope_questions: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            exhaustive_prompt: false,
            decode: DecodeMode::Sample { temperature: 1.0 },
            samples_per_scene: 4,
            max_len: 16,
            pope_questions: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PopeF1 {
    pub random: f64,
    pub popular: f64,
    pub adversarial: f64,
}

impl PopeF1 {
    pub fn mean(&self) -> f64 {
        (self.random + self.popular + self.adversarial) / 3.0
    }
}

/// Metric snapshot of one model on one evaluation set. CHAIR values and recall
/// are percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub pope_f1: PopeF1,
    pub ppl: f64,
    pub mean_nll: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub recall: f64,
    pub n_captions: usize,
    pub n_mentioned: usize,
    pub n_hallucinated: usize,
    pub pope_skipped: usize,
}

impl EvalReport {
    /// `(name, value)` pairs in a fixed order, for long-format tables.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("chair_s", self.chair_s),
            ("chair_i", self.chair_i),
            ("pope_f1_random", self.pope_f1.random),
            ("pope_f1_popular", self.pope_f1.popular),
            ("pope_f1_adversarial", self.pope_f1.adversarial),
            ("pope_f1_mean", self.pope_f1.mean()),
            ("ppl", self.ppl),
            ("mean_nll", self.mean_nll),
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu4", self.bleu4),
            ("recall", self.recall),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint_id: String,
    pub eval_set_id: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Held-out scenes with their clean reference captions.
pub struct EvalSet<'a> {
    pub vocab: Vocab,
    pub scenes: &'a [Scene],
    pub references: &'a [Vec<Token>],
    pub q: &'a Cooccurrence,
}

/// Seed of the `k`-th caption of scene `scene`; shared by every evaluated
/// model so sampling noise cancels in comparisons.
fn caption_seed(seed: u64, scene: usize, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((scene as u64) << 16) ^ k as u64
}

fn strip_eos(vocab: &Vocab, caption: &[Token]) -> Vec<Token> {
    caption.iter().copied().filter(|&t| t != vocab.eos()).collect()
}

/// Captions of every scene under the spec's prompt and decoding mode.
pub fn generate_captions<T: Scalar>(model: &CaptionModel<T>, set: &EvalSet<'_>, spec: &EvalSpec) -> Result<Vec<Vec<Token>>, MetricsError> {
    let v = set.vocab;
    let prompt = vec![v.bos(), if spec.exhaustive_prompt { v.prompt_exhaustive() } else { v.prompt_standard() }];
    let k = match spec.decode {
        DecodeMode::Greedy => 1,
        DecodeMode::Sample { .. } => spec.samples_per_scene.max(1),
    };
    let requests: Vec<DecodeRequest<'_>> = set
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let prompt = &prompt;
            (0..k).map(move |j| DecodeRequest { encoding: &s.encoding, prompt: prompt.clone(), seed: caption_seed(spec.seed, i, j) })
        })
        .collect();
    Ok(model.generate(&requests, spec.decode, spec.max_len)?)
}

/// Full metric snapshot. PPL is scored by `reference` on the generated
/// captions given the standard prompt and `reference_encoding`.
pub fn evaluate<T: Scalar>(
    model: &CaptionModel<T>,
    reference: &CaptionModel<T>,
    reference_encoding: &[f64],
    set: &EvalSet<'_>,
    spec: &EvalSpec,
) -> Result<EvalReport, MetricsError> {
    if set.scenes.is_empty() {
        return Err(MetricsError::Empty("scene set"));
    }
    if set.references.len() != set.scenes.len() {
        return Err(MetricsError::Mismatch { captions: set.references.len(), scenes: set.scenes.len() });
    }
    let v = set.vocab;
    let captions = generate_captions(model, set, spec)?;
    let per_scene = captions.len() / set.scenes.len();
    let scene_of: Vec<&Scene> = (0..captions.len()).map(|i| &set.scenes[i / per_scene]).collect();
    let caps: Vec<&[Token]> = captions.iter().map(Vec::as_slice).collect();
    let ch = chair(&v, &caps, &scene_of)?;
    let recall = semantic_recall(&caps, &scene_of)?;

    let stripped: Vec<Vec<Token>> = captions.iter().map(|c| strip_eos(&v, c)).collect();
    let refs: Vec<Vec<Token>> = (0..captions.len()).map(|i| strip_eos(&v, &set.references[i / per_scene])).collect();
    let cand: Vec<&[Token]> = stripped.iter().map(Vec::as_slice).collect();
    let refr: Vec<&[Token]> = refs.iter().map(Vec::as_slice).collect();

    let scored: Vec<&[Token]> = caps.iter().copied().filter(|c| !c.is_empty()).collect();
    let prompt = [v.bos(), v.prompt_standard()];
    let ppl = perplexity(reference, &vec![reference_encoding; scored.len()], &vec![&prompt[..]; scored.len()], &scored)?;

    let mut pope = PopeF1::default();
    let mut pope_skipped = 0;
    for (i, regime) in PopeRegime::ALL.into_iter().enumerate() {
        let r = pope_eval(model, &v, set.scenes, set.q, regime, spec.pope_questions, spec.seed.wrapping_add(i as u64))?;
        pope_skipped += r.skipped;
        match regime {
            PopeRegime::Random => pope.random = r.f1,
            PopeRegime::Popular => pope.popular = r.f1,
            PopeRegime::Adversarial => pope.adversarial = r.f1,
        }
    }
    Ok(EvalReport {
        chair_s: 100.0 * ch.chair_s,
        chair_i: 100.0 * ch.chair_i,
        pope_f1: pope,
        ppl: ppl.ppl,
        mean_nll: ppl.mean_nll,
        bleu1: bleu(&cand, &refr, 1)?,
        bleu2: bleu(&cand, &refr, 2)?,
        bleu4: bleu(&cand, &refr, 4)?,
        recall: 100.0 * recall,
        n_captions: ch.n_captions,
        n_mentioned: ch.n_mentioned,
        n_hallucinated: ch.n_hallucinated,
        pope_skipped,
    })
}
