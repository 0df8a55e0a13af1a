use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelError, Token, Vocab};
use crate::autodiff::{flatten_params, ParamLayout, ParamVector, Tape, Tensor, Var};
use crate::Scalar;

/// Which block of the captioner a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Encoder,
    Mapping,
    Decoder,
    Adapter,
}

impl Partition {
    pub fn code(self) -> u8 {
        match self {
            Partition::Encoder => 0,
            Partition::Mapping => 1,
            Partition::Decoder => 2,
            Partition::Adapter => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Partition::Encoder,
            1 => Partition::Mapping,
            2 => Partition::Decoder,
            3 => Partition::Adapter,
            _ => return None,
        })
    }
}

/// The set of partitions an optimizer may update.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSet(Vec<Partition>);

impl TrainableSet {
    pub fn new(parts: &[Partition]) -> Self {
        Self(parts.to_vec())
    }

    /// θ_φ: the scene-to-decoder mapping layer.
    pub fn mapping() -> Self {
        Self::new(&[Partition::Mapping])
    }

    pub fn mapping_and_decoder() -> Self {
        Self::new(&[Partition::Mapping, Partition::Decoder])
    }

    pub fn adapters() -> Self {
        Self::new(&[Partition::Adapter])
    }

    pub fn contains(&self, p: Partition) -> bool {
        self.0.contains(&p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub n_obj: usize,
    /// Width of the frozen scene encoder output.
    pub enc_dim: usize,
    /// Mapped scene vector and token embedding width.
    pub hidden: usize,
    pub dec_hidden: usize,
    /// Maximum input length seen by the decoder.
    pub context: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { n_obj: 24, enc_dim: 64, hidden: 32, dec_hidden: 64, context: 24 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub partition: Partition,
    pub tensor: Tensor<T>,
}

/// Low-rank adapter configuration. Factors live in the parameter store as
/// `lora.<target>.down` (`rank × in`) and `lora.<target>.up` (`out × rank`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl LoraSpec {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Conditional captioner: frozen random scene encoder, trainable mapping
/// layer, and a small causal decoder over token embeddings.
///
/// For input position `t` the decoder sees the current token embedding, the
/// mean context embedding of tokens `0..=t`, and the mapped scene vector `h`:
///
/// ```text
/// e      = tanh(P · scene + c)                  (encoder, frozen)
/// h      = tanh(W_map · e + b_map)              (mapping layer θ_φ)
/// a_t    = tanh(W1 · [tok_t ; bag_t ; h] + b1)
/// logits = W2 · a_t + W_s · h + b2
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel<T> {
    dims: ModelDims,
    vocab: Vocab,
    params: Vec<ParamEntry<T>>,
    lora: Option<LoraSpec>,
}

/// One sequence to score or extend. `tokens[..n_context]` is conditioning
/// context; every later token is a prediction target.
#[derive(Clone, Debug)]
pub struct SeqItem<'a> {
    pub encoding: &'a [f64],
    pub tokens: Vec<Token>,
    pub n_context: usize,
    /// Multiplies this item's mean per-token NLL in the batch loss.
    pub weight: f64,
}

pub(crate) struct Bound {
    vars: Vec<Var>,
    trainable: Vec<Var>,
}

struct RowPlan<T> {
    scene_rows: Vec<usize>,
    cur_tokens: Vec<usize>,
    bag: Tensor<T>,
    targets: Vec<usize>,
    weights: Vec<T>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::of(normal.sample(rng))).collect()
}

impl<T: Scalar> CaptionModel<T> {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new(dims.n_obj);
        let v = vocab.size();
        let (n, e, h, d) = (dims.n_obj, dims.enc_dim, dims.hidden, dims.dec_hidden);
        let mut params = Vec::new();
        let mut add = |name: &str, partition, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng| {
            let numel = shape.iter().product();
            let data = if std == 0.0 { vec![T::zero(); numel] } else { gaussian(rng, numel, std) };
            params.push(ParamEntry {
                name: name.to_string(),
                partition,
                tensor: Tensor::new(shape, data).expect("finite init"),
            });
        };
        use Partition::*;
        add("enc.proj", Encoder, vec![e, n], 0.6, &mut rng);
        add("enc.bias", Encoder, vec![e], 0.1, &mut rng);
        add("map.w", Mapping, vec![h, e], 1.0 / (e as f64).sqrt(), &mut rng);
        add("map.b", Mapping, vec![h], 0.0, &mut rng);
        add("dec.tok", Decoder, vec![v, h], 0.5, &mut rng);
        add("dec.ctx", Decoder, vec![v, h], 0.5, &mut rng);
        add("dec.w1", Decoder, vec![d, 3 * h], 1.0 / (3.0 * h as f64).sqrt(), &mut rng);
        add("dec.b1", Decoder, vec![d], 0.0, &mut rng);
        add("dec.w2", Decoder, vec![v, d], 1.0 / (d as f64).sqrt(), &mut rng);
        add("dec.ws", Decoder, vec![v, h], 1.0 / (h as f64).sqrt(), &mut rng);
        add("dec.b2", Decoder, vec![v], 0.0, &mut rng);
        Self { dims, vocab, params, lora: None }
    }

    pub(crate) fn from_parts(dims: ModelDims, params: Vec<ParamEntry<T>>, lora: Option<LoraSpec>) -> Result<Self, ModelError> {
        let model = Self { vocab: Vocab::new(dims.n_obj), dims, params, lora };
        let reference = Self::new(model.dims.clone(), 0);
        for p in &reference.params {
            let got = model.param(&p.name)?;
            if got.shape() != p.tensor.shape() {
                return Err(ModelError::Checkpoint(format!("{} has shape {:?}", p.name, got.shape())));
            }
        }
        Ok(model)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn lora(&self) -> Option<&LoraSpec> {
        self.lora.as_ref()
    }

    pub(crate) fn set_lora(&mut self, spec: Option<LoraSpec>) {
        self.lora = spec;
    }

    pub fn params(&self) -> &[ParamEntry<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<ParamEntry<T>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn partition_len(&self, partition: Partition) -> usize {
        self.params.iter().filter(|p| p.partition == partition).map(|p| p.tensor.numel()).sum()
    }

    /// Flat copy of every parameter in `partition`.
    pub fn partition_vector(&self, partition: Partition) -> ParamVector<T> {
        self.trainable_vector(&TrainableSet::new(&[partition]))
    }

    pub fn trainable_layout(&self, set: &TrainableSet) -> ParamLayout {
        self.trainable_flat(set).0
    }

    pub fn trainable_vector(&self, set: &TrainableSet) -> ParamVector<T> {
        self.trainable_flat(set).1
    }

    fn trainable_flat(&self, set: &TrainableSet) -> (ParamLayout, ParamVector<T>) {
        flatten_params(
            self.params
                .iter()
                .filter(|p| set.contains(p.partition))
                .map(|p| (p.name.as_str(), &p.tensor)),
        )
    }

    /// Overwrite the trainable parameters from a flat vector.
    pub fn set_trainable(&mut self, set: &TrainableSet, theta: &ParamVector<T>) -> Result<(), ModelError> {
        let expected: usize = self.params.iter().filter(|p| set.contains(p.partition)).map(|p| p.tensor.numel()).sum();
        if expected != theta.len() {
            return Err(ModelError::Layout { expected, got: theta.len() });
        }
        if !theta.all_finite() {
            return Err(ModelError::Autodiff(crate::autodiff::AutodiffError::NonFinite("set_trainable".into())));
        }
        let mut offset = 0;
        for p in self.params.iter_mut().filter(|p| set.contains(p.partition)) {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&theta.as_slice()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Record every parameter on `tape`; those in `set` become differentiable
    /// leaves, optionally taking their values from `theta`.
    pub(crate) fn bind(&self, tape: &mut Tape<T>, set: &TrainableSet, theta: Option<&ParamVector<T>>) -> Result<Bound, ModelError> {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut trainable = Vec::new();
        let mut offset = 0;
        if let Some(th) = theta {
            let expected = self.trainable_layout(set).total_len();
            if expected != th.len() {
                return Err(ModelError::Layout { expected, got: th.len() });
            }
        }
        for p in &self.params {
            if set.contains(p.partition) {
                let value = match theta {
                    Some(th) => {
                        let n = p.tensor.numel();
                        let t = Tensor::new(p.tensor.shape().to_vec(), th.as_slice()[offset..offset + n].to_vec())?;
                        offset += n;
                        t
                    }
                    None => p.tensor.clone(),
                };
                let v = tape.param(value)?;
                trainable.push(v);
                vars.push(v);
            } else {
                vars.push(tape.constant(p.tensor.clone())?);
            }
        }
        Ok(Bound { vars, trainable })
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var, ModelError> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|i| bound.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Weight matrix including any attached adapter: `W + (α/r)·up·down`.
    fn weight(&self, tape: &mut Tape<T>, bound: &Bound, name: &str) -> Result<Var, ModelError> {
        let base = self.var(bound, name)?;
        match &self.lora {
            Some(spec) if spec.targets.iter().any(|t| t == name) => {
                let up = self.var(bound, &format!("lora.{name}.up"))?;
                let down = self.var(bound, &format!("lora.{name}.down"))?;
                let prod = tape.matmul(up, down)?;
                let delta = tape.scale(prod, T::of(spec.scaling()))?;
                Ok(tape.add(base, delta)?)
            }
            _ => Ok(base),
        }
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), ModelError> {
        if tokens.len() > self.dims.context {
            return Err(ModelError::PrefixOverflow { len: tokens.len(), max: self.dims.context });
        }
        match tokens.iter().find(|t| !self.vocab.contains(**t)) {
            Some(t) => Err(ModelError::UnknownToken(t.0)),
            None => Ok(()),
        }
    }

    /// Mapped scene vectors `h` for a batch of scene encodings, `[n, hidden]`.
    fn mapped(&self, tape: &mut Tape<T>, bound: &Bound, encodings: &[&[f64]]) -> Result<Var, ModelError> {
        let n_obj = self.dims.n_obj;
        let mut flat = Vec::with_capacity(encodings.len() * n_obj);
        for enc in encodings {
            if enc.len() != n_obj {
                return Err(ModelError::Encoding { expected: n_obj, got: enc.len() });
            }
            flat.extend(enc.iter().map(|&x| T::of(x)));
        }
        let x = tape.constant(Tensor::matrix(encodings.len(), n_obj, flat)?)?;
        let proj = self.var(bound, "enc.proj")?;
        let bias = self.var(bound, "enc.bias")?;
        let e = tape.matmul_t(x, proj)?;
        let e = tape.add_bias(e, bias)?;
        let e = tape.tanh(e)?;
        let w = self.weight(tape, bound, "map.w")?;
        let b = self.var(bound, "map.b")?;
        let h = tape.matmul_t(e, w)?;
        let h = tape.add_bias(h, b)?;
        Ok(tape.tanh(h)?)
    }

    /// Logits for the rows described by `plan`, `[rows, V]`.
    fn logits(&self, tape: &mut Tape<T>, bound: &Bound, encodings: &[&[f64]], plan: &RowPlan<T>) -> Result<Var, ModelError> {
        let h = self.mapped(tape, bound, encodings)?;
        let tok_table = self.var(bound, "dec.tok")?;
        let ctx_table = self.var(bound, "dec.ctx")?;
        let tok = tape.gather(tok_table, &plan.cur_tokens)?;
        let avg = tape.constant(plan.bag.clone())?;
        let bag = tape.matmul(avg, ctx_table)?;
        let hr = tape.gather(h, &plan.scene_rows)?;
        let z = tape.concat(&[tok, bag, hr], 1)?;
        let w1 = self.weight(tape, bound, "dec.w1")?;
        let b1 = self.var(bound, "dec.b1")?;
        let a = tape.matmul_t(z, w1)?;
        let a = tape.add_bias(a, b1)?;
        let a = tape.tanh(a)?;
        let w2 = self.var(bound, "dec.w2")?;
        let ws = self.var(bound, "dec.ws")?;
        let b2 = self.var(bound, "dec.b2")?;
        let out = tape.matmul_t(a, w2)?;
        let direct = tape.matmul_t(hr, ws)?;
        let out = tape.add(out, direct)?;
        Ok(tape.add_bias(out, b2)?)
    }

    /// `rows` lists `(item, position, target)`; the row reads the prefix
    /// `tokens[..=position]` of its item. The bag row holds the prefix's token
    /// frequencies, so `bag · ctx` is the mean context embedding.
    fn plan(&self, seqs: &[&[Token]], rows: &[(usize, usize, Option<Token>, f64)]) -> Result<RowPlan<T>, ModelError> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let v = self.vocab.size();
        let n_rows = rows.len();
        let mut bag = vec![T::zero(); n_rows * v];
        let mut scene_rows = Vec::with_capacity(n_rows);
        let mut cur_tokens = Vec::with_capacity(n_rows);
        let mut targets = Vec::with_capacity(n_rows);
        let mut weights = Vec::with_capacity(n_rows);
        for (r, &(item, pos, target, w)) in rows.iter().enumerate() {
            let inv = T::one() / T::of_usize(pos + 1);
            for t in &seqs[item][..=pos] {
                bag[r * v + t.index()] = bag[r * v + t.index()] + inv;
            }
            scene_rows.push(item);
            cur_tokens.push(seqs[item][pos].index());
            targets.push(target.map_or(0, Token::index));
            weights.push(T::of(w));
        }
        Ok(RowPlan { scene_rows, cur_tokens, bag: Tensor::matrix(n_rows, v, bag)?, targets, weights })
    }

    fn loss_rows(items: &[SeqItem<'_>]) -> Result<Vec<(usize, usize, Option<Token>, f64)>, ModelError> {
        let mut rows = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let n_target = item.tokens.len().saturating_sub(item.n_context);
            if item.n_context == 0 || n_target == 0 {
                return Err(ModelError::EmptySequence);
            }
            let w = item.weight / n_target as f64;
            for pos in item.n_context - 1..item.tokens.len() - 1 {
                rows.push((i, pos, Some(item.tokens[pos + 1]), w));
            }
        }
        Ok(rows)
    }

    /// `Σ_items weight · mean_target_tokens(−log p)`, plus its gradient with
    /// respect to `set` when `want_grad`. Trainable values come from `theta`
    /// when given, otherwise from the model.
    pub fn loss_and_grad(
        &self,
        items: &[SeqItem<'_>],
        set: &TrainableSet,
        theta: Option<&ParamVector<T>>,
        want_grad: bool,
    ) -> Result<(T, Option<ParamVector<T>>), ModelError> {
        if items.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let rows = Self::loss_rows(items)?;
        let seqs: Vec<&[Token]> = items.iter().map(|i| i.tokens.as_slice()).collect();
        let plan = self.plan(&seqs, &rows)?;
        let encodings: Vec<&[f64]> = items.iter().map(|i| i.encoding).collect();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, set, theta)?;
        let logits = self.logits(&mut tape, &bound, &encodings, &plan)?;
        let logp = tape.log_softmax(logits)?;
        let loss = tape.weighted_nll(logp, &plan.targets, &plan.weights)?;
        let value = tape.item(loss);
        if !want_grad {
            return Ok((value, None));
        }
        tape.backward(loss)?;
        let grad: Vec<T> = bound.trainable.iter().flat_map(|&v| tape.grad(v).into_data()).collect();
        Ok((value, Some(ParamVector::new(grad))))
    }

    /// Per-token negative log-likelihoods of each target token, item by item.
    pub fn token_nlls(&self, items: &[SeqItem<'_>]) -> Result<Vec<Vec<T>>, ModelError> {
        let rows = Self::loss_rows(items)?;
        let seqs: Vec<&[Token]> = items.iter().map(|i| i.tokens.as_slice()).collect();
        let plan = self.plan(&seqs, &rows)?;
        let encodings: Vec<&[f64]> = items.iter().map(|i| i.encoding).collect();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &TrainableSet::new(&[]), None)?;
        let logits = self.logits(&mut tape, &bound, &encodings, &plan)?;
        let logp = tape.log_softmax(logits)?;
        let v = self.vocab.size();
        let lp = tape.value(logp).data();
        let mut out = vec![Vec::new(); items.len()];
        for (r, &(item, _, target, _)) in rows.iter().enumerate() {
            out[item].push(-lp[r * v + target.unwrap().index()]);
        }
        Ok(out)
    }

    /// Next-token logits after each prefix, `[n, V]` flattened row-major.
    pub fn next_token_logits_batch(&self, encodings: &[&[f64]], prefixes: &[&[Token]]) -> Result<Vec<Vec<T>>, ModelError> {
        if prefixes.iter().any(|p| p.is_empty()) {
            return Err(ModelError::EmptySequence);
        }
        let rows: Vec<_> = prefixes.iter().enumerate().map(|(i, p)| (i, p.len() - 1, None, 0.0)).collect();
        let plan = self.plan(prefixes, &rows)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &TrainableSet::new(&[]), None)?;
        let logits = self.logits(&mut tape, &bound, encodings, &plan)?;
        let v = self.vocab.size();
        Ok(tape.value(logits).data().chunks(v).map(<[T]>::to_vec).collect())
    }

    pub fn forward_next_token(&self, encoding: &[f64], prefix: &[Token]) -> Result<Vec<T>, ModelError> {
        Ok(self.next_token_logits_batch(&[encoding], &[prefix])?.remove(0))
    }

    /// Mean per-token NLL of `caption` given `prompt`: the fine-tuning loss
    /// `L_ft`. The caption must end with EOS.
    pub fn sequence_nll(&self, encoding: &[f64], prompt: &[Token], caption: &[Token]) -> Result<T, ModelError> {
        if caption.is_empty() || prompt.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if caption.last() != Some(&self.vocab.eos()) {
            return Err(ModelError::MissingEos);
        }
        let item = SeqItem { encoding, tokens: [prompt, caption].concat(), n_context: prompt.len(), weight: 1.0 };
        Ok(self.loss_and_grad(&[item], &TrainableSet::new(&[]), None, false)?.0)
    }
}
