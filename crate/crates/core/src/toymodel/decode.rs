use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionModel, ModelError, Token};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

/// One caption to generate. Sampling draws from a generator seeded with
/// `seed`, so each request is reproducible regardless of batch composition.
#[derive(Clone, Debug)]
pub struct DecodeRequest<'a> {
    pub encoding: &'a [f64],
    pub prompt: Vec<Token>,
    pub seed: u64,
}

fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_index<T: Scalar>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|x| x.to_f64_lossy() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left `u` past the last bucket
    argmax(logits)
}

impl<T: Scalar> CaptionModel<T> {
    /// Autoregressively extend every request's prompt until EOS or `max_len`
    /// generated tokens. Returns the generated tokens only.
    pub fn generate(&self, requests: &[DecodeRequest<'_>], mode: DecodeMode, max_len: usize) -> Result<Vec<Vec<Token>>, ModelError> {
        let context = self.dims().context;
        for r in requests {
            if r.prompt.is_empty() {
                return Err(ModelError::EmptySequence);
            }
            if r.prompt.len() + max_len > context + 1 {
                return Err(ModelError::PrefixOverflow { len: r.prompt.len() + max_len - 1, max: context });
            }
        }
        if let DecodeMode::Sample { temperature } = mode {
            if !(temperature > 0.0) {
                return Err(ModelError::Decode(format!("temperature must be positive, got {temperature}")));
            }
        }
        let eos = self.vocab().eos();
        let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
        let mut seqs: Vec<Vec<Token>> = requests.iter().map(|r| r.prompt.clone()).collect();
        let mut outputs: Vec<Vec<Token>> = vec![Vec::new(); requests.len()];
        let mut active: Vec<usize> = (0..requests.len()).collect();
        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            let encodings: Vec<&[f64]> = active.iter().map(|&i| requests[i].encoding).collect();
            let prefixes: Vec<&[Token]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let logits = self.next_token_logits_batch(&encodings, &prefixes)?;
            let mut still = Vec::with_capacity(active.len());
            for (&i, row) in active.iter().zip(&logits) {
                let next = match mode {
                    DecodeMode::Greedy => argmax(row),
                    DecodeMode::Sample { temperature } => sample_index(row, temperature, &mut rngs[i]),
                };
                let tok = Token(next as u32);
                seqs[i].push(tok);
                outputs[i].push(tok);
                if tok != eos {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outputs)
    }

    pub fn decode_greedy(&self, encoding: &[f64], prompt: &[Token], max_len: usize) -> Result<Vec<Token>, ModelError> {
        let req = DecodeRequest { encoding, prompt: prompt.to_vec(), seed: 0 };
        Ok(self.generate(&[req], DecodeMode::Greedy, max_len)?.remove(0))
    }

    pub fn decode_sample(
        &self,
        encoding: &[f64],
        prompt: &[Token],
        temperature: f64,
        seed: u64,
        max_len: usize,
    ) -> Result<Vec<Token>, ModelError> {
        let req = DecodeRequest { encoding, prompt: prompt.to_vec(), seed };
        Ok(self.generate(&[req], DecodeMode::Sample { temperature }, max_len)?.remove(0))
    }

    /// Existence-question prompt `<bos> <sep> object`.
    pub fn probe_prompt(&self, object: Token) -> Vec<Token> {
        let v = self.vocab();
        vec![v.bos(), v.sep(), object]
    }

    /// `logit(yes) − logit(no)` after the existence question for each
    /// `(scene, object)` pair; positive means the model answers yes.
    pub fn existence_margins(&self, queries: &[(&[f64], Token)]) -> Result<Vec<T>, ModelError> {
        let prompts: Vec<Vec<Token>> = queries.iter().map(|&(_, o)| self.probe_prompt(o)).collect();
        let encodings: Vec<&[f64]> = queries.iter().map(|&(e, _)| e).collect();
        let prefixes: Vec<&[Token]> = prompts.iter().map(Vec::as_slice).collect();
        let (yes, no) = (self.vocab().yes().index(), self.vocab().no().index());
        Ok(self
            .next_token_logits_batch(&encodings, &prefixes)?
            .into_iter()
            .map(|row| row[yes] - row[no])
            .collect())
    }
}
