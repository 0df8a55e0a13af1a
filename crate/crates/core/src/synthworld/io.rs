use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{CaptionSample, Corpus, Scene, Span, WorldError};
use crate::toymodel::{Token, Vocab};

pub const CORPUS_SCHEMA: &str = "sare-corpus/1";

/// One line of a corpus file: a scene and its caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub schema: String,
    pub scene_id: usize,
    pub objects: Vec<Token>,
    pub encoding: Vec<f64>,
    pub prompt: Vec<Token>,
    pub caption: Vec<Token>,
    pub spans: Vec<Span>,
    pub sentence_score: f64,
    pub injected: Vec<Token>,
    /// Hash of the configuration that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CorpusRecord {
    fn new(scene: &Scene, sample: &CaptionSample, config_hash: Option<&str>) -> Self {
        Self {
            schema: CORPUS_SCHEMA.to_string(),
            scene_id: scene.id,
            objects: scene.objects.iter().copied().collect(),
            encoding: scene.encoding.clone(),
            prompt: sample.prompt.clone(),
            caption: sample.caption.clone(),
            spans: sample.spans.clone(),
            sentence_score: sample.sentence_score,
            injected: sample.injected.clone(),
            config_hash: config_hash.map(str::to_string),
        }
    }
}

pub fn write_corpus_jsonl(corpus: &Corpus, config_hash: Option<&str>, mut w: impl Write) -> Result<(), WorldError> {
    for (scene, sample) in corpus.scenes.iter().zip(&corpus.samples) {
        let line = serde_json::to_string(&CorpusRecord::new(scene, sample, config_hash)).map_err(|e| WorldError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| WorldError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_corpus_jsonl(vocab: Vocab, r: impl BufRead) -> Result<Corpus, WorldError> {
    let mut scenes = Vec::new();
    let mut samples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| WorldError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| WorldError::Io(format!("line {}: {e}", i + 1)))?;
        if rec.schema != CORPUS_SCHEMA {
            return Err(WorldError::Io(format!("line {}: unsupported schema {}", i + 1, rec.schema)));
        }
        if rec.scene_id != scenes.len() {
            return Err(WorldError::Io(format!("line {}: scene ids must be dense and ordered", i + 1)));
        }
        if rec.encoding.len() != vocab.n_objects() {
            return Err(WorldError::Io(format!("line {}: encoding width mismatch", i + 1)));
        }
        scenes.push(Scene { id: rec.scene_id, objects: rec.objects.into_iter().collect::<BTreeSet<_>>(), encoding: rec.encoding });
        samples.push(CaptionSample {
            scene_id: rec.scene_id,
            prompt: rec.prompt,
            caption: rec.caption,
            spans: rec.spans,
            sentence_score: rec.sentence_score,
            injected: rec.injected,
        });
    }
    Ok(Corpus { vocab, scenes, samples })
}
