//! Run directories, the manifest, and hash-stamped artifact files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sare_core::synthworld::{read_corpus_jsonl, write_corpus_jsonl, Corpus};
use sare_core::toymodel::Vocab;
use sare_core::CaptionModel;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const ARTIFACT_VERSION: &str = "sare-artifacts/1";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

pub const CORPUS: &str = "corpus.jsonl";
pub const EVAL_CORPUS: &str = "eval_corpus.jsonl";
pub const CURATED: &str = "curated.json";
pub const REFERENCE_CKPT: &str = "reference.ckpt";
pub const BIASED_CKPT: &str = "biased.ckpt";
pub const EVAL_JSONL: &str = "eval.jsonl";
pub const EVAL_CSV: &str = "eval.csv";
pub const SHARPNESS_CSV: &str = "sharpness.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

pub fn unlearned_ckpt(method: &str) -> String {
    format!("unlearned-{method}.ckpt")
}

pub fn runlog(method: &str) -> String {
    format!("runlog-{method}.jsonl")
}

pub fn attack_csv(kind: &str, method: &str) -> String {
    format!("attack-{kind}-{method}.csv")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub files: Vec<String>,
    pub completed_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub artifact_version: String,
    pub name: String,
    pub seed: u64,
    pub created_at: u64,
    pub stages: BTreeMap<String, StageEntry>,
}

/// Whether a stage has to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageState {
    Run,
    UpToDate,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Write through a sibling temp file so readers never see a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Output directory of one (config, seed) pipeline.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub name: String,
    pub seed: u64,
    pub hash: String,
}

impl RunDir {
    pub fn new(out: &Path, cfg: &ExperimentConfig, seed: u64) -> Self {
        Self { root: out.join(&cfg.name).join(format!("seed-{seed}")), name: cfg.name.clone(), seed, hash: cfg.hash() }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn manifest(&self) -> Result<Option<Manifest>, CliError> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
    }

    fn write_manifest(&self, m: &Manifest) -> Result<(), CliError> {
        write_atomic(&self.path(MANIFEST), &serde_json::to_vec_pretty(m)?)
    }

    fn fresh_manifest(&self) -> Manifest {
        Manifest {
            config_hash: self.hash.clone(),
            artifact_version: ARTIFACT_VERSION.into(),
            name: self.name.clone(),
            seed: self.seed,
            created_at: now(),
            stages: BTreeMap::new(),
        }
    }

    /// Decide whether `stage` must run. A directory written under another
    /// config is only reused with `force`, which discards its manifest.
    pub fn begin(&self, cfg: &ExperimentConfig, stage: &str, force: bool) -> Result<StageState, CliError> {
        fs::create_dir_all(&self.root)?;
        match self.manifest()? {
            Some(m) if m.config_hash != self.hash => {
                if !force {
                    return Err(CliError::Exists(format!("{} (config {})", self.root.display(), m.config_hash)));
                }
                self.write_manifest(&self.fresh_manifest())?;
            }
            Some(m) => {
                if let Some(entry) = m.stages.get(stage) {
                    if !force && entry.files.iter().all(|f| self.path(f).exists()) {
                        return Ok(StageState::UpToDate);
                    }
                }
            }
            None => self.write_manifest(&self.fresh_manifest())?,
        }
        write_atomic(&self.path(CONFIG_COPY), cfg.to_toml().as_bytes())?;
        Ok(StageState::Run)
    }

    pub fn finish(&self, stage: &str, files: &[String]) -> Result<(), CliError> {
        let mut m = self.manifest()?.unwrap_or_else(|| self.fresh_manifest());
        m.stages.insert(stage.to_string(), StageEntry { files: files.to_vec(), completed_at: now() });
        self.write_manifest(&m)
    }

    /// Path of an upstream artifact, which must exist.
    pub fn require(&self, file: &str) -> Result<PathBuf, CliError> {
        let p = self.path(file);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact(p.display().to_string()))
        }
    }

    fn check_hash(&self, path: &Path, found: Option<&str>) -> Result<(), CliError> {
        match found {
            Some(h) if h == self.hash => Ok(()),
            other => Err(CliError::HashMismatch {
                path: path.display().to_string(),
                expected: self.hash.clone(),
                found: other.unwrap_or("none").to_string(),
            }),
        }
    }

    pub fn write_checkpoint(&self, file: &str, model: &CaptionModel, stage: &str) -> Result<(), CliError> {
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_string(), self.hash.clone());
        meta.insert("stage".to_string(), stage.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        write_atomic(&self.path(file), &model.to_checkpoint_bytes(&meta)?)
    }

    pub fn read_checkpoint(&self, file: &str) -> Result<CaptionModel, CliError> {
        let p = self.require(file)?;
        let (model, meta) = CaptionModel::read_checkpoint(BufReader::new(fs::File::open(&p)?))?;
        self.check_hash(&p, meta.get("config_hash").map(String::as_str))?;
        Ok(model)
    }

    pub fn write_corpus(&self, file: &str, corpus: &Corpus) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write_corpus_jsonl(corpus, Some(&self.hash), &mut buf)?;
        write_atomic(&self.path(file), &buf)
    }

    pub fn read_corpus(&self, file: &str, vocab: Vocab) -> Result<Corpus, CliError> {
        let p = self.require(file)?;
        let mut first = String::new();
        BufReader::new(fs::File::open(&p)?).read_line(&mut first)?;
        let hash: Option<String> = serde_json::from_str::<serde_json::Value>(&first)
            .ok()
            .and_then(|v| v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string));
        self.check_hash(&p, hash.as_deref())?;
        Ok(read_corpus_jsonl(vocab, BufReader::new(fs::File::open(&p)?))?)
    }

    /// JSON document wrapped with the config hash.
    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<(), CliError> {
        let doc = Stamped { config_hash: self.hash.clone(), data: value };
        write_atomic(&self.path(file), &serde_json::to_vec(&doc)?)
    }

    pub fn read_json<T: DeserializeOwned>(&self, file: &str) -> Result<T, CliError> {
        let p = self.require(file)?;
        let doc: Stamped<T> = serde_json::from_slice(&fs::read(&p)?)?;
        self.check_hash(&p, Some(&doc.config_hash))?;
        Ok(doc.data)
    }

    /// One JSON object per line, each carrying the config hash.
    pub fn write_jsonl<T: Serialize>(&self, file: &str, rows: &[T]) -> Result<(), CliError> {
        let mut buf = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut buf, &Stamped { config_hash: self.hash.clone(), data: row })?;
            buf.push(b'\n');
        }
        write_atomic(&self.path(file), &buf)
    }

    pub fn write_csv<T: Serialize>(&self, file: &str, rows: &[T]) -> Result<(), CliError> {
        write_atomic(&self.path(file), &csv_bytes(rows)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    config_hash: String,
    #[serde(flatten)]
    data: T,
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<T>, _> = r.deserialize().collect();
    Ok(rows?)
}

/// One metric value in long format; every table the driver emits uses it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub config_hash: String,
    pub eval_set_id: String,
    pub seed: u64,
    /// `biased` or an unlearning method name.
    pub model: String,
    /// `none` or an attack name.
    pub attack: String,
    /// Position on the attack grid; 0 is the unattacked point.
    pub step: usize,
    /// Relearning sample count, adapter steps, or 0.
    pub n: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessRow {
    pub run: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub rho: f64,
    pub n_dirs: usize,
    pub base_loss: f64,
    pub mean_increase: f64,
    pub max_increase: f64,
    pub worst_case_increase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub config_hash: String,
    pub eval_set_id: String,
    pub seed: u64,
    pub rho: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub status: String,
    pub error: String,
    pub chair_s: f64,
    pub chair_i: f64,
    pub pope_f1_mean: f64,
    pub ppl: f64,
    pub bleu4: f64,
    pub recall: f64,
}
