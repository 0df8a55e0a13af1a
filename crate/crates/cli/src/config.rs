//! Experiment configuration: one TOML tree holding every stage's settings.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sare_core::attacks::AttackConfig;
use sare_core::metrics::EvalSpec;
use sare_core::synthworld::{Thresholds, WorldConfig};
use sare_core::toymodel::ModelDims;
use sare_core::tsam::{AdamWConfig, Method, DEFAULT_DELTA_GRAD};
use sare_core::LossWeights;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasTrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs for the clean reference language model that scores perplexity.
    pub reference_epochs: usize,
}

impl Default for BiasTrainConfig {
    fn default() -> Self {
        Self { optimizer: AdamWConfig::with_lr(3e-3), epochs: 6, batch_size: 32, reference_epochs: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSettings {
    pub methods: Vec<Method>,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub divergence_factor: f64,
    pub delta_grad: f64,
}

impl Default for UnlearnSettings {
    fn default() -> Self {
        Self {
            methods: vec![Method::Sare, Method::Baseline],
            weights: LossWeights::default(),
            optimizer: AdamWConfig::with_lr(3e-3),
            epochs: 1,
            batch_size: 4,
            divergence_factor: 10.0,
            delta_grad: DEFAULT_DELTA_GRAD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub eval_set_id: String,
    pub n_scenes: usize,
    pub spec: EvalSpec,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { eval_set_id: "heldout-v1".into(), n_scenes: 1000, spec: EvalSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    /// Radii of the sharpness probe; the first is the headline radius.
    pub rhos: Vec<f64>,
    pub n_dirs: usize,
    /// Negative units probed, taken in curation order.
    pub n_units: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { rhos: vec![0.05, 0.01, 0.1, 0.2], n_dirs: 32, n_units: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub rho: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { rho: vec![0.01, 0.05, 0.10, 0.15], lambda1: vec![0.3], lambda2: vec![0.2] }
    }
}

impl SweepGrid {
    /// Every `(rho, lambda1, lambda2)` cell, rho varying slowest.
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &r in &self.rho {
            for &l1 in &self.lambda1 {
                for &l2 in &self.lambda2 {
                    out.push((r, l1, l2));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// `world.seed` is an offset added to each run seed.
    pub world: WorldConfig,
    pub thresholds: Thresholds,
    pub model: ModelDims,
    pub biastrain: BiasTrainConfig,
    pub unlearn: UnlearnSettings,
    pub attack: AttackConfig,
    pub eval: EvalSettings,
    pub probe: ProbeSettings,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seeds: vec![0, 1, 2],
            world: WorldConfig::default(),
            thresholds: Thresholds::default(),
            model: ModelDims::default(),
            biastrain: BiasTrainConfig::default(),
            unlearn: UnlearnSettings::default(),
            attack: AttackConfig::default(),
            eval: EvalSettings::default(),
            probe: ProbeSettings::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("run name {:?} must be a nonempty path component", self.name));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        self.world.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.n_obj != self.world.n_obj {
            return bad(format!("model.n_obj={} but world.n_obj={}", self.model.n_obj, self.world.n_obj));
        }
        self.unlearn.weights.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.unlearn.methods.is_empty() {
            return bad("unlearn.methods must be nonempty".into());
        }
        if self.unlearn.epochs == 0 || self.unlearn.batch_size == 0 {
            return bad("unlearn.epochs and unlearn.batch_size must be positive".into());
        }
        if self.biastrain.batch_size == 0 {
            return bad("biastrain.batch_size must be positive".into());
        }
        self.attack.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.n_scenes == 0 || self.eval.eval_set_id.is_empty() {
            return bad("eval.n_scenes and eval.eval_set_id must be set".into());
        }
        if self.probe.rhos.is_empty() || self.probe.n_dirs == 0 || self.probe.n_units == 0 {
            return bad("probe.rhos, probe.n_dirs and probe.n_units must be nonempty".into());
        }
        if self.probe.rhos.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return bad(format!("probe radii must be nonnegative: {:?}", self.probe.rhos));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[unlearn.weights]\nrhoo = 0.1\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("name = \"x\"\n[unlearn.weights]\nrho = 0.1\n").unwrap();
        assert_eq!(cfg.name, "x");
        assert_eq!(cfg.unlearn.weights.rho, 0.1);
        assert_eq!(cfg.unlearn.weights.lambda1, 0.3);
        assert_eq!(cfg.world, WorldConfig::default());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.unlearn.weights.rho = 0.1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.eval.eval_set_id = "other".into();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn validation() {
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(CliError::Config(_))));
        };
        bad(|c| c.name = "a/b".into());
        bad(|c| c.name.clear());
        bad(|c| c.seeds.clear());
        bad(|c| c.model.n_obj = 10);
        bad(|c| c.unlearn.methods.clear());
        bad(|c| c.unlearn.batch_size = 0);
        bad(|c| c.probe.rhos = vec![-0.1]);
        bad(|c| c.eval.eval_set_id.clear());
        bad(|c| c.attack.relearn_fractions = vec![0.2, 0.1]);
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn sweep_cells_vary_rho_slowest() {
        let g = SweepGrid { rho: vec![0.1, 0.2], lambda1: vec![0.3, 0.4], lambda2: vec![0.2] };
        assert_eq!(g.cells(), vec![(0.1, 0.3, 0.2), (0.1, 0.4, 0.2), (0.2, 0.3, 0.2), (0.2, 0.4, 0.2)]);
    }
}
