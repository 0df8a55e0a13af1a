#![allow(dead_code)]

use std::fs;
use std::path::Path;

use sare_cli::ExperimentConfig;

/// Small enough that the whole pipeline runs in about a second.
pub const TINY: &str = r#"
name = "tiny"
seeds = [0, 1]

[world]
n_scenes = 300

[biastrain]
epochs = 2
reference_epochs = 1

[attack]
relearn_fractions = [0.1, 0.2]
relearn_epochs = 1
lora_steps = 10
lora_samples = 100

[eval]
n_scenes = 60

[eval.spec]
pope_questions = 60
samples_per_scene = 1

[probe]
rhos = [0.05, 0.1]
n_dirs = 4
n_units = 16

[sweep]
rho = [0.0, 0.05]
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

pub fn write_tiny(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}
