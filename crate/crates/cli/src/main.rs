use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use sare_cli::{report, stages, sweep, CliError, ExperimentConfig};
use sare_core::attacks::AttackKind;
use sare_core::tsam::Method;

#[derive(Parser)]
#[command(name = "sare", about = "Sharpness-aware robust unlearning lab on a synthetic captioner", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, env = "SARE_OUT", default_value = "runs", global = true)]
    out: PathBuf,
    /// Override a config key, e.g. `--set unlearn.weights.rho=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Run name (`name`).
    #[arg(long, global = true)]
    name: Option<String>,
    /// Restrict to one seed instead of every seed in `seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `unlearn.weights.rho`
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// `unlearn.weights.lambda1`
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    /// `unlearn.weights.lambda2`
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// `unlearn.epochs`
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// `eval.eval_set_id`
    #[arg(long, global = true)]
    eval_set_id: Option<String>,
    /// Recompute and overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and the held-out set, and curate the unlearning sets.
    Curate,
    /// Train the reference scorer and the hallucination-prone captioner.
    Biastrain,
    /// Unlearn from the bias-trained checkpoint.
    Unlearn {
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Attack unlearned (or bias-trained) models and evaluate them.
    Attack {
        #[arg(long, value_parser = parse_kind)]
        kind: AttackKind,
        /// `biased` or a method name; every configured method when omitted.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate the bias-trained and unlearned models, with sharpness probes.
    Eval,
    /// Every stage for every seed.
    Run,
    /// SARE over the `sweep` grid for every seed.
    Sweep,
    /// Consolidate run directories into tables and plot data.
    Report {
        /// Run directories (`<out>/<name>`); the configured run when omitted.
        runs: Vec<PathBuf>,
        /// Destination; `<out>/<name>/report` when omitted.
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Combine inputs written under different configs.
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Print the resolved config and its hash.
    Config,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    s.parse()
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Config(format!("bad key {key:?}")))?;
    let mut node = root;
    for p in parts {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(p))
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
    }
    let table = node.as_table_mut().ok_or_else(|| CliError::Config(format!("{key:?} is not inside a table")))?;
    if !table.contains_key(last) {
        return Err(CliError::Config(format!("unknown config key {key:?}")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn resolve_config(g: &Global) -> Result<ExperimentConfig, CliError> {
    let base = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut tree = toml::Value::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
    let mut sets: Vec<(String, toml::Value)> = Vec::new();
    if let Some(v) = &g.name {
        sets.push(("name".into(), toml::Value::String(v.clone())));
    }
    for (key, v) in [("unlearn.weights.rho", g.rho), ("unlearn.weights.lambda1", g.lambda1), ("unlearn.weights.lambda2", g.lambda2)] {
        if let Some(v) = v {
            sets.push((key.into(), toml::Value::Float(v)));
        }
    }
    if let Some(v) = g.epochs {
        sets.push(("unlearn.epochs".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(v) = &g.eval_set_id {
        sets.push(("eval.eval_set_id".into(), toml::Value::String(v.clone())));
    }
    for s in &g.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        sets.push((k.trim().to_string(), parse_value(v.trim())));
    }
    for (k, v) in sets {
        set_path(&mut tree, &k, v)?;
    }
    let text = toml::to_string(&tree).map_err(|e| CliError::Config(e.to_string()))?;
    ExperimentConfig::from_toml(&text)
}

fn seeds(cfg: &ExperimentConfig, g: &Global) -> Vec<u64> {
    match g.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let cfg = resolve_config(g)?;
    let out = &g.out;
    match &cli.command {
        Command::Curate => {
            for s in seeds(&cfg, g) {
                stages::curate(&cfg, out, s, g.force)?;
            }
        }
        Command::Biastrain => {
            for s in seeds(&cfg, g) {
                stages::biastrain(&cfg, out, s, g.force)?;
            }
        }
        Command::Unlearn { method } => {
            for s in seeds(&cfg, g) {
                stages::unlearn(&cfg, out, s, *method, g.force)?;
            }
        }
        Command::Attack { kind, method } => {
            let models: Vec<String> = match method {
                Some(m) => vec![m.clone()],
                None => cfg.unlearn.methods.iter().map(|m| m.name().to_string()).collect(),
            };
            for s in seeds(&cfg, g) {
                for m in &models {
                    stages::attack(&cfg, out, s, *kind, m, g.force)?;
                }
            }
        }
        Command::Eval => {
            for s in seeds(&cfg, g) {
                stages::eval(&cfg, out, s, g.force)?;
            }
        }
        Command::Run => {
            for s in seeds(&cfg, g) {
                stages::run_all(&cfg, out, s, g.force)?;
            }
        }
        Command::Sweep => {
            let path = sweep::sweep(&cfg, out, &seeds(&cfg, g), g.force)?;
            println!("{}", path.display());
        }
        Command::Report { runs, dest, allow_mixed } => {
            let runs = if runs.is_empty() { vec![out.join(&cfg.name)] } else { runs.clone() };
            let dest = dest.clone().unwrap_or_else(|| out.join(&cfg.name).join("report"));
            let r = report::report(&runs, &dest, *allow_mixed)?;
            for f in &r.files {
                println!("{}", dest.join(f).display());
            }
        }
        Command::Config => {
            println!("# config_hash {}", cfg.hash());
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
