use std::path::Path;

use actassign::synthbench::{generate_dataset, run_method, Schedule, SyntheticConfig};
use actassign::Error;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::output::{pretty_json, read_text, write_output};
use crate::{SynthArgs, TrainArgs};

/// Configuration file shared by `synth` and `train`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub schedule: Schedule,
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = read_text(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

pub fn run_synth(args: &SynthArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    let dataset = generate_dataset(&cfg.data)?;
    log::info!(
        "generated {} train and {} val frames",
        dataset.train.frames.len(),
        dataset.val.frames.len()
    );
    write_output(args.output.as_ref(), pretty_json(&dataset).as_bytes())
}

pub fn run_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    if let Some(alpha) = args.alpha {
        cfg.schedule.alpha = alpha;
    }
    if let Some(epochs) = args.epochs {
        cfg.schedule.epochs = epochs;
        cfg.schedule.warmup_epochs = cfg.schedule.warmup_epochs.min(epochs);
    }
    if let Some(cap) = args.powerset_cap {
        cfg.schedule.powerset_cap = cap;
    }
    if let Some(cap) = args.solver_cap {
        cfg.schedule.solver_cap = cap;
    }
    let trace = run_method(&cfg.data, &cfg.schedule, args.method)?;
    log::info!(
        "{} seed {}: final val mAP {:.4}",
        args.method.name(),
        cfg.data.seed,
        trace.final_map()
    );
    write_output(args.output.as_ref(), pretty_json(&trace).as_bytes())
}
