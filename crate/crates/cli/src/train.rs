//! `train` and `ablate`.

use std::path::{Path, PathBuf};

use anyhow::Result;
use points2pix::dataio::SampleCache;
use points2pix::seed::SeedStreams;
use points2pix::training::{
    prepare_dataset, run_ablation, run_experiment, ExperimentOptions, PreparedSample, RunFailure,
    TrainConfig,
};

use crate::config::{resolve, Resolved, TrainFlags};
use crate::data::cache_layer;
use crate::exit::{invalid, Partial};
use crate::manifest::{RunManifest, RunStatus};

struct Loaded {
    resolved: Resolved,
    train: Vec<PreparedSample<f32>>,
    eval: Vec<PreparedSample<f32>>,
}

/// Resolve and validate the configuration, then load and prepare both splits.
fn load(cache_dir: &Path, flags: &TrainFlags) -> Result<Loaded> {
    let cache = SampleCache::new(cache_dir);
    let index = cache.read_index()?;
    let resolved = resolve(flags, &cache_layer(cache_dir)?)?;
    for o in &resolved.overrides {
        log::warn!("override {o}");
    }
    if index.train.is_empty() {
        return Err(invalid(format!("{} has an empty training split", cache_dir.display())));
    }
    let cfg = &resolved.config;
    let streams = SeedStreams::new(cfg.seed);
    let train = prepare_dataset(&cache.read_split(&index.train)?, &cfg.data, &streams)?;
    let eval = prepare_dataset(&cache.read_split(&index.eval)?, &cfg.data, &streams)?;
    Ok(Loaded { resolved, train, eval })
}

fn manifest(command: &str, cfg: &TrainConfig, resolved: &Resolved, inputs: Vec<PathBuf>) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, serde_json::to_value(cfg)?, Some(cfg.seed));
    m.overrides = resolved.overrides.clone();
    m.inputs = inputs;
    Ok(m)
}

fn inputs(cache_dir: &Path, flags: &TrainFlags) -> Vec<PathBuf> {
    let mut v = vec![cache_dir.to_path_buf()];
    v.extend(flags.config.clone());
    v
}

pub fn train(cache_dir: &Path, out: &Path, flags: &TrainFlags, resume: Option<PathBuf>, log_wallclock: bool) -> Result<()> {
    let l = load(cache_dir, flags)?;
    let cfg = &l.resolved.config;
    let mut ins = inputs(cache_dir, flags);
    ins.extend(resume.clone());
    let mut m = manifest("train", cfg, &l.resolved, ins)?;
    m.outputs = vec![out.to_path_buf()];
    let opts = ExperimentOptions { resume, log_wallclock };
    match run_experiment(cfg, &l.train, &l.eval, out, &opts) {
        Ok(res) => {
            println!("{}", serde_json::to_string_pretty(&res.metrics)?);
            m.finish(out)?;
            Ok(())
        }
        Err(f) => failure(f, m, out),
    }
}

/// Keep what a failed run left behind: partial results exit with 3 and
/// still get a manifest; a run that wrote nothing reports its cause.
fn failure(f: RunFailure, mut m: RunManifest, out: &Path) -> Result<()> {
    if f.steps_completed == 0 && f.files_written.is_empty() {
        return Err(f.source.into());
    }
    m.status = RunStatus::Partial;
    let mut files = f.files_written;
    files.push(m.finish(out)?);
    Err(Partial {
        reason: format!("training stopped after {} step(s): {}", f.steps_completed, f.source),
        files,
    }
    .into())
}

pub fn ablate(cache_dir: &Path, out: &Path, flags: &TrainFlags) -> Result<()> {
    if flags.variant.is_some() {
        return Err(invalid("ablate trains every variant; drop --variant"));
    }
    let l = load(cache_dir, flags)?;
    let cfg = &l.resolved.config;
    let mut m = manifest("ablate", cfg, &l.resolved, inputs(cache_dir, flags))?;
    m.outputs = vec![out.to_path_buf()];
    match run_ablation(cfg, &l.train, &l.eval, out) {
        Ok(table) => {
            print!("{}", table.to_markdown());
            m.finish(out)?;
            Ok(())
        }
        Err(f) => failure(f, m, out),
    }
}
