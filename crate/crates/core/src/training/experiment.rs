use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Batch, PreparedSample, Progress, TrainConfig, TrainLogRecord, TrainState};
use crate::error::{param_err, Error, Result};
use crate::generator::Variant;
use crate::raster::Image;
use crate::seed::{SeedStreams, DATA_ORDER, DROPOUT};
use crate::tensor::{Checkpoint, Real};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.p2p";
pub const METRICS_FILE: &str = "metrics.json";

/// Sample order for one epoch.
pub fn epoch_order(streams: &SeedStreams, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut streams.rng(DATA_ORDER, epoch as u64));
    order
}

/// Dropout seed used when generating `id` outside of training.
pub fn inference_seed(streams: &SeedStreams, id: &str) -> u64 {
    streams.seed_for_key(DROPOUT, id)
}

/// Mean `|y - G(c)|` on the `[-1, 1]` scale over all samples, in eval mode.
pub fn mean_l1<T: Real>(state: &TrainState<T>, samples: &[PreparedSample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return param_err("samples", "no samples to evaluate");
    }
    let mut total = 0.0;
    for s in samples {
        let batch = Batch::collate(&[s])?;
        let fake = state.generate(&batch.condition, &batch.points, inference_seed(state.streams(), &s.id))?;
        let sum: f64 = fake
            .data()
            .iter()
            .zip(s.target.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .sum();
        total += sum / fake.numel() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOptions {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    /// Add elapsed seconds to every log record.
    pub log_wallclock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub variant: Variant,
    pub steps: u64,
    pub epochs_completed: usize,
    pub train_l1: f64,
    pub eval_l1: Option<f64>,
    pub final_record: Option<TrainLogRecord>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult<T> {
    pub state: TrainState<T>,
    pub records: Vec<TrainLogRecord>,
    pub metrics: TrainMetrics,
    pub checkpoint: PathBuf,
    pub files: Vec<PathBuf>,
}

/// A run stopped early. Whatever was written before the failure is listed.
#[derive(Debug, thiserror::Error)]
#[error("training stopped after step {steps_completed}: {source}")]
pub struct RunFailure {
    #[source]
    pub source: Error,
    pub steps_completed: u64,
    pub last_checkpoint: Option<PathBuf>,
    pub files_written: Vec<PathBuf>,
}

struct Run {
    files: Vec<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl Run {
    fn record(&mut self, p: PathBuf) {
        if !self.files.contains(&p) {
            self.files.push(p);
        }
    }

    fn save_checkpoint<T: Real>(&mut self, state: &TrainState<T>, out_dir: &Path, periodic: bool) -> Result<()> {
        let ck = state.to_checkpoint();
        let latest = out_dir.join(CHECKPOINT_FILE);
        ck.save(&latest)?;
        self.record(latest.clone());
        if periodic {
            let p = out_dir.join(format!("step_{:08}.p2p", state.step));
            ck.save(&p)?;
            self.record(p);
        }
        self.last_checkpoint = Some(latest);
        Ok(())
    }
}

/// Keep the log lines up to and including `step`; later lines belong to a
/// run that is being replaced.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrainLogRecord = serde_json::from_str(&line)?;
        if rec.step <= step {
            kept.push(line);
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn dump_fakes<T: Real>(state: &TrainState<T>, samples: &[PreparedSample<T>], dir: &Path, run: &mut Run) -> Result<()> {
    let epoch_dir = dir.join(format!("epoch_{:04}", state.progress.epoch));
    fs::create_dir_all(&epoch_dir)?;
    for s in samples.iter().take(state.config.dump_count) {
        let batch = Batch::collate(&[s])?;
        let fake = state.generate(&batch.condition, &batch.points, inference_seed(state.streams(), &s.id))?;
        let p = epoch_dir.join(format!("{}.png", s.id));
        Image::from_signed_tensor(&fake)?.save_png(&p)?;
        run.record(p);
    }
    Ok(())
}

/// Train for `config.epochs` epochs (or `config.max_steps` steps), writing a
/// JSON-lines log, checkpoints, optional fake-image dumps and a metrics report
/// into `out_dir`.
pub fn run_experiment<T: Real>(
    config: &TrainConfig,
    train: &[PreparedSample<T>],
    eval: &[PreparedSample<T>],
    out_dir: &Path,
    opts: &ExperimentOptions,
) -> Result<ExperimentResult<T>, RunFailure> {
    let mut run = Run {
        files: Vec::new(),
        last_checkpoint: None,
    };
    let mut steps_completed = 0;
    let outcome = run_inner(config, train, eval, out_dir, opts, &mut run, &mut steps_completed);
    outcome.map_err(|source| {
        let source = match source {
            Error::NonFiniteLoss { step, .. } => Error::NonFiniteLoss {
                step,
                last_checkpoint: run.last_checkpoint.clone(),
            },
            e => e,
        };
        RunFailure {
            source,
            steps_completed,
            last_checkpoint: run.last_checkpoint.clone(),
            files_written: run.files.clone(),
        }
    })
}

fn run_inner<T: Real>(
    config: &TrainConfig,
    train: &[PreparedSample<T>],
    eval: &[PreparedSample<T>],
    out_dir: &Path,
    opts: &ExperimentOptions,
    run: &mut Run,
    steps_completed: &mut u64,
) -> Result<ExperimentResult<T>> {
    if train.is_empty() {
        return param_err("dataset", "no training samples");
    }
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut state = match &opts.resume {
        Some(p) => {
            let s = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
            if s.config.generator != config.generator
                || s.config.discriminator != config.discriminator
                || s.config.seed != config.seed
            {
                return Err(Error::Invalid(format!(
                    "checkpoint {} was trained with different network settings or seed",
                    p.display()
                )));
            }
            let mut s = s;
            s.config = config.clone();
            run.last_checkpoint = Some(p.clone());
            s
        }
        None => TrainState::new(config.clone())?,
    };
    *steps_completed = state.step;
    let log_path = out_dir.join(LOG_FILE);
    if opts.resume.is_some() {
        truncate_log(&log_path, state.step)?;
    } else if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    run.record(log_path.clone());

    let bs = config.batch_size;
    let batches_per_epoch = train.len().div_ceil(bs);
    let started = Instant::now();
    let mut records = Vec::new();
    let limit = config.max_steps.unwrap_or(u64::MAX);
    while state.progress.epoch < config.epochs && state.step < limit {
        let order = epoch_order(state.streams(), state.progress.epoch, train.len());
        while state.progress.batch < batches_per_epoch && state.step < limit {
            let b = state.progress.batch;
            let members: Vec<&PreparedSample<T>> = order[b * bs..((b + 1) * bs).min(train.len())]
                .iter()
                .map(|&i| &train[i])
                .collect();
            let batch = Batch::collate(&members)?;
            let mut rec = state.train_step(&batch)?;
            state.progress.batch += 1;
            *steps_completed = state.step;
            if opts.log_wallclock {
                rec.wallclock = Some(started.elapsed().as_secs_f64());
            }
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            records.push(rec);
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                log.flush()?;
                run.save_checkpoint(&state, out_dir, true)?;
            }
        }
        if state.progress.batch < batches_per_epoch {
            break;
        }
        if config.dump_every_epochs > 0 && (state.progress.epoch + 1) % config.dump_every_epochs == 0 {
            dump_fakes(&state, train, &out_dir.join("fakes"), run)?;
        }
        state.progress = Progress {
            epoch: state.progress.epoch + 1,
            batch: 0,
        };
        log.flush()?;
        run.save_checkpoint(&state, out_dir, false)?;
    }
    log.flush()?;
    run.save_checkpoint(&state, out_dir, false)?;

    let metrics = TrainMetrics {
        variant: config.generator.variant,
        steps: state.step,
        epochs_completed: state.progress.epoch,
        train_l1: mean_l1(&state, train)?,
        eval_l1: if eval.is_empty() { None } else { Some(mean_l1(&state, eval)?) },
        final_record: records.last().cloned(),
    };
    let mpath = out_dir.join(METRICS_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&metrics)?)?;
    run.record(mpath);
    Ok(ExperimentResult {
        checkpoint: out_dir.join(CHECKPOINT_FILE),
        state,
        records,
        metrics,
        files: run.files.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<TrainMetrics>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | steps | train L1 | eval L1 |\n|---|---|---|---|\n");
        for r in &self.rows {
            let eval = r.eval_l1.map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!("| {} | {} | {:.4} | {} |\n", r.variant.name(), r.steps, r.train_l1, eval));
        }
        s
    }
}

/// Train every generator variant with otherwise identical settings, one
/// subdirectory per variant.
pub fn run_ablation<T: Real>(
    config: &TrainConfig,
    train: &[PreparedSample<T>],
    eval: &[PreparedSample<T>],
    out_dir: &Path,
) -> Result<AblationTable, RunFailure> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = config.clone();
        cfg.generator.variant = variant;
        let res = run_experiment(&cfg, train, eval, &out_dir.join(variant.name()), &ExperimentOptions::default())?;
        rows.push(res.metrics);
    }
    let table = AblationTable { rows };
    let write = || -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
        fs::write(out_dir.join("ablation.md"), table.to_markdown())?;
        Ok(())
    };
    write().map_err(|source| RunFailure {
        source,
        steps_completed: 0,
        last_checkpoint: None,
        files_written: Vec::new(),
    })?;
    Ok(table)
}
