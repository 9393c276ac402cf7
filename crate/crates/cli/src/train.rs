use std::path::{Path, PathBuf};

use mose::data::{load_corpus, stack, Batcher, PairSample};
use mose::model::TrainState;
use mose::{write_atomic, MoseError};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const LOG_NAME: &str = "train_log.csv";
pub const FINAL_NAME: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub resume: Option<PathBuf>,
    /// The model section of the config was given explicitly and must match
    /// a resumed checkpoint.
    pub model_from_config: bool,
}

/// One CSV row; `step` counts completed updates, starting at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: u64,
    pub total: f64,
    pub ncc: f64,
    pub ssim: f64,
    pub moe: f64,
    pub mse: f64,
    pub degenerate_bands: usize,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub rows: Vec<TrainRow>,
}

fn corpus_stats(samples: &[PairSample]) -> Vec<(f32, f32)> {
    let mut stats = samples[0].hr.band_stats.clone();
    for s in &samples[1..] {
        for (acc, &(lo, hi)) in stats.iter_mut().zip(&s.hr.band_stats) {
            acc.0 = acc.0.min(lo);
            acc.1 = acc.1.max(hi);
        }
    }
    stats
}

fn read_log(path: &Path, upto: u64) -> CliResult<Vec<TrainRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| MoseError::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for r in rdr.deserialize::<TrainRow>() {
        let r = r.map_err(|e| MoseError::Data(format!("{}: {e}", path.display())))?;
        if r.step <= upto {
            rows.push(r);
        }
    }
    Ok(rows)
}

fn write_log(path: &Path, rows: &[TrainRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| MoseError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MoseError::Data(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Trains from `data` into `out`, writing a checkpoint every
/// `checkpoint_every` steps, `final.ckpt`, and `train_log.csv`.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> CliResult<TrainSummary> {
    let samples: Vec<PairSample> = load_corpus(data)?.into_iter().map(|(_, p)| p).collect();
    let mut state = match &opts.resume {
        Some(path) => {
            let state = TrainState::<f32>::load(path)?;
            if opts.model_from_config && state.model.cfg() != &cfg.model {
                return Err(CliError::usage("model config differs from the resumed checkpoint"));
            }
            if opts.seed.is_some_and(|s| s != state.seed) {
                return Err(CliError::usage(format!("--seed differs from the checkpoint seed {}", state.seed)));
            }
            state
        }
        None => TrainState::new(cfg.model.clone(), cfg.train.adam.clone(), opts.seed.unwrap_or(0))?,
    };
    let mcfg = state.model.cfg().clone();
    for (i, s) in samples.iter().enumerate() {
        if s.scale != mcfg.scale || s.lr.bands != mcfg.in_channels {
            return Err(CliError::usage(format!(
                "sample {i} is x{} with {} bands; the model expects x{} with {}",
                s.scale, s.lr.bands, mcfg.scale, mcfg.in_channels
            )));
        }
    }
    if state.band_stats.is_none() {
        state.band_stats = Some(corpus_stats(&samples));
    }

    let batcher = Batcher::new(samples.len(), cfg.train.batch_size, state.seed)?;
    let steps = opts
        .steps
        .or(cfg.train.steps)
        .unwrap_or(cfg.train.epochs * batcher.batches_per_epoch() as u64);
    std::fs::create_dir_all(out).map_err(|e| MoseError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let log_path = out.join(LOG_NAME);
    let mut rows = if opts.resume.is_some() { read_log(&log_path, state.step)? } else { Vec::new() };

    let first_step = state.step + 1;
    let mut final_loss = f64::NAN;
    for _ in 0..steps {
        let idx = batcher.batch_at(state.step);
        let (lr, hr) = stack::<f32>(&samples, &idx)?;
        let report = match state.train_step(&lr, &hr) {
            Ok(r) => r,
            Err(e) => {
                write_log(&log_path, &rows)?;
                return Err(e.into());
            }
        };
        final_loss = report.total as f64;
        rows.push(TrainRow {
            step: state.step,
            total: report.total as f64,
            ncc: report.ncc as f64,
            ssim: report.ssim as f64,
            moe: report.moe as f64,
            mse: report.mse as f64,
            degenerate_bands: report.degenerate_bands,
        });
        if state.step % cfg.train.checkpoint_every == 0 {
            state.save(&out.join(checkpoint_name(state.step)))?;
            write_log(&log_path, &rows)?;
        }
    }
    let final_checkpoint = out.join(FINAL_NAME);
    state.save(&final_checkpoint)?;
    write_log(&log_path, &rows)?;
    Ok(TrainSummary {
        first_step,
        last_step: state.step,
        final_loss,
        final_checkpoint,
        rows,
    })
}
