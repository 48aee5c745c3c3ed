//! The training loop around [`train_step`]: loss log, periodic and
//! best-dev checkpoints, resume.
//!
//! Files in the checkpoint directory: `step_NNNNNNN.gfc` at every
//! checkpoint, `latest.gfc` (copy of the newest), `best.gfc` with
//! `best.json` for the highest mean dev SSIM seen, and `nonfinite.json`
//! when a step produced a non-finite loss.

use std::fs::{self, File, OpenOptions};
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};

use glyphforge_core::adaptive_loss::WaveletLikelihood;
use glyphforge_core::corpus::{GlyphMatrix, Split, SplitManifest};
use glyphforge_core::evaluation::evaluate;
use glyphforge_core::trainer::{train_step, StepMetrics, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::TrainFile;
use crate::error::{Error, Result};
use crate::partition_cache;
use crate::store::{ingest, read_json, read_splits, write_json};

pub const LATEST: &str = "latest.gfc";
pub const BEST: &str = "best.gfc";

pub fn step_file(step: u64) -> String {
    format!("step_{step:07}.gfc")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestDev {
    pub step: u64,
    pub dev_ssim: f64,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: u64,
    message: &'a str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub last: Option<StepMetrics>,
    pub best: Option<BestDev>,
}

/// Mean SSIM over every scored dev cell, `None` without dev fonts.
pub fn dev_ssim(
    state: &TrainState,
    matrix: &GlyphMatrix,
    manifest: &SplitManifest,
    n: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if manifest.fonts_in(matrix, Split::Dev).is_empty() {
        return Ok(None);
    }
    let r = &evaluate(&state.params, matrix, manifest, Split::Dev, "dev", &[n], seed)?[0];
    let count = r.known.count + r.unknown.count;
    if count == 0 {
        return Ok(None);
    }
    Ok(Some((r.known.ssim * r.known.count as f64 + r.unknown.ssim * r.unknown.count as f64) / count as f64))
}

struct Run<'a> {
    cfg: &'a TrainFile,
    train: TrainConfig,
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    best: Option<BestDev>,
}

impl Run<'_> {
    fn dir(&self) -> &Path {
        &self.cfg.checkpoint_dir
    }

    fn checkpoint(&mut self, state: &TrainState) -> Result<()> {
        let ck = Checkpoint { state: state.clone(), train: self.train.clone() };
        let bytes = checkpoint::encode(&ck);
        let step = state.step();
        crate::store::write_bytes(&self.dir().join(step_file(step)), &bytes)?;
        crate::store::write_bytes(&self.dir().join(LATEST), &bytes)?;
        log::info!("checkpoint at step {step}");
        if let Some(s) = dev_ssim(state, &self.matrix, &self.manifest, self.cfg.dev_observations, self.train.seed)? {
            log::info!("dev ssim {s:.4} at step {step}");
            if self.best.is_none_or(|b| s > b.dev_ssim) {
                let best = BestDev { step, dev_ssim: s };
                crate::store::write_bytes(&self.dir().join(BEST), &bytes)?;
                write_json(&self.dir().join("best.json"), &best)?;
                self.best = Some(best);
            }
        }
        Ok(())
    }
}

fn open_metrics(path: &Path, append: bool) -> Result<LineWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(LineWriter::new(file))
}

/// Trains until `cfg.steps` steps are complete, calling `on_step` after
/// each one.
pub fn train(cfg: &TrainFile, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainSummary> {
    let model = cfg.model.resolve()?;
    let matrix = ingest(&cfg.corpus, None)?;
    let manifest = read_splits(&cfg.splits)?;
    if matrix.side() != model.side {
        return Err(Error::Usage(format!("corpus glyph side {} but model side {}", matrix.side(), model.side)));
    }
    let table = partition_cache::load_or_build(&cfg.partition_cache)?;
    let lik = WaveletLikelihood::new(&table, model.side, model.wavelet_levels)?;
    let train = cfg.train_config();

    let latest = cfg.checkpoint_dir.join(LATEST);
    let mut state = if cfg.resume && latest.is_file() {
        let ck = checkpoint::load(&latest)?;
        if ck.state.params.config != model || ck.train.seed != train.seed || ck.train.batch != train.batch {
            return Err(Error::format(&latest, "checkpoint was trained with a different model, seed or batch shape"));
        }
        log::info!("resuming from step {}", ck.state.step());
        ck.state
    } else {
        TrainState::new(&model, train.optimizer, train.seed)?
    };
    state.optimizer.config = train.optimizer;
    let start_step = state.step();

    let best_path = cfg.checkpoint_dir.join("best.json");
    let best = if start_step > 0 && best_path.is_file() { Some(read_json::<BestDev>(&best_path)?) } else { None };
    let mut run = Run { cfg, train: train.clone(), matrix, manifest, best };
    let metrics_path: PathBuf = cfg.metrics_path();
    let mut metrics = open_metrics(&metrics_path, start_step > 0)?;

    let mut last = None;
    let mut saved_at = if start_step > 0 { Some(start_step) } else { None };
    while state.step() < train.steps {
        let m = match train_step(&mut state, &lik, &run.matrix, &run.manifest, train.batch, train.seed) {
            Ok(m) => m,
            Err(glyphforge_core::Error::NonFinite(message)) => {
                let step = state.step();
                write_json(&cfg.checkpoint_dir.join("nonfinite.json"), &NonFiniteDump { step, message: &message })?;
                return Err(glyphforge_core::Error::NonFinite(message).into());
            }
            Err(e) => return Err(e.into()),
        };
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        on_step(&m);
        last = Some(m);
        if train.checkpoint_every > 0 && m.step % train.checkpoint_every == 0 {
            run.checkpoint(&state)?;
            saved_at = Some(m.step);
        }
    }
    if saved_at != Some(state.step()) {
        run.checkpoint(&state)?;
    }
    Ok(TrainSummary { start_step, final_step: state.step(), last, best: run.best })
}
