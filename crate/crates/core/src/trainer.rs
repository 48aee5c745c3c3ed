//! One optimisation step at a time. Batches and posterior noise for step
//! `t` come from a generator keyed by `(seed, t)`, so a run resumed from a
//! checkpoint continues exactly as the uninterrupted run would.

use alloc::format;
use alloc::string::String;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive_loss::WaveletLikelihood;
use crate::corpus::{sample_batch, Batch, BatchSpec, GlyphMatrix, SplitManifest};
use crate::error::{Error, Result};
use crate::model::{elbo, init_params, ElboStats, ModelConfig, ModelParams};
use crate::optim::{Adam, AdamConfig};

/// Optimisation settings shared by the library and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch: BatchSpec,
    pub optimizer: AdamConfig,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch: BatchSpec::default(),
            optimizer: AdamConfig::default(),
            checkpoint_every: 1000,
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Adam,
}

impl TrainState {
    pub fn new(model: &ModelConfig, optimizer: AdamConfig, seed: u64) -> Result<Self> {
        let params = init_params(model, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let optimizer = Adam::new(optimizer, &params.weights);
        Ok(Self { params, optimizer })
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

/// Generator for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn describe(batch: &Batch, matrix: &GlyphMatrix) -> String {
    let mut s = String::new();
    for (&j, cs) in batch.fonts.iter().zip(&batch.chars) {
        let chars: alloc::vec::Vec<String> = cs.iter().map(|&i| format!("{:04x}", matrix.chars()[i])).collect();
        s.push_str(&format!("{}:[{}] ", matrix.fonts()[j], chars.join(",")));
    }
    s.trim_end().into()
}

/// Samples the next batch, evaluates the ELBO and applies one Adam update.
/// A non-finite loss or gradient leaves the state untouched and reports the
/// offending batch.
pub fn train_step(
    state: &mut TrainState,
    likelihood: &WaveletLikelihood<'_>,
    matrix: &GlyphMatrix,
    manifest: &SplitManifest,
    spec: BatchSpec,
    seed: u64,
) -> Result<StepMetrics> {
    let step = state.step();
    let mut rng = step_rng(seed, step);
    let batch = sample_batch(matrix, manifest, spec, &mut rng)?;
    let out = elbo(&state.params, likelihood, matrix, &batch, &mut rng)?;
    let ElboStats { elbo, recon, kl, .. } = out.stats;
    if !elbo.is_finite() || !out.grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "step {step}: elbo {elbo}, recon {recon}, kl {kl}; batch {}",
            describe(&batch, matrix)
        )));
    }
    state.optimizer.update(&mut state.params.weights, &out.grads);
    Ok(StepMetrics { step: step + 1, elbo, recon, kl })
}
