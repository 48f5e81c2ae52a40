//! The optimization loop: staged gradient blocking, seed-noise
//! injection, learning-rate hold + exponential decay, checkpoints, and
//! a per-iteration loss trace.
//!
//! Every iteration draws a fresh batch of synthetic pairs whose seeds
//! derive from the master seed and the absolute pair index alone, so a
//! run resumed from a checkpoint walks the same data as an unbroken one
//! and produces an identical trace.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::seeding::SeedSet;
use crate::sgnn::{forward_generic, ForwardConfig, ModelWeights};
use serde::{Deserialize, Serialize};

use crate::tensorcore::{Engine, Taped};
use crate::training::loss::{loss_graph, stage_labels};
use crate::training::optim::Adam;
use crate::training::synth::{synth_pair, GroundTruth, SynthConfig};
use crate::{Error, Result};

/// Training-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Base learning rate.
    pub learning_rate: f64,
    /// Weight-loss coefficient δ.
    pub delta: f64,
    /// Total iterations (optimizer steps).
    pub iterations: usize,
    /// Pairs per iteration, processed sequentially with gradient
    /// accumulation.
    pub batch_size: usize,
    /// Fraction of iterations (from the start) with the stage boundary
    /// gradient blocked.
    pub grad_block_fraction: f64,
    /// Fraction of iterations holding the base rate before decay.
    pub lr_hold_fraction: f64,
    /// Per-iteration exponential decay factor applied after the hold.
    pub lr_decay: f64,
    /// Seeds per pair (defaults to the size heuristic when `None`).
    pub seed_count: Option<usize>,
    /// Sinkhorn iterations for the reseeding pass.
    pub sinkhorn_reseed: usize,
    /// Sinkhorn iterations for the final pass.
    pub sinkhorn_final: usize,
    /// Fraction of pairs trained with an injected noisy seed override
    /// (ground-truth seeds diluted to a random precision), teaching the
    /// seed filter to cope with bad seeds.
    pub seed_noise_fraction: f64,
    /// Write a checkpoint every this many iterations (0 = never).
    pub checkpoint_every: usize,
    /// Directory receiving checkpoint files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Master RNG seed for batch data and noise decisions.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            delta: 250.0,
            iterations: 1000,
            batch_size: 1,
            grad_block_fraction: 0.3,
            lr_hold_fraction: 0.5,
            lr_decay: 0.999,
            seed_count: None,
            sinkhorn_reseed: 10,
            sinkhorn_final: 100,
            seed_noise_fraction: 0.0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let config = |reason: String| Err(Error::Config(format!("train: {reason}")));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return config(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if !self.delta.is_finite() || self.delta < 0.0 {
            return config(format!("delta must be >= 0, got {}", self.delta));
        }
        if self.batch_size == 0 {
            return config("batch size must be positive".into());
        }
        for (name, v) in [
            ("grad_block_fraction", self.grad_block_fraction),
            ("lr_hold_fraction", self.lr_hold_fraction),
            ("seed_noise_fraction", self.seed_noise_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return config(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.sinkhorn_reseed == 0 || self.sinkhorn_final == 0 {
            return config("sinkhorn iteration counts must be positive".into());
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return config("checkpoint_every set without checkpoint_dir".into());
        }
        Ok(())
    }

    /// Learning rate at absolute iteration `it`: the base rate through
    /// the hold window, then exponential decay per iteration.
    fn lr_at(&self, it: usize) -> f64 {
        let hold = (self.lr_hold_fraction * self.iterations as f64).round() as usize;
        if it < hold {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi((it - hold + 1) as i32)
        }
    }

    /// Whether the stage boundary is blocked at absolute iteration `it`.
    fn blocked_at(&self, it: usize) -> bool {
        let blocked = (self.grad_block_fraction * self.iterations as f64).round() as usize;
        it < blocked
    }
}

/// One row of the loss trace (batch means).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub assign_reseed: f64,
    pub assign_final: f64,
    pub weight: f64,
    pub total: f64,
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Per-iteration loss rows, one per completed iteration.
    pub trace: Vec<TraceRow>,
    /// Learning rate used by the last completed iteration.
    pub final_learning_rate: f64,
}

/// Model weights plus optimizer state, as stored in checkpoint files
/// (SGMW payload immediately followed by the "ADAM" appendix).
pub struct Checkpoint {
    pub model: ModelWeights,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = self.model.to_bytes();
        bytes.extend_from_slice(&self.adam.to_bytes());
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (model, consumed) = ModelWeights::from_bytes_prefix(bytes)?;
        let adam = Adam::from_bytes(&bytes[consumed..], &model.params)?;
        Ok(Self { model, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Salt decorrelating the seed-noise stream from the data stream.
const NOISE_SALT: u64 = 0x5eed_0515_7ab1_e001;

/// SplitMix64 finalizer: decorrelated per-index streams from one master
/// seed, so iteration k's data depends on (seed, k) alone.
pub(crate) fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds a deliberately imperfect seed override: ground-truth matches
/// diluted with wrong pairs to a random precision in [0.3, 1], teaching
/// the per-unit filter that seeds can lie. Returns `None` when the pair
/// has no matches or no room for seeds.
fn noisy_seed_override(
    truth: &GroundTruth,
    n: usize,
    m: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<SeedSet> {
    if truth.matches.is_empty() || k == 0 {
        return None;
    }
    let precision = rng.random_range(0.3..=1.0);
    let true_count = ((precision * k as f64).round() as usize)
        .clamp(1, k.min(truth.matches.len()));
    let chosen = rand::seq::index::sample(rng, truth.matches.len(), true_count);
    let mut used_a = vec![false; n];
    let mut used_b = vec![false; m];
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(k);
    for idx in chosen {
        let (a, b) = truth.matches[idx];
        used_a[a] = true;
        used_b[b] = true;
        pairs.push((a, b));
    }
    let truth_pairs: std::collections::HashSet<(usize, usize)> =
        truth.matches.iter().copied().collect();
    let mut free_a: Vec<usize> = (0..n).filter(|&i| !used_a[i]).collect();
    let mut free_b: Vec<usize> = (0..m).filter(|&j| !used_b[j]).collect();
    while pairs.len() < k && !free_a.is_empty() && !free_b.is_empty() {
        let ai = rng.random_range(0..free_a.len());
        let bi = rng.random_range(0..free_b.len());
        let pair = (free_a[ai], free_b[bi]);
        if truth_pairs.contains(&pair) {
            // An accidental true pair would raise the precision; skip it
            // unless it is the only remaining option.
            if free_a.len() > 1 || free_b.len() > 1 {
                if free_a.len() > 1 {
                    free_a.swap_remove(ai);
                } else {
                    free_b.swap_remove(bi);
                }
                continue;
            }
            break;
        }
        free_a.swap_remove(ai);
        free_b.swap_remove(bi);
        pairs.push(pair);
    }
    let count = pairs.len();
    let (indices_a, indices_b) = pairs.into_iter().unzip();
    let scores = (0..count).map(|i| 1.0 - i as f64 * 1e-3).collect();
    Some(SeedSet::new(indices_a, indices_b, scores, n, m).expect("constructed seeds are valid"))
}

/// Trains `model` in place on synthetic pairs, returning the loss trace.
///
/// Each iteration accumulates gradients over `batch_size` pairs, steps
/// Adam once, and logs the batch-mean loss components. A non-finite
/// loss aborts with the offending pair's data seed in the error.
pub fn train(
    model: &mut ModelWeights,
    synth: &SynthConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut adam = Adam::new(&model.params);
    run_loop(model, &mut adam, 0, synth, config)
}

/// Continues a checkpointed run to `config.iterations`, returning the
/// restored-and-trained model with the trace of the remaining
/// iterations. Given the same configs as the original run, the combined
/// trace is identical to an unbroken run's.
pub fn train_resume(
    path: impl AsRef<Path>,
    synth: &SynthConfig,
    config: &TrainConfig,
) -> Result<(ModelWeights, TrainOutcome)> {
    let Checkpoint { mut model, mut adam } = Checkpoint::load(path)?;
    let done = adam.steps() as usize;
    if done > config.iterations {
        return Err(Error::Config(format!(
            "train: checkpoint already has {done} iterations, config asks for {}",
            config.iterations
        )));
    }
    let outcome = run_loop(&mut model, &mut adam, done, synth, config)?;
    Ok((model, outcome))
}

fn run_loop(
    model: &mut ModelWeights,
    adam: &mut Adam,
    start: usize,
    synth: &SynthConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if synth.descriptor_dim != model.shape.d {
        return Err(Error::Config(format!(
            "train: synthetic descriptor width {} does not match model d = {}",
            synth.descriptor_dim, model.shape.d
        )));
    }
    let shape = model.shape;
    let layout = model.layout.clone();
    let batch = config.batch_size;
    let mut trace = Vec::with_capacity(config.iterations.saturating_sub(start));
    let mut lr = config.learning_rate;

    for it in start..config.iterations {
        lr = config.lr_at(it);
        let blocked = config.blocked_at(it);
        model.params.zero_grads();
        let mut row = TraceRow {
            iteration: it,
            assign_reseed: 0.0,
            assign_final: 0.0,
            weight: 0.0,
            total: 0.0,
        };

        for b in 0..batch {
            let pair_index = (it * batch + b) as u64;
            let data_seed = splitmix64(config.seed, pair_index);
            let pair_synth = SynthConfig { seed: data_seed, ..synth.clone() };
            let (kp_a, kp_b, truth) = synth_pair(&pair_synth)?;

            // Independent stream for the noise decisions so they never
            // perturb the data stream.
            let mut noise_rng =
                ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ NOISE_SALT, pair_index));
            let seed_override = if config.seed_noise_fraction > 0.0
                && noise_rng.random::<f64>() < config.seed_noise_fraction
            {
                let k = config
                    .seed_count
                    .unwrap_or_else(|| crate::seeding::default_seed_count(kp_a.len().min(kp_b.len())));
                noisy_seed_override(&truth, kp_a.len(), kp_b.len(), k, &mut noise_rng)
            } else {
                None
            };

            let fwd = ForwardConfig {
                seed_count: config.seed_count,
                sinkhorn_reseed: config.sinkhorn_reseed,
                sinkhorn_final: config.sinkhorn_final,
                block_stage_gradient: blocked,
                seed_override,
                ..ForwardConfig::default()
            };

            // Numeric failures anywhere in the pair's forward/backward
            // abort with the batch data seed for reproduction.
            let scale = 1.0 / batch as f64;
            (|| -> Result<()> {
                let mut eng = Taped::new(&model.params);
                let staged = forward_generic(&mut eng, shape, &layout, &kp_a, &kp_b, &fwd)?;
                let labels = stage_labels(
                    &staged.seeds_initial,
                    &staged.seeds_refined,
                    shape.initial_units,
                    shape.total_units(),
                    &truth,
                );
                let terms = loss_graph(&mut eng, &staged, &labels, &truth, config.delta)?;
                let contribution = eng.value(&terms.total).scalar_value();
                if !contribution.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss {contribution}")));
                }
                row.assign_reseed += scale * eng.value(&terms.assign_reseed).scalar_value();
                row.assign_final += scale * eng.value(&terms.assign_final).scalar_value();
                row.weight += scale * eng.value(&terms.weight).scalar_value();
                row.total += scale * contribution;

                let mean = eng.scale(&terms.total, scale);
                let mut tape = eng.into_tape();
                tape.backward(mean, &mut model.params)
            })()
            .map_err(|e| match e {
                Error::NonFinite(_) | Error::Numeric(_) => Error::Numeric(format!(
                    "train: {e} at iteration {it} (batch data seed {data_seed})"
                )),
                other => other,
            })?;
        }

        adam.step(&mut model.params, lr)?;
        if model.params.any_non_finite() {
            return Err(Error::Numeric(format!(
                "train: non-finite parameter after the update at iteration {it}"
            )));
        }
        trace.push(row);

        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            let dir = config.checkpoint_dir.as_ref().expect("validated");
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("checkpoint-{:06}.sgmw", it + 1));
            let bytes = {
                let mut b = model.to_bytes();
                b.extend_from_slice(&adam.to_bytes());
                b
            };
            fs::write(path, bytes)?;
        }
    }

    Ok(TrainOutcome { trace, final_learning_rate: lr })
}
