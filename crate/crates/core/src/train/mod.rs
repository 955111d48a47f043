//! Optimization loop, epoch logs and resumable training state.

pub mod losses;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, SceneSample};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::optim::{accumulate, adamw_step, cosine_lr, scale_grads, AdamWState, GradMap};
use crate::nn::{Graph, ParamStore};

pub use losses::{scene_loss, LossReport};

/// Parameters, optimizer moments and progress of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: AdamWState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.variant)?;
        let mut params = model.init(config.seed)?;
        params.round_to_f32();
        Ok(TrainState {
            config: config.clone(),
            params,
            optimizer: AdamWState::default(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.config.seed,
            epoch: self.epoch,
            step: self.step,
            config: self.config.echo(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config: RunConfig = serde_json::from_value(ck.config)
            .map_err(|e| Error::Checkpoint(format!("config echo does not parse: {e}")))?;
        config.validate()?;
        Ok(TrainState {
            config,
            params: ck.params,
            optimizer: ck.optimizer.unwrap_or_default(),
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// One line of the JSON Lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub wall_seconds: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for checkpoints and `train_log.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Stop once this many epochs are complete (defaults to the config).
    pub stop_at_epoch: Option<usize>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

fn mix(seed: u64, salt: u64, n: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ n.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene order for an epoch, a pure function of the seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64)));
    order
}

/// RNG for the latent draw of one scene visit.
pub fn step_rng(seed: u64, epoch: usize, visit: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, 2 + epoch as u64, visit as u64))
}

pub fn steps_per_epoch(n: usize, accumulation: usize) -> usize {
    n.div_ceil(accumulation)
}

/// Loss and gradients of one scene.
pub fn scene_gradients(
    model: &Model,
    params: &ParamStore,
    sample: &SceneSample,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossReport, GradMap)> {
    let mut g = Graph::new(params);
    let (loss, report, _) = scene_loss(model, &mut g, sample, cfg, rng)?;
    let grads = g.backward(loss).into_map();
    Ok((report, grads))
}

/// Mean loss report over samples without updating anything.
pub fn evaluate_loss(state: &TrainState, samples: &[SceneSample], epoch: usize) -> Result<LossReport> {
    let model = Model::new(&state.config.model, state.config.variant)?;
    let mut reports = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut g = Graph::new(&state.params);
        let mut rng = step_rng(state.config.seed, epoch, i);
        reports.push(scene_loss(&model, &mut g, s, &state.config, &mut rng)?.1);
    }
    Ok(LossReport::mean(&reports))
}

/// Continues training `state` over `samples` until the configured epoch
/// count (or `stop_at_epoch`). Deterministic given the state and samples.
pub fn fit(state: &mut TrainState, samples: &[SceneSample], opts: &FitOptions) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("training set".into()));
    }
    let cfg = state.config.clone();
    let model = Model::new(&cfg.model, cfg.variant)?;
    let tc = &cfg.train;
    let per_epoch = steps_per_epoch(samples.len(), tc.grad_accumulation);
    let total_steps = per_epoch * tc.epochs;
    let stop = opts.stop_at_epoch.unwrap_or(tc.epochs).min(tc.epochs);
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let mut logs = Vec::new();
    while state.epoch < stop {
        let t0 = Instant::now();
        let epoch = state.epoch;
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let mut reports = Vec::with_capacity(samples.len());
        let mut lr = 0.0;
        for (chunk_i, chunk) in order.chunks(tc.grad_accumulation).enumerate() {
            let mut acc = GradMap::new();
            for (k, &idx) in chunk.iter().enumerate() {
                let visit = chunk_i * tc.grad_accumulation + k;
                let mut rng = step_rng(cfg.seed, epoch, visit);
                let (report, grads) =
                    scene_gradients(&model, &state.params, &samples[idx], &cfg, &mut rng).map_err(|e| match e {
                        Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss {
                            epoch,
                            step: state.step,
                            term,
                        },
                        other => other,
                    })?;
                if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: state.step,
                        term: format!("gradient of {name}"),
                    });
                }
                if acc.is_empty() {
                    acc = grads;
                } else {
                    accumulate(&mut acc, &grads);
                }
                reports.push(report);
            }
            if chunk.len() > 1 {
                scale_grads(&mut acc, 1.0 / chunk.len() as f64);
            }
            lr = cosine_lr(tc.learning_rate, state.step, total_steps);
            adamw_step(&tc.optimizer, &mut state.optimizer, &mut state.params, &acc, lr);
            state.params.round_to_f32();
            state.optimizer.round_to_f32();
            state.step += 1;
        }
        state.epoch += 1;
        let entry = EpochLog {
            epoch: state.epoch,
            step: state.step,
            lr,
            wall_seconds: t0.elapsed().as_secs_f64(),
            report: LossReport::mean(&reports),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  j_total {:.4}  l1 {:.3}  j_plan {:.3}  lr {:.2e}  {:.1}s",
                entry.epoch, entry.report.j_total, entry.report.l1, entry.report.j_plan, entry.lr, entry.wall_seconds
            );
        }
        if let Some((p, f)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        if let Some(dir) = &opts.out_dir {
            if tc.checkpoint_every > 0 && state.epoch % tc.checkpoint_every == 0 {
                state.save(&dir.join(format!("checkpoint_epoch{:03}.json", state.epoch)))?;
            }
        }
        logs.push(entry);
    }
    Ok(logs)
}

/// Trains a fresh state for the configured number of epochs.
pub fn train(cfg: &RunConfig, samples: &[SceneSample], opts: &FitOptions) -> Result<(TrainState, Vec<EpochLog>)> {
    let mut state = TrainState::new(cfg)?;
    let logs = fit(&mut state, samples, opts)?;
    Ok((state, logs))
}

/// Precomputes model inputs and targets for a set of scenes.
pub fn prepare_samples(scenes: &[crate::scene::Scene], cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    scenes.iter().map(|s| SceneSample::new(s, &cfg.model)).collect()
}
