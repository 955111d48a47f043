//! Command implementations behind the `drivegen` binary.

pub mod svg;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use drivegen::config::{RunConfig, SampleMode, Variant};
use drivegen::eval::{
    eval_rng, evaluate_constant_velocity, evaluate_ground_truth, evaluate_model, run_ablation, EvalReport, MetricMode,
};
use drivegen::geom::Point;
use drivegen::model::{Inference, Model, SceneSample};
use drivegen::scene::{dataset_read, dataset_write, generate_dataset, Scene};
use drivegen::train::{fit, prepare_samples, FitOptions, TrainState};

/// Failures the binary reports with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Settings shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paper_parity: bool,
    pub variant: Option<Variant>,
    pub mode: Option<SampleMode>,
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a TOML config on top of the default or full-size preset.
pub fn parse_config(text: &str, paper_parity: bool) -> std::result::Result<RunConfig, ConfigError> {
    let bad = |m: String| ConfigError(format!("invalid config: {m}"));
    let direct: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
    let cfg = if paper_parity {
        let mut base = serde_json::to_value(RunConfig::paper_parity()).map_err(|e| bad(e.to_string()))?;
        let overlay: toml::Table = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        merge(
            &mut base,
            serde_json::to_value(overlay).map_err(|e| bad(e.to_string()))?,
        );
        serde_json::from_value(base).map_err(|e| bad(e.to_string()))?
    } else {
        direct
    };
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cfg)
}

impl Common {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_config(&text, self.paper_parity).map_err(|e| ConfigError(format!("{}: {}", p.display(), e.0)))?
            }
            None if self.paper_parity => RunConfig::paper_parity(),
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()
            .map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(m) = self.mode {
            cfg.sample_mode = m;
        }
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    TrainState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes = dataset_read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if scenes.is_empty() {
        bail!("dataset {} holds no scenes", path.display());
    }
    Ok(scenes)
}

fn find_scene(scenes: Vec<Scene>, id: u64) -> Result<Scene> {
    scenes
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| anyhow!("scene {id} is not in the dataset"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Writes `count` scenes. The training split starts at `data.first_seed`
/// (or `--seed`); the test split follows it.
pub fn cmd_gen_data(common: &Common, split: Split, count: Option<usize>, out: &Path) -> Result<usize> {
    let cfg = common.run_config()?;
    let first = common.seed.unwrap_or(cfg.data.first_seed);
    let (first, n) = match split {
        Split::Train => (first, count.unwrap_or(cfg.data.train_scenes)),
        Split::Test => (
            first + cfg.data.train_scenes as u64,
            count.unwrap_or(cfg.data.test_scenes),
        ),
    };
    let scenes = generate_dataset(&cfg.scene, first, n)?;
    dataset_write(&scenes, out)?;
    Ok(scenes.len())
}

/// Trains from scratch, or continues a checkpoint, writing the config echo,
/// the epoch log, periodic checkpoints and `checkpoint.json` to `out_dir`.
pub fn cmd_train(
    common: &Common,
    data: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    verbose: bool,
) -> Result<TrainState> {
    let mut state = match resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(&common.run_config()?)?,
    };
    let samples = prepare_samples(&load_scenes(data)?, &state.config)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&state.config.echo(), Some(&out_dir.join("config.json")))?;
    let opts = FitOptions {
        out_dir: Some(out_dir.to_path_buf()),
        stop_at_epoch: None,
        verbose,
    };
    fit(&mut state, &samples, &opts)?;
    state.save(&out_dir.join("checkpoint.json"))?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planner {
    Model,
    GroundTruth,
    ConstantVelocity,
}

impl Planner {
    fn as_str(self) -> &'static str {
        match self {
            Planner::Model => "model",
            Planner::GroundTruth => "ground_truth",
            Planner::ConstantVelocity => "constant_velocity",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub planner: &'static str,
    pub sample_mode: SampleMode,
    pub metric_mode: MetricMode,
    pub seed: u64,
    pub config: Value,
    pub metrics: EvalReport,
}

pub fn cmd_eval(
    common: &Common,
    planner: Planner,
    checkpoint: Option<&Path>,
    data: &Path,
    metric_mode: MetricMode,
    out: Option<&Path>,
) -> Result<EvalOutput> {
    let (cfg, params) = match (planner, checkpoint) {
        (Planner::Model, None) => bail!("evaluating the model needs --checkpoint"),
        (Planner::Model, Some(p)) => {
            let state = load_checkpoint(p)?;
            let mut cfg = state.config.clone();
            common.apply(&mut cfg);
            cfg.variant = state.config.variant;
            (cfg, Some(state.params))
        }
        (_, _) => (common.run_config()?, None),
    };
    let samples = prepare_samples(&load_scenes(data)?, &cfg)?;
    let metrics = match (planner, params) {
        (Planner::GroundTruth, _) => evaluate_ground_truth(&samples, metric_mode)?,
        (Planner::ConstantVelocity, _) => evaluate_constant_velocity(&samples, metric_mode)?,
        (Planner::Model, Some(params)) => {
            let model = Model::new(&cfg.model, cfg.variant)?;
            evaluate_model(&model, &params, &samples, cfg.sample_mode, metric_mode, cfg.seed)?
        }
        (Planner::Model, None) => unreachable!("checked above"),
    };
    let output = EvalOutput {
        planner: planner.as_str(),
        sample_mode: cfg.sample_mode,
        metric_mode,
        seed: cfg.seed,
        config: cfg.echo(),
        metrics,
    };
    write_json(&output, out)?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentFuture {
    pub slot: usize,
    pub future: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FutureSample {
    pub index: usize,
    /// Ego plan in the ego frame, frames 1..=6.
    pub plan: Vec<Point>,
    pub agents: Vec<AgentFuture>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleOutput {
    pub scene_id: u64,
    pub sample_mode: SampleMode,
    pub seed: u64,
    pub config: Value,
    pub samples: Vec<FutureSample>,
}

fn infer_once(
    model: &Model,
    state: &TrainState,
    sample: &SceneSample,
    mode: SampleMode,
    seed: u64,
    k: usize,
) -> Result<Inference> {
    Ok(model.infer(&state.params, sample, mode, &mut eval_rng(seed, k))?)
}

/// `n` futures per instance; sample `k` draws from its own sub-seed.
pub fn cmd_sample(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    scene_id: u64,
    n: usize,
    out: Option<&Path>,
) -> Result<SampleOutput> {
    let state = load_checkpoint(checkpoint)?;
    let mut cfg = state.config.clone();
    common.apply(&mut cfg);
    cfg.variant = state.config.variant;
    let scene = find_scene(load_scenes(data)?, scene_id)?;
    let sample = SceneSample::new(&scene, &cfg.model)?;
    let model = Model::new(&cfg.model, cfg.variant)?;
    let samples = (0..n)
        .map(|k| {
            let inf = infer_once(&model, &state, &sample, cfg.sample_mode, cfg.seed, k)?;
            Ok(FutureSample {
                index: k,
                plan: inf.plan,
                agents: inf
                    .agents
                    .into_iter()
                    .map(|a| AgentFuture {
                        slot: a.detection.slot,
                        future: a.future,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let output = SampleOutput {
        scene_id,
        sample_mode: cfg.sample_mode,
        seed: cfg.seed,
        config: cfg.echo(),
        samples,
    };
    write_json(&output, out)?;
    Ok(output)
}

/// SVG overlay of one scene in the ego frame, with the model's plan and
/// predictions when a checkpoint is given.
pub fn cmd_plot(common: &Common, data: &Path, scene_id: u64, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let scene = find_scene(load_scenes(data)?, scene_id)?;
    let inference = match checkpoint {
        Some(p) => {
            let state = load_checkpoint(p)?;
            let mut cfg = state.config.clone();
            common.apply(&mut cfg);
            cfg.variant = state.config.variant;
            let sample = SceneSample::new(&scene, &cfg.model)?;
            let model = Model::new(&cfg.model, cfg.variant)?;
            Some(infer_once(&model, &state, &sample, cfg.sample_mode, cfg.seed, 0)?)
        }
        None => None,
    };
    let doc = svg::render_scene(&scene, inference.as_ref())?;
    std::fs::write(out, doc).with_context(|| format!("writing {}", out.display()))
}

/// Trains every variant under every seed and writes `ablation.json` and
/// `ablation.csv` to `out_dir`.
pub fn cmd_ablate(
    common: &Common,
    train_data: &Path,
    test_data: &Path,
    variants: &[Variant],
    seeds: &[u64],
    metric_mode: MetricMode,
    out_dir: &Path,
) -> Result<Value> {
    if variants.is_empty() || seeds.is_empty() {
        bail!("ablation needs at least one variant and one seed");
    }
    let cfg = common.run_config()?;
    let train = load_scenes(train_data)?;
    let test = load_scenes(test_data)?;
    let table = run_ablation(&cfg, &train, &test, variants, seeds, metric_mode)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let doc = json!({ "config": cfg.echo(), "rows": table.rows });
    write_json(&doc, Some(&out_dir.join("ablation.json")))?;
    std::fs::write(out_dir.join("ablation.csv"), table.to_csv())?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(parse_config("", false).unwrap(), RunConfig::default());
        assert_eq!(parse_config("", true).unwrap(), RunConfig::paper_parity());
    }

    #[test]
    fn config_sections_override_fields() {
        let cfg = parse_config("seed = 4\n[model]\nlatent_dim = 32\ngru_hidden = 32\n", true).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.latent_dim, 32);
        assert_eq!(
            cfg.model.attention.model_dim,
            RunConfig::paper_parity().model.attention.model_dim
        );
    }

    #[test]
    fn bad_fields_are_named() {
        let e = parse_config("[model]\ngru_hidden = 7\n", false).unwrap_err();
        assert!(e.0.contains("model.gru_hidden"), "{e}");
        let e = parse_config("[train]\nepoch = 3\n", false).unwrap_err();
        assert!(e.0.contains("epoch"), "{e}");
    }
}
