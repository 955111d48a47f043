//! Run configuration with desk-scale defaults and a full-size preset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::AttentionConfig;
use crate::nn::loss::FocalParams;
use crate::nn::optim::AdamWConfig;
use crate::scene::{GridConfig, SceneGenConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoEgoToAgent,
    NoTpm,
    NoLftg,
    Neither,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoEgoToAgent,
        Variant::NoTpm,
        Variant::NoLftg,
        Variant::Neither,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEgoToAgent => "no_ego_to_agent",
            Variant::NoTpm => "no_tpm",
            Variant::NoLftg => "no_lftg",
            Variant::Neither => "neither",
        }
    }

    /// Future-trajectory encoder and KL matching are active.
    pub fn uses_prior(self) -> bool {
        matches!(self, Variant::Full | Variant::NoEgoToAgent | Variant::NoLftg)
    }

    /// Step-by-step GRU rollout with a per-step waypoint decoder.
    pub fn uses_rollout(self) -> bool {
        matches!(self, Variant::Full | Variant::NoEgoToAgent | Variant::NoTpm)
    }

    pub fn masks_ego_to_agent(self) -> bool {
        self == Variant::NoEgoToAgent
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Mean,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub grid: GridConfig,
    /// Average-pool factor applied to the grid before map cross-attention.
    pub map_memory_pool: usize,
    pub num_map_tokens: usize,
    pub num_agent_slots: usize,
    pub map_points: usize,
    pub latent_dim: usize,
    pub gru_hidden: usize,
    pub gru_input: usize,
    pub horizon: usize,
    pub ego_hidden: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub head_hidden: usize,
    pub map_head_hidden: usize,
    /// Meters per unit of decoded positions in the detection and map heads.
    pub position_scale: f64,
    /// Meters per unit of decoded per-step displacements.
    pub displacement_scale: f64,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            attention: AttentionConfig::default(),
            grid: GridConfig::default(),
            map_memory_pool: 2,
            num_map_tokens: 16,
            num_agent_slots: 16,
            map_points: 20,
            latent_dim: 128,
            gru_hidden: 128,
            gru_input: 16,
            horizon: 6,
            ego_hidden: 64,
            encoder_hidden: 128,
            decoder_hidden: 64,
            head_hidden: 64,
            map_head_hidden: 128,
            position_scale: 10.0,
            displacement_scale: 5.0,
            log_sigma_min: -6.0,
            log_sigma_max: 4.0,
        }
    }
}

impl ModelConfig {
    /// Dimensions at the scale of the original full-size setup.
    pub fn paper_parity() -> Self {
        ModelConfig {
            attention: AttentionConfig {
                model_dim: 256,
                num_heads: 8,
                num_layers: 3,
                num_sample_points: 4,
            },
            grid: GridConfig {
                height: 100,
                width: 100,
                extent: 60.0,
            },
            map_memory_pool: 1,
            num_map_tokens: 100,
            num_agent_slots: 300,
            latent_dim: 512,
            gru_hidden: 512,
            encoder_hidden: 512,
            decoder_hidden: 256,
            head_hidden: 256,
            map_head_hidden: 256,
            ..Default::default()
        }
    }

    /// Tiny dimensions for gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            attention: AttentionConfig {
                model_dim: 4,
                num_heads: 2,
                num_layers: 1,
                num_sample_points: 2,
            },
            grid: GridConfig {
                height: 4,
                width: 4,
                extent: 60.0,
            },
            map_memory_pool: 1,
            num_map_tokens: 3,
            num_agent_slots: 3,
            map_points: 3,
            latent_dim: 3,
            gru_hidden: 3,
            gru_input: 2,
            horizon: 6,
            ego_hidden: 3,
            encoder_hidden: 3,
            decoder_hidden: 3,
            head_hidden: 3,
            map_head_hidden: 3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.grid.validate()?;
        let positive = [
            ("model.map_memory_pool", self.map_memory_pool),
            ("model.num_map_tokens", self.num_map_tokens),
            ("model.num_agent_slots", self.num_agent_slots),
            ("model.latent_dim", self.latent_dim),
            ("model.gru_input", self.gru_input),
            ("model.horizon", self.horizon),
            ("model.ego_hidden", self.ego_hidden),
            ("model.encoder_hidden", self.encoder_hidden),
            ("model.decoder_hidden", self.decoder_hidden),
            ("model.head_hidden", self.head_hidden),
            ("model.map_head_hidden", self.map_head_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.map_points < 2 {
            return Err(Error::config("model.map_points", "must be at least 2"));
        }
        if self.gru_hidden != self.latent_dim {
            return Err(Error::config(
                "model.gru_hidden",
                format!(
                    "must equal latent_dim {} (the latent is the GRU state)",
                    self.latent_dim
                ),
            ));
        }
        if self.grid.height % self.map_memory_pool != 0 || self.grid.width % self.map_memory_pool != 0 {
            return Err(Error::config("model.map_memory_pool", "must divide the grid size"));
        }
        if !(self.log_sigma_min < self.log_sigma_max) {
            return Err(Error::config("model.log_sigma_min", "must be below log_sigma_max"));
        }
        if !(self.position_scale > 0.0 && self.displacement_scale > 0.0) {
            return Err(Error::config("model.position_scale", "scales must be positive"));
        }
        Ok(())
    }
}

/// Balance factors of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub plan: f64,
    pub map: f64,
    pub det: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            plan: 1.0,
            map: 1.0,
            det: 1.0,
            class: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("weights.plan", self.plan),
            ("weights.map", self.map),
            ("weights.det", self.det),
            ("weights.class", self.class),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(f, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Constants of the ego trajectory constraints and the auxiliary heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub safe_distance: f64,
    pub collision_weight: f64,
    pub boundary_weight: f64,
    pub lane_dir_weight: f64,
    pub focal: FocalParams,
    pub match_pos_weight: f64,
    pub match_cls_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            safe_distance: 0.5,
            collision_weight: 1.0,
            boundary_weight: 1.0,
            lane_dir_weight: 1.0,
            focal: FocalParams::default(),
            match_pos_weight: 1.0,
            match_cls_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub grad_accumulation: usize,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 2e-4,
            optimizer: AdamWConfig::default(),
            grad_accumulation: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.grad_accumulation == 0 {
            return Err(Error::config("train.grad_accumulation", "must be at least 1"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("train.optimizer.beta1", "betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::config(
                "train.optimizer.eps",
                "eps must be positive, weight decay non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// First generator seed of the training split; the test split follows.
    pub first_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 512,
            test_scenes: 128,
            first_seed: 0,
        }
    }
}

/// Everything a run depends on. Serialized verbatim into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub sample_mode: SampleMode,
    pub scene: SceneGenConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub loss: LossParams,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Full,
            sample_mode: SampleMode::Mean,
            scene: SceneGenConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            loss: LossParams::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn paper_parity() -> Self {
        RunConfig {
            model: ModelConfig::paper_parity(),
            train: TrainConfig {
                epochs: 60,
                grad_accumulation: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        if self.loss.safe_distance < 0.0 {
            return Err(Error::config("loss.safe_distance", "must be non-negative"));
        }
        if !(self.loss.focal.gamma >= 0.0) || !(self.loss.focal.alpha > 0.0 && self.loss.focal.alpha <= 1.0) {
            return Err(Error::config("loss.focal", "need gamma >= 0 and alpha in (0, 1]"));
        }
        Ok(())
    }

    /// Loss weights after the variant's switches: without the prior there
    /// is no plan term.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.variant.uses_prior() {
            w.plan = 0.0;
        }
        w
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_parse_and_print() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("no-tpm".parse::<Variant>().unwrap(), Variant::NoTpm);
        assert!(matches!("bogus".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::paper_parity().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn weights_default_to_one() {
        let w = LossWeights::default();
        assert_eq!((w.plan, w.map, w.det, w.class), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_prior_variants_drop_the_plan_term() {
        let mut c = RunConfig::default();
        c.variant = Variant::NoTpm;
        assert_eq!(c.effective_weights().plan, 0.0);
        c.variant = Variant::Neither;
        assert_eq!(c.effective_weights().plan, 0.0);
        c.variant = Variant::NoLftg;
        assert_eq!(c.effective_weights().plan, 1.0);
    }

    #[test]
    fn mismatched_gru_width_is_a_config_error() {
        let m = ModelConfig {
            gru_hidden: 64,
            ..Default::default()
        };
        match m.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.gru_hidden"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::paper_parity();
        let back: RunConfig = serde_json::from_value(c.echo()).unwrap();
        assert_eq!(back, c);
    }
}
