//! Run configuration, read from a TOML key-value file.
//!
//! Every key has a default, so an empty file (or no file) describes the
//! default desk-scale world and pipeline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

/// Half-open range of noise seeds, written `A..B` on the command line and
/// `[A, B]` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub const fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn iter(&self) -> std::ops::Range<u64> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[u64; 2]> for SeedRange {
    fn from(v: [u64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<SeedRange> for [u64; 2] {
    fn from(r: SeedRange) -> Self {
        [r.start, r.end]
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got `{s}`"))?;
        let start = a.trim().parse().map_err(|e| format!("bad range start `{a}`: {e}"))?;
        let end = b.trim().parse().map_err(|e| format!("bad range end `{b}`: {e}"))?;
        if end <= start {
            return Err(format!("empty seed range `{s}`"));
        }
        Ok(Self::new(start, end))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Latent shape `[C, H, W]`.
    pub latent_shape: [usize; 3],
    pub d_txt: usize,
    pub n_tokens: usize,
    pub n_prompts: usize,
    /// Inclusive `[min, max]` number of tokens per prompt.
    pub tokens_per_prompt: [usize; 2],
    pub world_seed: u64,
    /// Latent coordinates each token's predicate looks at.
    pub axes_per_token: usize,
    /// Size of the predicate projection (leading latent coordinates);
    /// 0 means `n_tokens * axes_per_token`.
    pub proj_dim: usize,
    pub token_radius: f64,
    /// Radius, as a fraction of `token_radius`, inside which a token scores 9.
    pub core_fraction: f64,
    /// Distance of each token's region center from the origin.
    pub center_norm: f64,
    /// Distance, as a fraction of `token_radius`, between a token's region
    /// center and where the data places that attribute.
    pub token_offset: f64,
    pub components_per_prompt: usize,
    /// Per-axis standard deviation of the data around a token center.
    pub token_std: f64,
    pub background_std: f64,
    pub background_mean_scale: f64,
    /// Per-axis spread of component means around token centers, as a fraction
    /// of `token_radius`.
    pub mean_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            latent_shape: [4, 8, 8],
            d_txt: 32,
            n_tokens: 8,
            n_prompts: 5,
            tokens_per_prompt: [2, 4],
            world_seed: 7,
            axes_per_token: 2,
            proj_dim: 0,
            token_radius: 1.5,
            core_fraction: 0.25,
            center_norm: 2.0,
            token_offset: 0.6,
            components_per_prompt: 2,
            token_std: 0.5,
            background_std: 1.0,
            background_mean_scale: 1.0,
            mean_jitter: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn latent_len(&self) -> usize {
        self.latent_shape.iter().product()
    }

    pub fn effective_proj_dim(&self) -> usize {
        if self.proj_dim == 0 {
            self.n_tokens * self.axes_per_token
        } else {
            self.proj_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Sampling steps.
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Length of the fine grid on which the linear betas are defined.
    pub train_steps: usize,
    pub cfg_w: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            train_steps: 1000,
            cfg_w: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Soft,
    Top1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub routing: Routing,
    /// Channels at full and half resolution inside the UNet.
    pub unet_channels: [usize; 2],
    pub feature_channels: usize,
    pub reward_hidden: usize,
    pub decoder_hidden: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_experts: 4,
            expert_hidden: 32,
            routing: Routing::Soft,
            unet_channels: [16, 32],
            feature_channels: 16,
            reward_hidden: 32,
            decoder_hidden: 16,
            sigma_min: 0.1,
            sigma_max: 3.0,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub seeds: SeedRange,
    /// Every `holdout_every`-th seed of the range is held out.
    pub holdout_every: u64,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate at the last epoch, as a fraction of `lr` (cosine decay).
    pub min_lr_fraction: f64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            seeds: SeedRange::new(0, 300),
            holdout_every: 10,
            epochs: 20,
            lr: 3e-3,
            min_lr_fraction: 0.1,
            batch_size: 32,
            shuffle_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    /// KL weight inside the constraint loss.
    pub lambda: f64,
    /// Weight of the constraint in the final objective.
    pub tau: f64,
    pub beta_dpo: f64,
    pub w_max: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub final_lr: f64,
    pub final_epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub train_seeds: SeedRange,
    /// Prompts trained on; empty means every prompt of the world.
    pub prompts: Vec<usize>,
    pub shuffle_seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 200.0,
            beta_dpo: 1.0,
            w_max: 5.0,
            warmup_lr: 1e-3,
            warmup_epochs: 4,
            final_lr: 1e-3,
            final_epochs: 30,
            batch_size: 16,
            clip_norm: 1.0,
            train_seeds: SeedRange::new(0, 100),
            prompts: Vec::new(),
            shuffle_seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seen_seeds: SeedRange,
    pub unseen_seeds: SeedRange,
    pub probe_seeds: SeedRange,
    pub diversity_samples: usize,
    pub diversity_seed_start: u64,
    pub diversity_prompt: usize,
    pub fid_reshuffles: usize,
    pub is_folds: usize,
    pub fold_seed: u64,
    pub ablation_taus: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seen_seeds: SeedRange::new(0, 50),
            unseen_seeds: SeedRange::new(350, 500),
            probe_seeds: SeedRange::new(350, 370),
            diversity_samples: 1000,
            diversity_seed_start: 1000,
            diversity_prompt: 0,
            fid_reshuffles: 10,
            is_folds: 10,
            fold_seed: 5,
            ablation_taus: vec![100.0, 200.0, 300.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub backbone: BackboneConfig,
    pub reward: RewardTrainConfig,
    pub projector: ProjectorConfig,
    pub eval: EvalConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config values serialize"))
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        json_hash(self)
    }

    /// Hash of the sections that fix what model parameters mean: the world,
    /// the sampler and the network layout. Training hyperparameters are
    /// excluded so one warmup checkpoint can seed runs with different `tau`.
    pub fn model_hash(&self) -> String {
        json_hash(&(&self.world, &self.schedule, &self.backbone))
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        let bad = |msg: String| Err(Error::Config(msg));
        if w.latent_shape.iter().any(|&d| d == 0) || w.d_txt == 0 || w.n_tokens == 0 || w.n_prompts == 0 {
            return bad("world dimensions must be positive".into());
        }
        let [tmin, tmax] = w.tokens_per_prompt;
        if tmin == 0 || tmin > tmax || tmax > w.n_tokens {
            return bad(format!("tokens_per_prompt {:?} incompatible with {} tokens", w.tokens_per_prompt, w.n_tokens));
        }
        if w.axes_per_token == 0 || w.effective_proj_dim() > w.latent_len() || w.axes_per_token > w.effective_proj_dim() {
            return bad("predicate projection does not fit the latent".into());
        }
        if !(w.token_radius > 0.0) || !(w.core_fraction >= 0.0 && w.core_fraction < 1.0) {
            return bad("token_radius must be positive and core_fraction in [0, 1)".into());
        }
        if !(w.token_offset >= 0.0 && w.token_offset < 1.0) {
            return bad("token_offset must lie in [0, 1)".into());
        }
        if w.components_per_prompt == 0 || !(w.token_std >= 0.0) || !(w.background_std >= 0.0) {
            return bad("mixture settings must be non-negative with at least one component".into());
        }
        let s = &self.schedule;
        if s.steps < 2 || s.train_steps < s.steps || !(s.beta_min > 0.0 && s.beta_max < 1.0 && s.beta_min <= s.beta_max) {
            return bad("schedule needs 2 <= T <= train_steps and 0 < beta_min <= beta_max < 1".into());
        }
        if !s.cfg_w.is_finite() || s.cfg_w < 0.0 {
            return bad("cfg_w must be finite and non-negative".into());
        }
        let b = &self.backbone;
        if [b.d_model, b.n_heads, b.n_experts, b.expert_hidden, b.feature_channels, b.reward_hidden, b.decoder_hidden]
            .contains(&0)
            || b.unet_channels.contains(&0)
        {
            return bad("backbone sizes must be positive".into());
        }
        if b.d_model % b.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", b.d_model, b.n_heads));
        }
        if w.latent_shape[1] % 2 != 0 || w.latent_shape[2] % 2 != 0 {
            return bad(format!("UNet needs even spatial size, got {:?}", w.latent_shape));
        }
        if !(b.sigma_min > 0.0 && b.sigma_min <= 1.0 && b.sigma_max >= 1.0) {
            return bad("sigma clamp must satisfy 0 < sigma_min <= 1 <= sigma_max".into());
        }
        let p = &self.projector;
        if p.tau < 0.0 || p.w_max <= 1.0 || p.beta_dpo <= 0.0 || p.lambda < 0.0 {
            return bad("need tau >= 0, w_max > 1, beta_dpo > 0, lambda >= 0".into());
        }
        if p.batch_size == 0 || self.reward.batch_size == 0 || self.reward.holdout_every < 2 {
            return bad("batch sizes must be positive and holdout_every >= 2".into());
        }
        if !(self.reward.lr > 0.0 && self.reward.min_lr_fraction > 0.0 && self.reward.min_lr_fraction <= 1.0) {
            return bad("reward lr must be positive and min_lr_fraction in (0, 1]".into());
        }
        if p.train_seeds.is_empty() || self.reward.seeds.is_empty() {
            return bad("seed ranges must be non-empty".into());
        }
        Ok(())
    }
}
