//! JSON configuration: `{world, encoders, aligner, fuser, thinker, train, audit}`.
//! Every section and field has a default, so partial files are accepted.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of object colours; images carry one extra channel for the gripper.
    pub n_colors: usize,
    pub n_views: usize,
    pub horizon: usize,
    pub chunk: usize,
    pub step_size: f64,
    pub gain: f64,
    pub capture_radius: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub gripper_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_size: 16,
            patch_size: 4,
            n_colors: 4,
            n_views: 3,
            horizon: 32,
            chunk: 8,
            step_size: 0.05,
            gain: 10.0,
            capture_radius: 0.06,
            min_distractors: 1,
            max_distractors: 3,
            min_radius: 0.07,
            max_radius: 0.1,
            gripper_radius: 0.05,
        }
    }
}

impl WorldConfig {
    pub const ACTION_DIM: usize = 2;

    pub fn channels(&self) -> usize {
        self.n_colors + 1
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels()
    }

    pub fn chunks(&self) -> usize {
        self.horizon.div_ceil(self.chunk)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(1..=3).contains(&self.n_views) {
            return Err(Error::config(format!("n_views must be 1..=3, got {}", self.n_views)));
        }
        if self.chunk == 0 || self.horizon == 0 {
            return Err(Error::config("chunk and horizon must be positive"));
        }
        if self.max_distractors + 1 > self.n_colors || self.min_distractors > self.max_distractors {
            return Err(Error::config("distractor range does not fit the colour palette"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub semantic_layers: usize,
    /// Depth of the geometric and spatial streams.
    pub geo_layers: usize,
    pub d_instr: usize,
    /// Seed for the frozen spatial stream, independent of the training seed.
    pub spatial_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 32,
            heads: 4,
            ffn_mult: 2,
            semantic_layers: 2,
            geo_layers: 2,
            d_instr: 16,
            spatial_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignerConfig {
    pub k: usize,
    pub fusion_layers: usize,
    pub heads: usize,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            k: 2,
            fusion_layers: 1,
            heads: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BcLayout {
    /// Geometry block (all views, bidirectional) then aggregation block.
    TwoBlock,
    /// geo(M) -> geo(L) -> geo(R) -> agg, each block sees itself and earlier blocks.
    PerViewCausal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuserConfig {
    pub psi: f64,
    pub delta: f64,
    pub schedule: ScheduleKind,
    pub n_agg: usize,
    pub layout: BcLayout,
}

impl Default for FuserConfig {
    fn default() -> Self {
        FuserConfig {
            psi: 0.2,
            delta: 0.05,
            schedule: ScheduleKind::Cosine,
            n_agg: 8,
            layout: BcLayout::TwoBlock,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Sc,
    Causal,
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThinkerConfig {
    pub layers: usize,
    pub heads: usize,
    pub n_dyn: usize,
    pub n_dep: usize,
    pub decoder_layers: usize,
    pub attention: AttentionMode,
}

impl Default for ThinkerConfig {
    fn default() -> Self {
        ThinkerConfig {
            layers: 2,
            heads: 4,
            n_dyn: 4,
            n_dep: 4,
            decoder_layers: 2,
            attention: AttentionMode::Sc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub enable_dyn: bool,
    pub enable_dep: bool,
    pub smoothing_window: usize,
    pub log_every: usize,
    pub episodes: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 3000,
            batch_size: 16,
            seed: 0,
            enable_dyn: true,
            enable_dep: true,
            smoothing_window: 100,
            log_every: 100,
            episodes: 500,
            eval_episodes: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimPreset {
    Toy,
    PaperDims,
}

impl std::str::FromStr for DimPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(DimPreset::Toy),
            "paper-dims" | "paper" => Ok(DimPreset::PaperDims),
            other => Err(Error::config(format!("unknown preset `{other}` (expected toy | paper-dims)"))),
        }
    }
}

/// Dynamic+depth query budget at full scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryBudget {
    /// 3x4 dynamic + 4 depth = 16.
    Sixteen,
    /// 18 total (dynamic 3x4 + depth 6).
    Eighteen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub preset: DimPreset,
    pub query_budget: QueryBudget,
    /// Instruction tokens assumed in the backbone sequence at full scale.
    pub paper_instruction_tokens: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            preset: DimPreset::Toy,
            query_budget: QueryBudget::Sixteen,
            paper_instruction_tokens: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub world: WorldConfig,
    pub encoders: EncoderConfig,
    pub aligner: AlignerConfig,
    pub fuser: FuserConfig,
    pub thinker: ThinkerConfig,
    pub train: TrainConfig,
    pub audit: AuditConfig,
}

impl Config {
    /// The default desk-scale configuration.
    pub fn toy() -> Self {
        Config::default()
    }

    /// Two views and tiny widths, for finite-difference checks.
    pub fn micro() -> Self {
        let mut cfg = Config::default();
        cfg.world.n_views = 2;
        cfg.encoders = EncoderConfig {
            d_model: 8,
            heads: 2,
            ffn_mult: 2,
            semantic_layers: 1,
            geo_layers: 2,
            d_instr: 4,
            spatial_seed: 7,
        };
        cfg.aligner = AlignerConfig {
            k: 2,
            fusion_layers: 1,
            heads: 2,
        };
        cfg.fuser.n_agg = 2;
        cfg.thinker = ThinkerConfig {
            layers: 2,
            heads: 2,
            n_dyn: 2,
            n_dep: 2,
            decoder_layers: 1,
            attention: AttentionMode::Sc,
        };
        cfg.train.batch_size = 2;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let d = self.encoders.d_model;
        for (what, heads) in [
            ("encoders", self.encoders.heads),
            ("aligner", self.aligner.heads),
            ("thinker", self.thinker.heads),
        ] {
            if heads == 0 || d % heads != 0 {
                return Err(Error::config(format!("{what}: d_model {d} not divisible by {heads} heads")));
            }
        }
        if self.aligner.k == 0 || self.aligner.k > self.world.patches() {
            return Err(Error::config(format!(
                "aligner.k = {} must be in 1..={}",
                self.aligner.k,
                self.world.patches()
            )));
        }
        if self.encoders.geo_layers == 0 || self.aligner.fusion_layers == 0 {
            return Err(Error::config("geo_layers and fusion_layers must be positive"));
        }
        if !(self.fuser.psi > 0.0 && self.fuser.psi <= 1.0 && self.fuser.delta > 0.0 && self.fuser.delta < 1.0) {
            return Err(Error::config("fuser needs psi in (0,1] and delta in (0,1)"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        short_hash(self)
    }

    /// Hash of the sections that shape the model's parameters.
    pub fn model_hash(&self) -> String {
        short_hash(&(&self.world, &self.encoders, &self.aligner, &self.fuser, &self.thinker))
    }

    /// Hash of the world section alone; datasets depend on nothing else.
    pub fn world_hash(&self) -> String {
        short_hash(&self.world)
    }
}

fn short_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}
