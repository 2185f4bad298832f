//! Run configuration, metric reports, grid search and the staged pipeline
//! that ties generation, mining, retraining, Fix, TTA and fusion together.

mod grid;
mod pipeline;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenSpec;
use crate::error::{ensure, Error, Result};
use crate::fusion::FusionPlan;
use crate::mining::{ClusterConfig, MiningConfig, Thresholds};
use crate::model::{AugmentFlags, TrainConfig};
use crate::seed;

pub use grid::{grid_search, grid_search_with, GridCell, GridResult};
pub use pipeline::{read_summary, run_pipeline, run_pipeline_from, RunSummary, STAGES};
pub use report::{
    emit_report, parse_report_csv, render_report, round1, top1_error, MetricsReport, MiningRow,
    ReportFormat, ReportRow,
};

/// Environment variable that replaces every seed in a [`RunConfig`].
pub const SEED_ENV: &str = "FINEMINE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generic,
    Finegrained,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Generic => "generic",
            Role::Finegrained => "finegrained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRole {
    pub seed: u64,
    pub role: Role,
    #[serde(default)]
    pub augment: AugmentFlags,
    /// Training crop; `None` keeps `train.crop_size`.
    #[serde(default)]
    pub crop_size: Option<usize>,
}

impl ModelRole {
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            augment: self.augment.clone(),
            crop_size: self.crop_size.unwrap_or(base.crop_size),
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningStage {
    pub thresholds: Thresholds,
    pub max_rounds: usize,
    pub converge_tol: f64,
    /// One mining model per seed, in both branches.
    pub seeds: Vec<u64>,
}

impl Default for MiningStage {
    fn default() -> Self {
        let base = MiningConfig::default();
        MiningStage {
            thresholds: base.thresholds,
            max_rounds: base.max_rounds,
            converge_tol: base.converge_tol,
            seeds: vec![101, 102, 103],
        }
    }
}

impl MiningStage {
    pub fn config(&self) -> MiningConfig {
        MiningConfig {
            thresholds: self.thresholds.clone(),
            max_rounds: self.max_rounds,
            converge_tol: self.converge_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterStage {
    pub k: Option<usize>,
    pub max_iters: usize,
    pub holdout_fraction: f64,
    /// Pretraining epochs over the out-of-class split.
    pub epochs: usize,
}

impl ClusterStage {
    /// Pretraining schedule: the base config run for `epochs`, with the
    /// warmup cut short when the run is shorter than it.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: base.warmup_epochs.min(self.epochs.saturating_sub(1)),
            ..base.clone()
        }
    }
}

impl Default for ClusterStage {
    fn default() -> Self {
        let base = ClusterConfig::default();
        ClusterStage { k: base.k, max_iters: base.max_iters, holdout_fraction: base.holdout_fraction, epochs: 20 }
    }
}

impl ClusterStage {
    pub fn config(&self) -> ClusterConfig {
        ClusterConfig { k: self.k, max_iters: self.max_iters, holdout_fraction: self.holdout_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixStage {
    pub enabled: bool,
    pub high_resolution: usize,
    pub epochs: usize,
    pub base_lr: f64,
}

impl Default for FixStage {
    fn default() -> Self {
        FixStage { enabled: false, high_resolution: 64, epochs: 30, base_lr: 1.0 }
    }
}

impl FixStage {
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            base_lr: self.base_lr,
            warmup_epochs: 0,
            augment: AugmentFlags::default(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TtaMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "three")]
    Three,
    #[serde(rename = "144")]
    Crops144,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaStage {
    pub mode: TtaMode,
    /// Shorter-side resize before cropping; `None` uses the model resolution.
    pub resize_to: Option<usize>,
    /// Crop side; `None` uses the model resolution.
    pub crop: Option<usize>,
    /// Scales for the 144-crop mode; `None` derives them from the resolution.
    pub scales: Option<[usize; 4]>,
    pub seed: u64,
}

impl Default for TtaStage {
    fn default() -> Self {
        TtaStage { mode: TtaMode::Three, resize_to: None, crop: None, scales: None, seed: 0 }
    }
}

impl TtaStage {
    pub fn resize_for(&self, resolution: usize) -> usize {
        self.resize_to.unwrap_or(resolution)
    }

    pub fn crop_for(&self, resolution: usize) -> usize {
        self.crop.unwrap_or(resolution)
    }

    pub fn scales_for(&self, resolution: usize) -> [usize; 4] {
        self.scales.unwrap_or([
            resolution,
            resolution + resolution / 8,
            resolution + resolution / 4,
            resolution + 3 * resolution / 8,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenSpec,
    pub train: TrainConfig,
    pub mining: MiningStage,
    pub cluster: ClusterStage,
    pub fix: FixStage,
    pub tta: TtaStage,
    pub fusion: FusionPlan,
    pub model_roles: Vec<ModelRole>,
    pub output_dir: PathBuf,
}

/// Training settings sized for one CPU core and 300 labeled images.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig { epochs: 100, batch_size: 32, base_lr: 0.5, warmup_epochs: 10, class_balanced: true, ..TrainConfig::default() }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenSpec::default(),
            train: desk_train_config(),
            mining: MiningStage::default(),
            cluster: ClusterStage::default(),
            fix: FixStage::default(),
            tta: TtaStage::default(),
            fusion: FusionPlan { area_thresholds: (0.1, 0.15), ..FusionPlan::default() },
            model_roles: vec![
                ModelRole {
                    seed: 1,
                    role: Role::Generic,
                    augment: AugmentFlags::default(),
                    crop_size: None,
                },
                ModelRole {
                    seed: 2,
                    role: Role::Finegrained,
                    augment: AugmentFlags { rcm: true, ..AugmentFlags::default() },
                    crop_size: None,
                },
            ],
            output_dir: PathBuf::from("runs/desk"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Index of the first model of each role, as used by retraining and fusion.
    pub fn role_index(&self, role: Role) -> Option<usize> {
        self.model_roles.iter().position(|m| m.role == role)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.mining.config().validate()?;
        ensure(!self.mining.seeds.is_empty(), || "mining.seeds must not be empty".into())?;
        self.cluster.config().validate()?;
        ensure(self.cluster.epochs >= 1, || "cluster.epochs must be at least 1".into())?;
        self.fusion.validate()?;
        for role in [Role::Generic, Role::Finegrained] {
            ensure(self.role_index(role).is_some(), || {
                format!("model_roles needs at least one {} model for fusion", role.name())
            })?;
        }
        for m in &self.model_roles {
            m.train_config(&self.train).validate()?;
        }
        if !self.fusion.model_weights.is_empty() {
            ensure(self.fusion.model_weights.len() == 2, || {
                "fusion.model_weights must hold two weights (generic, finegrained)".into()
            })?;
        }
        if self.fix.enabled {
            let max_crop = self.model_roles.iter().map(|m| m.crop_size.unwrap_or(self.train.crop_size)).max();
            ensure(max_crop.is_some_and(|c| self.fix.high_resolution > c), || {
                format!(
                    "fix.high_resolution ({}) must exceed every training crop size",
                    self.fix.high_resolution
                )
            })?;
            self.fix.train_config(&self.train).validate()?;
        }
        ensure(self.tta.resize_to.is_none_or(|r| r >= crate::image::MIN_SIDE), || {
            "tta.resize_to is too small".into()
        })?;
        ensure(self.tta.crop.is_none_or(|c| c >= crate::image::MIN_SIDE), || "tta.crop is too small".into())?;
        if let (Some(r), Some(c)) = (self.tta.resize_to, self.tta.crop) {
            ensure(c <= r, || format!("tta.crop ({c}) exceeds tta.resize_to ({r})"))?;
        }
        ensure(!self.output_dir.as_os_str().is_empty(), || "output_dir must be set".into())
    }

    /// Replaces every seed with one derived from `master`, keeping distinct
    /// fields distinct.
    pub fn override_seeds(&mut self, master: u64) {
        self.gen.seed = seed::derive(master, "gen", 0);
        self.train.seed = seed::derive(master, "train", 0);
        self.tta.seed = seed::derive(master, "tta", 0);
        for (i, s) in self.mining.seeds.iter_mut().enumerate() {
            *s = seed::derive(master, "mining", i as u64);
        }
        for (i, m) in self.model_roles.iter_mut().enumerate() {
            m.seed = seed::derive(master, "role", i as u64);
        }
    }

    /// Applies `FINEMINE_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let master = v
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| Error::validation(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
                self.override_seeds(master);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::validation(format!("{SEED_ENV}: {e}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json(), "t").unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}", "t").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"trian": {}}"#, "t").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#, "t").is_err());
        assert!(RunConfig::from_json(r#"{"tta": {"mode": "seven"}}"#, "t").is_err());
        let cfg = RunConfig::from_json(r#"{"tta": {"mode": "144"}}"#, "t").unwrap();
        assert_eq!(cfg.tta.mode, TtaMode::Crops144);
    }

    #[test]
    fn roles_and_resolutions_are_checked() {
        let mut cfg = RunConfig::default();
        cfg.model_roles.retain(|m| m.role == Role::Generic);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.fix.enabled = true;
        cfg.fix.high_resolution = 32;
        assert!(cfg.validate().is_err());
        cfg.fix.high_resolution = 48;
        cfg.validate().unwrap();
        let mut cfg = RunConfig::default();
        cfg.mining.max_rounds = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override_touches_every_seed() {
        let mut a = RunConfig::default();
        a.override_seeds(7);
        let mut b = RunConfig::default();
        b.override_seeds(8);
        assert_ne!(a.gen.seed, b.gen.seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert!(a.mining.seeds.iter().zip(&b.mining.seeds).all(|(x, y)| x != y));
        assert!(a.model_roles.iter().zip(&b.model_roles).all(|(x, y)| x.seed != y.seed));
        let mut seeds = a.mining.seeds.clone();
        seeds.dedup();
        assert_eq!(seeds.len(), 3);
    }
}
