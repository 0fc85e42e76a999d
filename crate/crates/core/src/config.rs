//! Versioned run configuration, stored as TOML.
//!
//! ```toml
//! version = 1
//! output = "runs/demo"
//!
//! [data]
//! root = "data/synthetic"     # one scene directory or a directory of scenes
//!
//! [train]
//! epochs = 15
//! learning_rate = 1e-4
//!
//! [backbone]  # cascade shape
//! [renderer]  # rays, samples, MLP size, switches
//! [loss]      # weights and enable flags
//! [jitter]    # augmentation ranges
//! [fusion]    # filtering thresholds
//! ```
//! Every section is optional and falls back to its defaults; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion_eval::FusionConfig;
use crate::imgproc::JitterConfig;
use crate::losses::{LossFlags, LossWeights};
use crate::renderer::RendererConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// A scene directory (containing `pair.txt`) or a directory whose
    /// subdirectories are scenes.
    pub root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Directory for checkpoints and the metric log.
    #[serde(default)]
    pub output: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub renderer: RendererConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub jitter: JitterConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            output: PathBuf::from("run"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            backbone: BackboneConfig::default(),
            renderer: RendererConfig::default(),
            loss: LossWeights::default(),
            jitter: JitterConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

/// Loss-term combinations of the ablation study. Mixture sampling only
/// matters when the renderer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Photometric consistency only.
    Pc,
    /// + data augmentation.
    PcDa,
    /// + reference view synthesis, uniform ray samples.
    PcDaRc,
    /// + Gaussian-uniform mixture sampling.
    PcDaRcGu,
    /// + depth rendering consistency (the full model).
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Pc, Ablation::PcDa, Ablation::PcDaRc, Ablation::PcDaRcGu, Ablation::Full];

    pub fn apply(self, cfg: &mut RunConfig) {
        use Ablation::*;
        let keep = |a: &[Ablation]| a.contains(&self);
        cfg.loss.enable = LossFlags {
            pc: true,
            ssim: true,
            smooth: true,
            da: !matches!(self, Pc),
            rc: keep(&[PcDaRc, PcDaRcGu, Full]),
            dc: matches!(self, Full),
        };
        cfg.renderer.gaussian_uniform = keep(&[PcDaRcGu, Full]);
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        self.train.validate()?;
        self.backbone.validate()?;
        self.renderer.validate()?;
        self.loss.validate()?;
        self.fusion.validate()?;
        if self.jitter.gamma_min <= 0.0 || self.jitter.gamma_max < self.jitter.gamma_min {
            return Err(Error::Config("jitter gamma range must satisfy 0 < min ≤ max".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate; relative data/output paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.root, &mut cfg.output] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_toml_str("version = 1\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.renderer, RendererConfig::default());
        assert!(RunConfig::from_toml_str("version = 1\n[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml_str("version = 2\n").is_err());
    }

    #[test]
    fn ablation_rows() {
        let mut cfg = RunConfig::default();
        Ablation::PcDa.apply(&mut cfg);
        assert!(cfg.loss.enable.da && !cfg.loss.enable.rc && !cfg.loss.enable.needs_renderer());
        Ablation::PcDaRc.apply(&mut cfg);
        assert!(cfg.loss.enable.rc && !cfg.renderer.gaussian_uniform && !cfg.loss.enable.dc);
        Ablation::Full.apply(&mut cfg);
        assert_eq!(cfg.loss.enable, LossFlags::default());
        assert!(cfg.renderer.gaussian_uniform);
    }
}
