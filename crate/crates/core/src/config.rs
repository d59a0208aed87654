//! Training configuration: a TOML file covering every knob, plus presets
//! and the ablation variants.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::FieldSpec;
use crate::geometry::{PoseBounds, TauRanges};
use crate::losses::{LossWeights, MiConfig};
use crate::rendering::{Deformable, RenderConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub patch_size: usize,
    /// Seen patches per step; `patch_size^2 * patches_per_batch` rays.
    pub patches_per_batch: usize,
    pub unseen_patches: usize,
    /// Perturbed copies per unseen patch.
    pub perturbations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub loss: LossWeights,
    pub mi: MiConfig,
    pub render: RenderConfig,
    pub field: FieldSpec,
    /// Perturbation half-widths; defaults scale with the unseen radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<TauRanges>,
    /// Where unseen poses come from; defaults to the upper hemisphere at
    /// the mean distance of the train cameras.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen_bounds: Option<PoseBounds>,
    /// Steps over which the consistency and smoothness weights ramp up
    /// linearly from zero; 0 means no ramp.
    pub unseen_ramp: usize,
    /// Unseen patches are cut from a pixel grid this many times finer than
    /// the train images (same field of view).
    pub unseen_resolution_scale: usize,
    /// Treat the unseen render as a constant target inside the PPC term.
    pub stop_grad_unseen: bool,
    /// Defaults to `iterations / 4`; 0 disables checkpoints.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            patch_size: 8,
            patches_per_batch: 16,
            unseen_patches: 16,
            perturbations: 1,
            lr_start: 1e-3,
            lr_end: 5e-5,
            loss: LossWeights::default(),
            mi: MiConfig::default(),
            render: RenderConfig::default(),
            field: FieldSpec::default(),
            tau: None,
            unseen_bounds: None,
            unseen_ramp: 0,
            unseen_resolution_scale: 1,
            stop_grad_unseen: false,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

/// Which of the two contributions a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain photometric training.
    Baseline,
    /// Deformable sampling with the offset loss.
    DsOnly,
    /// Perturbed unseen views with consistency and smoothness.
    SsnOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Baseline, Self::DsOnly, Self::SsnOnly, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::DsOnly => "ds-only",
            Self::SsnOnly => "ssn-only",
            Self::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    fn deformable(self) -> bool {
        matches!(self, Self::DsOnly | Self::Full)
    }

    fn unseen(self) -> bool {
        matches!(self, Self::SsnOnly | Self::Full)
    }

    /// Switches the contributions of `cfg` on or off, keeping the weights
    /// of the ones left on.
    pub fn apply(self, mut cfg: TrainConfig) -> TrainConfig {
        let d = LossWeights::default();
        if self.deformable() {
            if cfg.render.deformable == Deformable::Off {
                cfg.render.deformable = Deformable::Fine;
            }
            if cfg.loss.mu == 0.0 {
                cfg.loss.mu = d.mu;
            }
        } else {
            cfg.render.deformable = Deformable::Off;
            cfg.loss.mu = 0.0;
        }
        if self.unseen() {
            if cfg.loss.nu == 0.0 {
                cfg.loss.nu = d.nu;
            }
            if cfg.loss.smooth == 0.0 {
                cfg.loss.smooth = d.smooth;
            }
        } else {
            cfg.loss.nu = 0.0;
            cfg.loss.smooth = 0.0;
        }
        cfg
    }
}

impl TrainConfig {
    /// 20000 iterations with the large field.
    pub fn full_scale() -> Self {
        Self {
            iterations: 20000,
            render: RenderConfig {
                m_coarse: 128,
                m_fine: 128,
                ..RenderConfig::default()
            },
            field: FieldSpec::full_scale(),
            ..Self::default()
        }
    }

    /// Small batches, few samples and a narrow field: sized so a 2000-step
    /// run on a 32x32 scene takes a minute or two on one core. The higher
    /// start rate lets the short run fit its views; unseen patches come
    /// from a 16x finer grid so a 4x4 patch stays well inside one train
    /// pixel, and the smoothness weight is cut to 0.01.
    pub fn quick() -> Self {
        Self {
            lr_start: 1e-2,
            unseen_resolution_scale: 16,
            loss: LossWeights {
                smooth: 0.01,
                ..LossWeights::default()
            },
            patch_size: 4,
            patches_per_batch: 4,
            unseen_patches: 4,
            render: RenderConfig {
                m_coarse: 16,
                m_fine: 16,
                ..RenderConfig::default()
            },
            field: FieldSpec {
                pos_levels: 6,
                dir_levels: 2,
                trunk_width: 32,
                trunk_depth: 3,
                skip_layer: Some(2),
                color_width: 16,
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::default()),
            "quick" => Some(Self::quick()),
            "full-scale" => Some(Self::full_scale()),
            _ => None,
        }
    }

    pub fn rays_per_batch(&self) -> usize {
        self.patch_size * self.patch_size * self.patches_per_batch
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or(self.iterations / 4)
    }

    /// The unseen branch is skipped entirely when neither term uses it.
    pub fn uses_unseen(&self) -> bool {
        self.unseen_patches > 0 && (self.loss.nu != 0.0 || self.loss.smooth != 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.patch_size == 0 || self.patches_per_batch == 0 {
            return bad("patch_size and patches_per_batch must be positive");
        }
        if self.unseen_resolution_scale == 0 {
            return bad("unseen_resolution_scale must be at least 1");
        }
        if self.perturbations == 0 {
            return bad("perturbations must be at least 1");
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return bad("learning rates must be positive and finite");
        }
        let w = &self.loss;
        if [w.mu, w.nu, w.lambda, w.coarse_coef, w.smooth]
            .iter()
            .any(|x| !(*x >= 0.0 && x.is_finite()))
        {
            return bad("loss weights must be finite and non-negative");
        }
        self.mi.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.render.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.field.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let (Some(t), Some(b)) = (self.tau, self.unseen_bounds) {
            t.validate(b.radius).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str, path: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.into(),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: p.clone(),
            source,
        })?;
        Self::from_toml(&text, &p)
    }
}
