//! Run configuration: every hyper-parameter and ablation switch, with presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::GenConfig;
use crate::glyphs::bundled_font_path;
use crate::nnblocks::BlockConfig;
use crate::params::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub block: BlockConfig,
    pub use_vit: bool,
    pub use_cpe: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { alpha: 0.7, beta: 0.7 }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 10.0) {
                return Err(Error::Config(format!("balance.{name} must be in (0, 10], got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-network learning rates replacing `adam.lr` where set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrOverrides {
    pub gen: Option<f64>,
    pub disc: Option<f64>,
    pub recog: Option<f64>,
    pub writerid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub font: PathBuf,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub split: Option<PathBuf>,
    pub generator: GenConfig,
    pub writerid: NetConfig,
    pub recognizer: NetConfig,
    pub disc_channels: usize,
    #[serde(default)]
    pub balance: BalanceConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub lr: LrOverrides,
    pub seed: u64,
    pub batch_size: usize,
    /// Style images per conditioning set.
    pub style_size: usize,
    pub steps: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
}

impl RunConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        let block = BlockConfig::desk();
        Self {
            font: bundled_font_path(),
            manifest: None,
            split: None,
            generator: GenConfig::default(),
            writerid: NetConfig {
                block,
                use_vit: true,
                use_cpe: true,
            },
            recognizer: NetConfig {
                block,
                use_vit: true,
                use_cpe: true,
            },
            disc_channels: 32,
            balance: BalanceConfig::default(),
            adam: AdamConfig::default(),
            lr: LrOverrides::default(),
            seed: 0,
            batch_size: 8,
            style_size: 15,
            steps: 10_000,
            log_interval: 10,
            checkpoint_interval: 1000,
        }
    }

    /// Small enough for a few thousand steps on one CPU core.
    pub fn smoke() -> Self {
        let block = BlockConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_layers: 1,
            dropout: 0.0,
        };
        let mut c = Self::desk();
        c.generator.block = block;
        c.generator.min_channels = 8;
        c.writerid.block = block;
        c.recognizer.block = block;
        c.disc_channels = 8;
        c.adam.lr = 1e-4;
        c.lr.recog = Some(1e-3);
        c.lr.writerid = Some(1e-3);
        c.batch_size = 2;
        c.style_size = 2;
        c.steps = 2000;
        c.log_interval = 10;
        c.checkpoint_interval = 500;
        c
    }

    /// Full-scale widths (about 52 MB for generator plus writer identifier).
    pub fn large() -> Self {
        let block = BlockConfig::large();
        let mut c = Self::desk();
        c.generator.block = block;
        c.generator.min_channels = 16;
        c.writerid.block = BlockConfig { n_layers: 3, ..block };
        c.recognizer.block = block;
        c.batch_size = 8;
        c.style_size = 15;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, smoke, large)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.font.as_os_str().is_empty() {
            return Err(Error::Config("field `font` is empty".into()));
        }
        self.generator.validate()?;
        self.writerid.block.validate()?;
        self.recognizer.block.validate()?;
        self.balance.validate()?;
        if self.writerid.block.d_model != self.generator.block.d_model {
            return Err(Error::Config(format!(
                "writerid.block.d_model ({}) must equal generator.block.d_model ({})",
                self.writerid.block.d_model, self.generator.block.d_model
            )));
        }
        let checks = [
            ("disc_channels", self.disc_channels as u64),
            ("batch_size", self.batch_size as u64),
            ("style_size", self.style_size as u64),
            ("log_interval", self.log_interval),
            ("checkpoint_interval", self.checkpoint_interval),
        ];
        for (name, v) in checks {
            if v == 0 {
                return Err(Error::Config(format!("field `{name}` must be positive")));
            }
        }
        let lrs = [
            ("adam.lr", Some(self.adam.lr)),
            ("lr.gen", self.lr.gen),
            ("lr.disc", self.lr.disc),
            ("lr.recog", self.lr.recog),
            ("lr.writerid", self.lr.writerid),
        ];
        for (name, v) in lrs {
            if v.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("field `{name}` must be positive")));
            }
        }
        Ok(())
    }

    /// Parses JSON and resolves relative paths against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base_dir.join(&*p);
            }
        };
        fix(&mut c.font);
        if let Some(m) = c.manifest.as_mut() {
            fix(m);
        }
        if let Some(s) = c.split.as_mut() {
            fix(s);
        }
        c.validate()?;
        Ok(c)
    }

    /// Optimizer settings for one network (`gen`, `disc`, `recog` or `writerid`).
    pub fn adam_for(&self, net: &str) -> AdamConfig {
        let over = match net {
            "gen" => self.lr.gen,
            "disc" => self.lr.disc,
            "recog" => self.lr.recog,
            "writerid" => self.lr.writerid,
            _ => None,
        };
        AdamConfig {
            lr: over.unwrap_or(self.adam.lr),
            ..self.adam
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Cumulative architecture steps of the ablation sweep, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    VitGenerator,
    MultiScale,
    VitRecognizerWriterid,
}

impl AblationAxis {
    pub const ORDER: [AblationAxis; 3] = [
        AblationAxis::VitGenerator,
        AblationAxis::MultiScale,
        AblationAxis::VitRecognizerWriterid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::VitGenerator => "vit_generator",
            AblationAxis::MultiScale => "multi_scale",
            AblationAxis::VitRecognizerWriterid => "vit_recognizer_writerid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ORDER
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }

    fn apply(self, c: &mut RunConfig) {
        match self {
            AblationAxis::VitGenerator => c.generator.use_vit = true,
            AblationAxis::MultiScale => c.generator.n_scales = 2,
            AblationAxis::VitRecognizerWriterid => {
                c.recognizer.use_vit = true;
                c.writerid.use_vit = true;
            }
        }
    }
}

/// The base variant (every axis off) followed by one variant per enabled
/// axis, each adding to the previous one. Axes are applied in canonical
/// order whatever order they are given in.
pub fn ablation_variants(base: &RunConfig, axes: &[AblationAxis]) -> Vec<(String, RunConfig)> {
    let mut c = base.clone();
    c.generator.use_vit = false;
    c.generator.n_scales = 1;
    c.recognizer.use_vit = false;
    c.writerid.use_vit = false;
    let mut out = vec![("base".to_string(), c.clone())];
    let mut label = "base".to_string();
    for axis in AblationAxis::ORDER {
        if axes.contains(&axis) {
            axis.apply(&mut c);
            label = format!("{label}+{}", axis.name());
            out.push((label.clone(), c.clone()));
        }
    }
    out
}
