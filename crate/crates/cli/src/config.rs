use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glyphscope::data::{default_class_names, AugmentConfig};
use glyphscope::explain::DEFAULT_ALPHA;
use glyphscope::nn::{ModelConfig, LAST_CONV_TAG};
use glyphscope::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding one sub-directory per class.
    pub root: Option<PathBuf>,
    /// Optional held-out set evaluated with the best checkpoint.
    pub test_root: Option<PathBuf>,
    /// Class directory names in label order.
    pub class_names: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            test_root: None,
            class_names: default_class_names(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub alpha: f64,
    pub layer: String,
    pub scale: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            layer: LAST_CONV_TAG.to_string(),
            scale: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub explain: ExplainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            explain: ExplainConfig::default(),
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub folds: Option<usize>,
}

impl RunConfig {
    /// Parses a JSON config. Relative paths are taken from the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.data.root, &mut cfg.data.test_root].into_iter().flatten() {
            rebase(p);
        }
        rebase(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                anyhow::anyhow!("{inner}")
            } else {
                anyhow::anyhow!("`{path}`: {inner}")
            }
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            log::info!("seed = {seed} (flag)");
            self.train.seed = seed;
            self.augment.seed = seed;
        }
        if let Some(out) = &o.out {
            log::info!("out_dir = {} (flag)", out.display());
            self.out_dir = out.clone();
        }
        if let Some(k) = o.folds {
            log::info!("train.k_folds = {k} (flag)");
            self.train.k_folds = k;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.data.class_names.len() != self.model.num_classes {
            bail!(
                "data.class_names lists {} classes but model.num_classes is {}",
                self.data.class_names.len(),
                self.model.num_classes
            );
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            bail!("explain.alpha must lie in [0, 1]");
        }
        if self.explain.scale == 0 {
            bail!("explain.scale must be at least 1");
        }
        Ok(())
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data.root.as_deref().context("data.root is not set")
    }
}
