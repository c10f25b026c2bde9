use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use owseg_core::data::{generate_synthetic, load_coco, CategorySplit, Dataset, SceneSpec, Supervision};
use owseg_core::{EvalConfig, ModelConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::Overrides;

/// Where the images come from and how categories split into base and novel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `annotations.json` and the images it names. When absent
    /// the scenes are rendered in memory from `synthetic`.
    pub dir: Option<PathBuf>,
    pub synthetic: SceneSpec,
    pub num_images: usize,
    /// Category names; both empty means every category is base.
    pub base: Vec<String>,
    pub novel: Vec<String>,
    pub supervision: Supervision,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            synthetic: SceneSpec::default(),
            num_images: 16,
            base: Vec::new(),
            novel: Vec::new(),
            supervision: Supervision::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            eval_batch_size: 8,
        }
    }
}

/// Parses JSON, reporting the dotted path of the offending key on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("{}: key `{}`: {}", origin.display(), path, e.into_inner())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_json(&text, path)
}

impl RunConfig {
    /// The config file (or defaults) with command-line overrides applied.
    /// A relative `data.dir` is resolved against the config file's directory.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(path) => {
                let mut cfg: RunConfig = read_json(path)?;
                if let Some(dir) = &cfg.data.dir {
                    if dir.is_relative() {
                        let base = path.parent().unwrap_or(Path::new("."));
                        cfg.data.dir = Some(base.join(dir));
                    }
                }
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(p) = o.preset {
            let preset = TrainConfig::preset(p.into());
            cfg.train.epochs = preset.epochs;
            cfg.train.decay_epochs = preset.decay_epochs;
            cfg.train.augment = preset.augment;
        }
        if let Some(v) = o.variant {
            cfg.model.variant = v.into();
        }
        if let Some(n) = o.queries {
            cfg.model.num_queries = n;
        }
        if let Some(p) = o.protocol {
            cfg.eval.protocol = p.into();
        }
        if let Some(k) = o.budget {
            cfg.eval.budgets = vec![k];
        }
        if let Some(s) = o.seed {
            cfg.train.seed = s;
            cfg.model.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model config")?;
        self.train.validate().context("train config")?;
        self.eval.validate().context("eval config")?;
        if self.data.dir.is_none() {
            self.data.synthetic.validate().context("data.synthetic")?;
            if self.data.num_images == 0 {
                bail!("data.num_images must be at least 1");
            }
        }
        if self.eval_batch_size == 0 {
            bail!("eval_batch_size must be at least 1");
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Loads or renders the dataset and tags base/novel instances.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut ds = match &self.data.dir {
            Some(dir) => {
                let ann = dir.join(ANNOTATIONS_FILE);
                let mut ds = load_coco(&ann, &CategorySplit::default(), Supervision::All)
                    .with_context(|| format!("loading {}", ann.display()))?;
                ds.load_images(dir)?;
                ds
            }
            None => generate_synthetic(&self.data.synthetic, self.data.num_images)?,
        };
        let split = if self.data.base.is_empty() && self.data.novel.is_empty() {
            CategorySplit::all_base(ds.categories.iter().map(|c| c.id))
        } else {
            let base: Vec<&str> = self.data.base.iter().map(String::as_str).collect();
            let novel: Vec<&str> = self.data.novel.iter().map(String::as_str).collect();
            ds.split_by_names(&base, &novel).context("data.base / data.novel")?
        };
        ds.apply_split(&split, self.data.supervision);
        Ok(ds)
    }
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const CONFIG_FILE: &str = "config.json";
