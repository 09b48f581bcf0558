//! Run configuration, read from TOML.
//!
//! ```toml
//! out_dir = "runs/iconart"
//! seed = 0
//! methods = ["clip-surgery", "gradcam"]      # default: all seven
//! prompt_template = "a painting of a {class}"
//!
//! [dataset]
//! root = "data/IconArt_v1"
//! adapter = "iconart-voc"                     # iconart-voc | artdl | canonical-json
//! split = "test"
//! subset = 100                                # optional fixed random subset of pairs
//!
//! [backbones.residual]
//! model = "synthetic-rn50x16"
//! resize = "squash"                           # squash | center-crop
//!
//! [backbones.transformer]
//! model = "synthetic-vit-b32"
//!
//! [assignments]                               # optional method -> backbone slot
//! clip-surgery = "transformer"
//!
//! [method]                                    # saliency method settings
//! top_k = 300
//!
//! [eval]
//! delta_set = [0.3, 0.5]
//! gt_matching = "any-box"
//!
//! [study.mice]
//! iterations = 20
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{
    Backbone, ResizeMode, SyntheticResNet, SyntheticResNetConfig, ToyVit, ToyVitConfig, DEFAULT_PROMPT_TEMPLATE,
};
use crate::dataset::Adapter;
use crate::localization::EvalConfig;
use crate::saliency::{MethodConfig, MethodId};
use crate::study::AnalysisConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub adapter: Adapter,
    #[serde(default)]
    pub split: Option<String>,
    /// Directory image files are resolved against; defaults to `root`.
    #[serde(default)]
    pub images_dir: Option<PathBuf>,
    /// Evaluate only this many image-class pairs, drawn with the run seed.
    #[serde(default)]
    pub subset: Option<usize>,
}

/// Backbones this build can instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SyntheticRn50x16,
    SyntheticRnSmall,
    SyntheticVitB32,
    SyntheticVitSmall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub resize: ResizeMode,
}

impl BackboneConfig {
    pub fn build(&self) -> std::result::Result<Box<dyn Backbone + Send>, crate::backbone::BackboneError> {
        Ok(match self.model {
            ModelKind::SyntheticRn50x16 => {
                Box::new(SyntheticResNet::new(SyntheticResNetConfig { seed: self.seed, ..SyntheticResNetConfig::rn50x16() })?)
            }
            ModelKind::SyntheticRnSmall => Box::new(SyntheticResNet::new(SyntheticResNetConfig::small(self.seed))?),
            ModelKind::SyntheticVitB32 => Box::new(ToyVit::new(ToyVitConfig { seed: self.seed, ..ToyVitConfig::vit_b32() })?),
            ModelKind::SyntheticVitSmall => Box::new(ToyVit::new(ToyVitConfig::small(self.seed))?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackbonesConfig {
    pub residual: BackboneConfig,
    pub transformer: BackboneConfig,
}

impl Default for BackbonesConfig {
    fn default() -> Self {
        BackbonesConfig {
            residual: BackboneConfig { model: ModelKind::SyntheticRn50x16, seed: 0, resize: ResizeMode::Squash },
            transformer: BackboneConfig { model: ModelKind::SyntheticVitB32, seed: 0, resize: ResizeMode::Squash },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Slot {
    Residual,
    Transformer,
}

fn all_methods() -> Vec<MethodId> {
    MethodId::ALL.to_vec()
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "all_methods")]
    pub methods: Vec<MethodId>,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub backbones: BackbonesConfig,
    /// Overrides of the default method placement (LeGrad on the
    /// transformer, everything else on the residual network).
    #[serde(default)]
    pub assignments: BTreeMap<MethodId, Slot>,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub study: AnalysisConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(cfg.resolve_relative(path.parent().unwrap_or(Path::new(""))))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    /// Relative paths are taken relative to the config file's directory.
    fn resolve_relative(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.dataset.root);
        if let Some(d) = self.dataset.images_dir.as_mut() {
            fix(d);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.dataset.root.exists() {
            return bad(format!("dataset root {} does not exist", self.dataset.root.display()));
        }
        if let Some(d) = &self.dataset.images_dir {
            if !d.is_dir() {
                return bad(format!("images_dir {} is not a directory", d.display()));
            }
        }
        if self.methods.is_empty() {
            return bad("methods is empty".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods lists a method twice".into());
        }
        if !self.prompt_template.contains("{class}") {
            return bad("prompt_template must contain `{class}`".into());
        }
        if self.dataset.subset == Some(0) {
            return bad("dataset.subset must be positive".into());
        }
        let m = &self.method;
        if m.top_k == 0 || m.channel_batch == 0 || m.legrad_layers == 0 {
            return bad("method.top_k, method.channel_batch and method.legrad_layers must be positive".into());
        }
        if m.layercam_taps.as_ref().is_some_and(Vec::is_empty) {
            return bad("method.layercam_taps is empty".into());
        }
        if self.study.mice.iterations == 0 {
            return bad("study.mice.iterations must be positive".into());
        }
        self.eval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn slot(&self, method: MethodId) -> Slot {
        self.assignments.get(&method).copied().unwrap_or(if method == MethodId::LeGrad { Slot::Transformer } else { Slot::Residual })
    }

    pub fn backbone(&self, slot: Slot) -> &BackboneConfig {
        match slot {
            Slot::Residual => &self.backbones.residual,
            Slot::Transformer => &self.backbones.transformer,
        }
    }

    /// Hash of everything except the output location.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("struct").remove("out_dir");
        digest(&v)
    }

    /// Hash of the settings that determine map contents.
    pub fn generation_hash(&self) -> String {
        let v = serde_json::json!({
            "prompt_template": self.prompt_template,
            "backbones": self.backbones,
            "assignments": self.assignments,
            "method": self.method,
        });
        digest(&v)
    }

    pub fn images_dir(&self) -> &Path {
        self.dataset.images_dir.as_deref().unwrap_or(&self.dataset.root)
    }

    /// The pairs to work on: all of `pairs`, or a seeded random subset of
    /// them, returned in the input order.
    pub fn select<T: Clone>(&self, pairs: &[T]) -> Vec<T> {
        match self.dataset.subset {
            Some(n) if n < pairs.len() => {
                let mut idx: Vec<usize> = (0..pairs.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
                let mut keep = idx[..n].to_vec();
                keep.sort_unstable();
                keep.into_iter().map(|i| pairs[i].clone()).collect()
            }
            _ => pairs.to_vec(),
        }
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON.
fn digest(v: &serde_json::Value) -> String {
    // Struct fields serialize in declaration order and all maps are ordered.
    let bytes = serde_json::to_vec(v).expect("serializable");
    hex::encode(&Sha256::digest(&bytes)[..8])
}
