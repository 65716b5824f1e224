//! Run configuration: one JSON document, unknown keys rejected, every key
//! overridable as `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::episodes::{Setting, Supervision};
use super::slic::SlicParams;
use crate::bcma::BcmaConfig;
use crate::encoder::{EncoderConfig, STRIDE};
use crate::error::{Error, Result};
use crate::fspa::FspaConfig;
use crate::pipeline::{AblationConfig, ModelConfig};
use crate::segmenter::SegConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub folds: usize,
    /// Fold whose slices and class are held out.
    pub fold: usize,
    pub setting: Setting,
    pub supervision: Supervision,
    pub slic: SlicParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            count: 200,
            height: 64,
            width: 64,
            folds: 5,
            fold: 0,
            setting: Setting::One,
            supervision: Supervision::Labels,
            slic: SlicParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.01,
            seed: 3,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub fspa: FspaConfig,
    pub bcma: BcmaConfig,
    pub seg: SegConfig,
    pub ablation: AblationConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            encoder: EncoderConfig::default(),
            fspa: FspaConfig::default(),
            bcma: BcmaConfig::default(),
            seg: SegConfig::default(),
            ablation: AblationConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            fspa: self.fspa.clone(),
            bcma: self.bcma.clone(),
            seg: self.seg.clone(),
            ablation: self.ablation.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Load `path` (or the defaults) and apply `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
            None => serde_json::to_value(RunConfig::default())?,
        };
        for (key, raw) in overrides {
            set_path(&mut value, key, raw)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.bcma.pattern()?;
        if self.encoder.channels < 2 {
            return bad(format!("encoder.channels = {} (need at least 2)", self.encoder.channels));
        }
        if self.fspa.num_clusters == 0 {
            return bad("fspa.num_clusters must be at least 1".into());
        }
        if !(self.seg.temperature.is_finite() && self.seg.temperature >= 0.0) {
            return bad(format!("seg.temperature = {}", self.seg.temperature));
        }
        if !(self.bcma.bg_threshold > 0.0 && self.bcma.bg_threshold <= 1.0) {
            return bad(format!("bcma.bg_threshold = {} (need (0, 1])", self.bcma.bg_threshold));
        }
        let d = &self.data;
        if d.height < 32 || d.width < 32 || d.height % STRIDE != 0 || d.width % STRIDE != 0 {
            return bad(format!("data size {}x{} must be multiples of 4, at least 32", d.height, d.width));
        }
        let (fh, fw) = (d.height / STRIDE, d.width / STRIDE);
        let [wh, ww] = self.bcma.pool_window;
        if wh == 0 || ww == 0 || fh % wh != 0 || fw % ww != 0 {
            return bad(format!("bcma.pool_window {wh}x{ww} must divide the {fh}x{fw} feature map"));
        }
        if d.folds < 2 || d.folds > d.count || d.fold >= d.folds {
            return bad(format!("data.fold {} of {} folds over {} slices", d.fold, d.folds, d.count));
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate = {}", self.train.learning_rate));
        }
        Ok(())
    }
}

/// Set the dotted `key` in `value` to `raw`, read as JSON when it parses
/// and as a string otherwise.
pub fn set_path(value: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad key {key:?}")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {part:?} is inside a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
