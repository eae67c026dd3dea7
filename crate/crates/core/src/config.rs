//! Run configuration: model architecture, distillation/training knobs and
//! synthetic-data settings, loadable from a single TOML file with dotted
//! `section.key=value` overrides.
//!
//! Defaults sit at the operating point of the method: temperature 15,
//! distillation weight 1, four adaptor segments, 64 pyramid channels and
//! shift size 5.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Channel-grouped spatial shift parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxialShiftConfig {
    pub shift_size: usize,
    pub dilation: usize,
    pub channels: usize,
}

impl AxialShiftConfig {
    pub fn new(shift_size: usize, dilation: usize, channels: usize) -> Self {
        Self {
            shift_size,
            dilation,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift_size == 0 || self.shift_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "shift size must be a positive odd integer, got {}",
                self.shift_size
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        Ok(())
    }

    /// Channels per shift group, `ceil(C / s)`.
    pub fn group_size(&self) -> usize {
        self.channels.div_ceil(self.shift_size)
    }

    /// Number of non-empty shift groups.
    pub fn group_count(&self) -> usize {
        self.channels.div_ceil(self.group_size())
    }

    /// Spatial offset of channel `c`: `(floor(c / ceil(C/s)) - floor(s/2)) * d`.
    pub fn offset(&self, c: usize) -> isize {
        let group = (c / self.group_size()) as isize;
        (group - (self.shift_size / 2) as isize) * self.dilation as isize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftDirection {
    /// Translation along the width axis.
    Horizontal,
    /// Translation along the height axis.
    Vertical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Side of the square neighbourhood concatenated by patch merging.
    pub patch_merge: usize,
    pub dim: usize,
    pub depth: usize,
    pub shift_size: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    /// Head count of the reference configuration. Bookkeeping only; it does
    /// not change any tensor shape.
    #[serde(default)]
    pub groups: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Hidden width multiplier of the pointwise MLP inside each block.
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::with_dims([64, 128, 256, 512], 2)
    }
}

impl BackboneConfig {
    /// Four stages with the reference merge factors (4, 2, 2, 2), shift size 5
    /// and the given widths.
    pub fn with_dims(dims: [usize; 4], depth: usize) -> Self {
        let groups = [None, None, Some(12), Some(24)];
        let stages = dims
            .iter()
            .enumerate()
            .map(|(i, &dim)| StageConfig {
                patch_merge: if i == 0 { 4 } else { 2 },
                dim,
                depth,
                shift_size: 5,
                dilation: 1,
                groups: groups[i],
            })
            .collect();
        Self {
            in_channels: 3,
            stages,
            mlp_ratio: 4,
        }
    }

    /// Product of all patch-merge factors.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_merge).product()
    }

    pub fn stage_strides(&self) -> Vec<usize> {
        let mut acc = 1;
        self.stages
            .iter()
            .map(|s| {
                acc *= s.patch_merge;
                acc
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!(
                "backbone needs exactly 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(Error::Config("mlp_ratio and in_channels must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.patch_merge == 0 || s.dim == 0 {
                return Err(Error::Config(format!("stage {i}: zero merge factor or width")));
            }
            AxialShiftConfig::new(s.shift_size, s.dilation, s.dim).validate()?;
            if i > 0 && s.dim <= self.stages[i - 1].dim {
                return Err(Error::Config(format!(
                    "stage widths must increase: stage {} has {} after {}",
                    i,
                    s.dim,
                    self.stages[i - 1].dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Shared 3x3 conv + LN + ReLU layers before the prediction branches.
    pub tower_depth: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Center-sampling radius in units of the level stride.
    pub center_radius: f64,
    /// Initial foreground probability used to bias the classifier.
    pub prior_prob: f64,
    /// A level with stride `s` regresses objects whose largest side distance
    /// lies in `(range_factor/2 * s, range_factor * s]`.
    pub range_factor: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub pre_nms_top_k: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            tower_depth: 2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            center_radius: 1.5,
            prior_prob: 0.01,
            range_factor: 8.0,
            nms_iou: 0.6,
            score_threshold: 0.05,
            max_detections: 100,
            pre_nms_top_k: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub fpn_channels: usize,
    /// Channel segments used by the permute encoder.
    pub segments: usize,
    pub attention_heads: usize,
    /// Learned softmax weights over the three permute branches instead of a plain sum.
    pub weighted_aggregation: bool,
    pub head: HeadConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            num_classes: 2,
            backbone: BackboneConfig::default(),
            fpn_channels: 64,
            segments: 4,
            attention_heads: 4,
            weighted_aggregation: false,
            head: HeadConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let stride = self.backbone.total_stride();
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {stride}",
                self.image_size
            )));
        }
        if self.fpn_channels == 0 {
            return Err(Error::Config("fpn_channels must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.segments == 0 || !self.fpn_channels.is_multiple_of(self.segments) {
            return Err(Error::Config(format!(
                "segments ({}) must divide fpn_channels ({})",
                self.segments, self.fpn_channels
            )));
        }
        if self.attention_heads == 0 || !self.fpn_channels.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!(
                "attention_heads ({}) must divide fpn_channels ({})",
                self.attention_heads, self.fpn_channels
            )));
        }
        Ok(())
    }

    /// Spatial side of each pyramid level, finest first.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.backbone
            .stage_strides()
            .iter()
            .map(|s| self.image_size / s)
            .collect()
    }

    /// SHA-256 over the canonical JSON form; identifies checkpoint compatibility.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Softmax domain for the distillation KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxDomain {
    /// One distribution over the whole flattened `C x H x W` map per level.
    Full,
    /// One spatial distribution per channel, averaged over channels.
    PerChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda: f64,
    /// Multiply the KL term by `tau^2`.
    pub temperature_squared: bool,
    pub softmax_domain: SoftmaxDomain,
    /// Run the dynamic teacher at all. Off gives the plain student baseline.
    pub teacher: bool,
    /// Stop teacher-detection gradients from reaching the student pyramid.
    pub detach_student_in_teacher: bool,
    pub batch_size: usize,
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Write a checkpoint every this many iterations; 0 only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 15.0,
            lambda: 1.0,
            temperature_squared: true,
            softmax_domain: SoftmaxDomain::Full,
            teacher: true,
            detach_student_in_teacher: true,
            batch_size: 4,
            total_iters: 2000,
            warmup_iters: 100,
            lr_start: 1e-5,
            lr_peak: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_grad_norm: 10.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_peak > 0.0) || self.lr_start < 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a zero-based iteration: linear warm-up, then constant.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        if iteration < self.warmup_iters {
            let t = iteration as f64 / self.warmup_iters as f64;
            self.lr_start + (self.lr_peak - self.lr_start) * t
        } else {
            self.lr_peak
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// 0 = clean background, 1 = heavy distractor clutter.
    pub clutter: f64,
    /// Probability that a rendered component is faulty.
    pub fault_rate: f64,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 256,
            num_classes: 2,
            min_objects: 1,
            max_objects: 4,
            clutter: 0.5,
            fault_rate: 0.5,
            train_count: 800,
            test_count: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(
                "the synthetic generator renders exactly 2 classes (normal, fault)".into(),
            ));
        }
        if self.min_objects > self.max_objects || self.max_objects > 4 {
            return Err(Error::Config(format!(
                "objects per image must satisfy min <= max <= 4, got {}..{}",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.fault_rate) || !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::Config("fault_rate and clutter must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data: String,
    pub out: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "runs/default".into(),
        }
    }
}

/// Everything a run needs, as read from one TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Applies `a.b.c=value`; the value is parsed as a TOML literal, falling
    /// back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let (parents, leaf) = match key.rsplit_once('.') {
            Some((p, l)) => (p.split('.').collect::<Vec<_>>(), l),
            None => (Vec::new(), key),
        };
        let unknown = || Error::Config(format!("unknown config key `{key}`"));
        let mut cursor = &mut root;
        for part in parents {
            cursor = cursor.get_mut(part).ok_or_else(unknown)?;
        }
        let table = cursor.as_table_mut().ok_or_else(unknown)?;
        let slot = table.get_mut(leaf).ok_or_else(unknown)?;
        *slot = match (&*slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {e}")))?;
        Ok(())
    }

    /// Reduced-scale setup for CPU runs: 64 px images, narrow single-block
    /// stages, otherwise default hyper-parameters.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.image_size = 64;
        cfg.model.backbone = BackboneConfig::with_dims([32, 64, 96, 128], 1);
        cfg.synth.image_size = 64;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        self.synth.validate()?;
        if self.model.num_classes != self.synth.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes ({}) differs from synth.num_classes ({})",
                self.model.num_classes, self.synth.num_classes
            )));
        }
        Ok(())
    }
}
