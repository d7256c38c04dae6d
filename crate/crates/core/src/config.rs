//! Run configuration: a single TOML document drives datasets, model
//! assembly, loss weights, augmentation, optimization, and evaluation.
//!
//! Schema (defaults shown; every key is optional):
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/out"
//!
//! [dataset]
//! kind = "synthetic"          # or "directory"
//! num_categories = 5
//! ignore_index = 255
//! num_samples = 500           # synthetic train size
//! val_samples = 100           # synthetic val size
//! size = 64                   # synthetic raster size
//! # root = "data/train"       # directory layout: images/, labels/[, instances/]
//! # val_root = "data/val"
//!
//! [backbone]
//! channels = [8, 16, 32, 64, 64]   # stem + stages; sides 1..=5
//! input_channels = 3
//! blocks_per_stage = 1
//! trick = "segmentation"      # original | segmentation | edge
//! # init_weights = "pretrained.ckpt"   # optional by-name weight load
//!
//! [taps]
//! binary_sides = [[1], [2], [3]]   # each entry: one stage or a resize-
//! semantic_side = [5]              # and-concat group of stages
//!
//! [head]
//! variant = "casenet"         # casenet | dff | dds | binary | none
//! fcn_aux = false
//! seg_channels = 64           # segmentation head width
//! aux_channels = 32           # auxiliary head width
//!
//! [loss]
//! alpha = 5.0
//! beta = 1.0
//! aux_weight = 0.4
//! per_category_rho = false
//! mask_ignore = true
//!
//! [boundary]
//! radius = 2
//! instance_sensitive = false
//! image_border_is_boundary = false
//!
//! [augment]
//! scale_range = [0.5, 2.0]
//! crop = [64, 64]
//! hflip_prob = 0.5
//! brightness = 0.125
//! contrast = 0.5
//! saturation = 0.5
//! hue_degrees = 18.0
//!
//! [optimizer]
//! lr0 = 0.01
//! momentum = 0.9
//! weight_decay = 5e-4
//!
//! [schedule]
//! max_iter = 2000
//! power = 9.0
//!
//! [train]
//! batch_size = 4
//! eval_interval = 500
//! log_interval = 50
//!
//! [fusion]
//! mode = "none"               # none | channel_merge | two_stream
//! mix_layers = 2
//!
//! [eval]
//! trimap_widths = [3, 5, 9, 12]
//! ods = true
//! ods_thresholds = 99
//! tta = false
//! # slide_window = [64, 64]
//! error_maps = false
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneTrickConfig, SideTapSpec, StageSelection};
use crate::boundary::BoundaryGenConfig;
use crate::error::{Error, Result};
use crate::fusion::MergeConfig;
use crate::heads::HeadVariant;
use crate::losses::{LossOptions, LossWeights};
use crate::pipeline::AugmentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: String,
    pub num_categories: usize,
    pub ignore_index: i32,
    pub num_samples: usize,
    pub val_samples: usize,
    pub size: usize,
    pub root: Option<PathBuf>,
    pub val_root: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: "synthetic".into(),
            num_categories: 5,
            ignore_index: 255,
            num_samples: 500,
            val_samples: 100,
            size: 64,
            root: None,
            val_root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub input_channels: usize,
    pub blocks_per_stage: usize,
    /// Named stride/dilation row.
    pub trick: String,
    /// Optional checkpoint whose parameters are loaded by name.
    pub init_weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 64, 64],
            input_channels: 3,
            blocks_per_stage: 1,
            trick: "segmentation".into(),
            init_weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn trick_config(&self) -> Result<BackboneTrickConfig> {
        BackboneTrickConfig::by_name(&self.trick)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSection {
    /// casenet | dff | dds | binary | none.
    pub variant: String,
    pub fcn_aux: bool,
    pub seg_channels: usize,
    pub aux_channels: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            variant: "casenet".into(),
            fcn_aux: false,
            seg_channels: 64,
            aux_channels: 32,
        }
    }
}

impl HeadSection {
    pub fn parse_variant(&self) -> Result<Option<HeadVariant>> {
        if self.variant == "none" {
            Ok(None)
        } else {
            HeadVariant::parse(&self.variant).map(Some)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub aux_weight: f64,
    pub per_category_rho: bool,
    pub mask_ignore: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 1.0,
            aux_weight: 0.4,
            per_category_rho: false,
            mask_ignore: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub max_iter: usize,
    /// Poly decay exponent.
    pub power: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            power: 9.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub eval_interval: usize,
    pub log_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 4,
            eval_interval: 500,
            log_interval: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub trimap_widths: Vec<u32>,
    pub ods: bool,
    /// Number of uniformly spaced binarization thresholds in (0, 1).
    pub ods_thresholds: usize,
    pub ods_tolerance: f64,
    pub tta: bool,
    pub slide_window: Option<[usize; 2]>,
    pub error_maps: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trimap_widths: vec![3, 5, 9, 12],
            ods: true,
            ods_thresholds: 99,
            ods_tolerance: 2.0,
            tta: false,
            slide_window: None,
            error_maps: false,
        }
    }
}

fn default_taps() -> SideTapSpec {
    SideTapSpec::classic()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub taps: SideTapSpec,
    pub head: HeadSection,
    pub loss: LossSection,
    pub boundary: BoundaryGenConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
    pub fusion: MergeConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/out"),
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            taps: default_taps(),
            head: HeadSection::default(),
            loss: LossSection::default(),
            boundary: BoundaryGenConfig::default(),
            augment: AugmentConfig {
                crop: [64, 64],
                ..Default::default()
            },
            optimizer: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainSection::default(),
            fusion: MergeConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            aux_weight: self.loss.aux_weight,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            per_category_rho: self.loss.per_category_rho,
            mask_ignore: self.loss.mask_ignore,
            ignore_index: self.dataset.ignore_index,
        }
    }

    /// Boundary generation config with the dataset's ignore index applied.
    pub fn boundary_config(&self) -> BoundaryGenConfig {
        BoundaryGenConfig {
            ignore_index: self.dataset.ignore_index,
            ..self.boundary
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses with `key.path=value` overrides applied before
    /// deserialization.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text)?;
        for ov in overrides {
            let (key, raw) = ov.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{ov}' is not of the form key=value"))
            })?;
            apply_override(&mut value, key.trim(), raw.trim())?;
        }
        let cfg: RunConfig = value.try_into().map_err(Error::Toml)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.num_categories < 2 {
            return Err(Error::Config("need at least 2 categories".into()));
        }
        if self.train.batch_size == 0 || self.schedule.max_iter == 0 {
            return Err(Error::Config("batch_size and max_iter must be >= 1".into()));
        }
        match self.dataset.kind.as_str() {
            "synthetic" => {}
            "directory" => {
                if self.dataset.root.is_none() {
                    return Err(Error::Config(
                        "directory dataset needs dataset.root".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!("unknown dataset kind '{other}'")));
            }
        }
        self.head.parse_variant()?;
        self.backbone.trick_config()?;
        self.fusion.check()?;
        if self.boundary.radius < 1 {
            return Err(Error::Config("boundary radius must be >= 1".into()));
        }
        Ok(())
    }

    /// Short non-cryptographic digest of the canonical JSON, recorded in
    /// manifests to tie artifacts back to their configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        if cur.get(part).is_none() {
            cur.as_table_mut()
                .ok_or_else(|| Error::Config(format!("cannot descend into '{part}'")))?
                .insert(part.to_string(), toml::Value::Table(Default::default()));
        }
        cur = cur.get_mut(part).unwrap();
    }
    let leaf = parts.last().unwrap();
    // Interpret the value as a TOML literal, falling back to a bare string.
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t.get("v").cloned().unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("'{key}' does not address a table entry")))?
        .insert(leaf.to_string(), parsed);
    Ok(())
}

/// Convenience constructor for grouped side selections in code.
pub fn selection(stages: &[usize]) -> StageSelection {
    StageSelection(stages.to_vec())
}
