//! Experiment configuration as `section.key = value` text.
//!
//! Keys may be written fully qualified (`train.epochs = 20`) or under a
//! `[train]` header. `#` and `;` start comments. Unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ini::{Ini, ParseOption};

use crate::backbone::BackboneConfig;
use crate::descriptor::{Architecture, Combination, DescriptorConfig, DEFAULT_GEM_P};
use crate::error::{CgdError, Result};
use crate::loss::{TripletConfig, TripletVariant};
use crate::model::ModelConfig;
use crate::trainer::{LossConfig, TrainConfig};

pub const DEFAULT_TOTAL_DIM: usize = 48;
pub const DEFAULT_K_LIST: [usize; 4] = [1, 2, 4, 8];
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Learning rate used by the desk-scale defaults.
pub const DESK_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub descriptor: String,
    pub architecture: Architecture,
    pub combination: Combination,
    pub total_dim: usize,
    pub gem_p: f64,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub k_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            descriptor: "SM".into(),
            architecture: Architecture::Cgd,
            combination: Combination::Concat,
            total_dim: DEFAULT_TOTAL_DIM,
            gem_p: DEFAULT_GEM_P,
            backbone: BackboneConfig::default(),
            train: TrainConfig {
                lr: DESK_LR,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            k_list: DEFAULT_K_LIST.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            manifest: None,
            out_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CgdError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CgdError::Config(format!("`{key}`: expected true/false, got `{value}`"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key. Used by the file parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "descriptor" => self.descriptor = v.to_string(),
            "architecture" => self.architecture = v.parse()?,
            "combination" => self.combination = v.parse()?,
            "total_dim" => self.total_dim = parse_num(key, v)?,
            "gem_p" => self.gem_p = parse_num(key, v)?,
            "backbone.channels" => self.backbone.stage_channels = parse_list(key, v)?,
            "backbone.strides" => self.backbone.stage_strides = parse_list(key, v)?,
            "backbone.remove_last_downsample" => self.backbone.remove_last_downsample = parse_bool(key, v)?,
            "backbone.input_size" => self.backbone.input_size = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_p" => self.train.batch_p = parse_num(key, v)?,
            "train.batch_k" => self.train.batch_k = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.decay_factor" => self.train.decay_factor = parse_num(key, v)?,
            "train.decay_every" => self.train.decay_every = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "loss.margin" => self.loss.triplet.margin = parse_num(key, v)?,
            "loss.variant" => self.loss.triplet.variant = v.parse::<TripletVariant>()?,
            "loss.temperature" => self.loss.temperature = parse_num(key, v)?,
            "loss.label_smoothing" => self.loss.label_smoothing = parse_num(key, v)?,
            "loss.rank_weight" => self.loss.rank_weight = parse_num(key, v)?,
            "loss.cls_weight" => self.loss.cls_weight = parse_num(key, v)?,
            "eval.k" => self.k_list = parse_list(key, v)?,
            "sweep.seeds" => self.seeds = parse_list(key, v)?,
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output.dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(CgdError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies INI text on top of the current values. Keys under a
    /// `[section]` header are read as `section.key`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let opts = ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_str_opt(text, opts).map_err(|e| CgdError::Config(e.to_string()))?;
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(sec) if !k.contains('.') => format!("{sec}.{k}"),
                    _ => k.to_string(),
                };
                self.set(&key, v)
                    .map_err(|e| CgdError::Config(format!("key `{key}`: {}", strip_kind(&e))))?;
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CgdError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text with every key present; parses back to `self`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let b = &self.backbone;
        let t = &self.train;
        let l = &self.loss;
        let mut s = String::new();
        let _ = writeln!(s, "descriptor = {}", self.descriptor);
        let _ = writeln!(s, "architecture = {}", self.architecture);
        let _ = writeln!(s, "combination = {}", self.combination);
        let _ = writeln!(s, "total_dim = {}", self.total_dim);
        let _ = writeln!(s, "gem_p = {}", self.gem_p);
        let _ = writeln!(s, "backbone.channels = {}", join(&b.stage_channels));
        let _ = writeln!(s, "backbone.strides = {}", join(&b.stage_strides));
        let _ = writeln!(s, "backbone.remove_last_downsample = {}", b.remove_last_downsample);
        let _ = writeln!(s, "backbone.input_size = {}", b.input_size);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_p = {}", t.batch_p);
        let _ = writeln!(s, "train.batch_k = {}", t.batch_k);
        let _ = writeln!(s, "train.lr = {}", t.lr);
        let _ = writeln!(s, "train.decay_factor = {}", t.decay_factor);
        let _ = writeln!(s, "train.decay_every = {}", t.decay_every);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "loss.margin = {}", l.triplet.margin);
        let _ = writeln!(s, "loss.variant = {}", l.triplet.variant);
        let _ = writeln!(s, "loss.temperature = {}", l.temperature);
        let _ = writeln!(s, "loss.label_smoothing = {}", l.label_smoothing);
        let _ = writeln!(s, "loss.rank_weight = {}", l.rank_weight);
        let _ = writeln!(s, "loss.cls_weight = {}", l.cls_weight);
        let _ = writeln!(s, "eval.k = {}", join(&self.k_list));
        let _ = writeln!(s, "sweep.seeds = {}", join(&self.seeds));
        let _ = writeln!(s, "data.manifest = {}", path(&self.manifest));
        let _ = writeln!(s, "output.dir = {}", path(&self.out_dir));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn descriptor_config(&self) -> Result<DescriptorConfig> {
        DescriptorConfig::parse(&self.descriptor, self.total_dim, self.gem_p)
    }

    /// Cross-field checks; run before any work starts.
    pub fn validate(&self) -> Result<()> {
        let desc = self.descriptor_config()?;
        self.backbone.validate()?;
        self.train.validate()?;
        if self.train.epochs == 0 {
            return Err(CgdError::Config("train.epochs must be positive".into()));
        }
        if self.train.lr.is_nan() || self.train.lr < 0.0 {
            return Err(CgdError::Config(format!("train.lr must be >= 0, got {}", self.train.lr)));
        }
        if !(self.loss.triplet.margin >= 0.0) {
            return Err(CgdError::Config(format!("loss.margin must be >= 0, got {}", self.loss.triplet.margin)));
        }
        if !(self.loss.temperature > 0.0) {
            return Err(CgdError::Config(format!(
                "loss.temperature must be > 0, got {}",
                self.loss.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return Err(CgdError::Config(format!(
                "loss.label_smoothing must lie in [0, 1), got {}",
                self.loss.label_smoothing
            )));
        }
        if !(self.loss.rank_weight >= 0.0) || !(self.loss.cls_weight >= 0.0) {
            return Err(CgdError::Config("loss weights must be nonnegative".into()));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(CgdError::Config(format!("eval.k must be positive integers, got {:?}", self.k_list)));
        }
        if self.seeds.is_empty() {
            return Err(CgdError::Config("sweep.seeds must not be empty".into()));
        }
        if self.backbone.input_size <= crate::dataio::CROP_MARGIN {
            return Err(CgdError::Config("backbone.input_size too small for augmentation".into()));
        }
        let c = self.backbone.out_channels();
        if self.architecture != Architecture::TypeB {
            if let Some(&k) = desc.per_branch_dims().iter().max() {
                if k > c {
                    log::warn!("branch width {k} exceeds backbone channels {c}; projection is rank-deficient");
                }
            }
        }
        if self.combination == Combination::Sum && self.architecture == Architecture::TypeB {
            return Err(CgdError::Config("sum combination needs per-branch heads; not valid with type-b".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: self.backbone.clone(),
            descriptor: self.descriptor_config()?,
            architecture: self.architecture,
            combination: self.combination,
            num_classes,
        })
    }

    pub fn triplet(&self) -> TripletConfig {
        self.loss.triplet
    }
}

fn strip_kind(e: &CgdError) -> String {
    match e {
        CgdError::Config(m) | CgdError::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}
