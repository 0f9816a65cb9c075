//! Run configuration: model architecture, iteration schedules, loss constants,
//! optimisation and synthetic data settings.
//!
//! Configurations are stored as flat `key = value` text (UTF-8). Keys are the
//! field names below, lists are comma separated, `#` starts a comment. Every
//! ablation (scales, lookup levels, feature type, loss variant) is plain data.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("cannot parse `{value}` for `{key}`")]
    Parse { key: String, value: String },

    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },

    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_scales: usize,
    pub lookup_levels: usize,
    /// Optional per-scale level counts (coarsest first) overriding `lookup_levels`.
    pub lookup_levels_per_scale: Option<Vec<usize>>,
    pub lookup_radius: usize,
    /// Image feature channels per scale, coarsest first.
    pub image_channels: Vec<usize>,
    /// Context channels, identical at every scale since the update block is shared.
    pub context_channels: usize,
    pub hidden_channels: usize,
    pub finest_stride: usize,
    pub stem_channels: usize,
    pub corr_hidden: usize,
    pub corr_out: usize,
    pub flow_hidden: usize,
    pub flow_out: usize,
    /// Motion feature width including the two raw flow channels.
    pub motion_channels: usize,
    pub head_channels: usize,
    pub enhance_units: usize,
    /// U-Net style enhancement; `false` uses the raw encoder outputs.
    pub unet_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_scales: 3,
            lookup_levels: 2,
            lookup_levels_per_scale: None,
            lookup_radius: 4,
            image_channels: vec![256, 128, 96],
            context_channels: 256,
            hidden_channels: 128,
            finest_stride: 4,
            stem_channels: 64,
            corr_hidden: 256,
            corr_out: 192,
            flow_hidden: 128,
            flow_out: 64,
            motion_channels: 128,
            head_channels: 256,
            enhance_units: 1,
            unet_features: true,
        }
    }
}

impl ModelConfig {
    /// Downsampling factor of scale `s` (0 = coarsest) relative to the input.
    pub fn stride(&self, s: usize) -> usize {
        self.finest_stride << (self.num_scales - 1 - s)
    }

    pub fn coarsest_stride(&self) -> usize {
        self.stride(0)
    }

    pub fn levels_at(&self, s: usize) -> usize {
        match &self.lookup_levels_per_scale {
            Some(v) => v[s],
            None => self.lookup_levels,
        }
    }

    pub fn max_levels(&self) -> usize {
        (0..self.num_scales).map(|s| self.levels_at(s)).max().unwrap_or(self.lookup_levels)
    }

    /// Channels of one lookup result, padded to the largest level count so that
    /// the shared motion encoder sees the same width at every scale.
    pub fn corr_channels(&self) -> usize {
        let k = 2 * self.lookup_radius + 1;
        self.max_levels() * k * k
    }

    pub fn input_channels(&self) -> usize {
        self.context_channels - self.hidden_channels
    }

    /// Input height/width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        let max_pool = (0..self.num_scales).map(|s| 1usize << (self.levels_at(s) - 1)).max().unwrap_or(1);
        self.coarsest_stride() * max_pool
    }

    /// Desk-scale widths used by tests and the default training experiments.
    pub fn desk() -> Self {
        Self {
            image_channels: vec![48, 32, 24],
            context_channels: 48,
            hidden_channels: 24,
            stem_channels: 16,
            corr_hidden: 48,
            corr_out: 32,
            flow_hidden: 24,
            flow_out: 16,
            motion_channels: 40,
            head_channels: 32,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationSchedule {
    pub train_iters: Vec<usize>,
    pub eval_iters: Vec<usize>,
}

impl Default for IterationSchedule {
    fn default() -> Self {
        Self { train_iters: vec![4, 6, 8], eval_iters: vec![10, 15, 20] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobustMode {
    Pretrain,
    Finetune,
}

impl FromStr for RobustMode {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune" => Ok(Self::Finetune),
            _ => Err(()),
        }
    }
}

impl RobustMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub q: f64,
    pub epsilon_prime: f64,
    pub robust_mode: RobustMode,
    /// Ablation: supervise only the iterations of the finest scale.
    pub finest_scale_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            epsilon: 1e-5,
            q: 0.7,
            epsilon_prime: 0.01,
            robust_mode: RobustMode::Pretrain,
            finest_scale_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub pct_start: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub double_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            learning_rate: 4e-4,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            pct_start: 0.05,
            seed: 0,
            checkpoint_every: 500,
            double_precision: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// `noise`, `checker`, `blobs` or `mixed`.
    pub pattern: String,
    /// `translation`, `affine`, `smooth` or `mixed`.
    pub warp: String,
    pub max_displacement: f64,
    pub height: usize,
    pub width: usize,
    /// Size of the training set; 0 draws a fresh sample every time.
    pub samples: usize,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pattern: "mixed".into(),
            warp: "mixed".into(),
            max_displacement: 24.0,
            height: 96,
            width: 96,
            samples: 0,
            data_seed: 1,
        }
    }
}

/// Everything a run needs, round-trippable through the key-value format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: IterationSchedule,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Number of leading entries of [`KEYS`] that describe the architecture.
const MODEL_KEYS: usize = 17;

/// Keys that describe the architecture and are stored with checkpoints.
pub fn model_keys() -> &'static [&'static str] {
    &KEYS[..MODEL_KEYS]
}

/// All recognised keys, in file order.
pub const KEYS: &[&str] = &[
    "num_scales",
    "lookup_levels",
    "lookup_levels_per_scale",
    "lookup_radius",
    "image_channels",
    "context_channels",
    "hidden_channels",
    "finest_stride",
    "stem_channels",
    "corr_hidden",
    "corr_out",
    "flow_hidden",
    "flow_out",
    "motion_channels",
    "head_channels",
    "enhance_units",
    "unet_features",
    "train_iters",
    "eval_iters",
    "gamma",
    "epsilon",
    "q",
    "epsilon_prime",
    "robust_mode",
    "finest_scale_only",
    "steps",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "clip_norm",
    "pct_start",
    "seed",
    "checkpoint_every",
    "double_precision",
    "pattern",
    "warp",
    "max_displacement",
    "height",
    "width",
    "samples",
    "data_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Parse { key: key.into(), value: value.into() })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|p| parse(key, p)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Parse { key: key.into(), value: value.into() }),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Desk-scale defaults: paper-structured model (3 scales, 2 levels, 4/6/8
    /// iterations) with reduced channel widths.
    pub fn desk() -> Self {
        Self { model: ModelConfig::desk(), ..Self::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let v = value.trim();
        match key {
            "num_scales" => m.num_scales = parse(key, v)?,
            "lookup_levels" => m.lookup_levels = parse(key, v)?,
            "lookup_levels_per_scale" => {
                m.lookup_levels_per_scale =
                    if v.is_empty() || v == "none" { None } else { Some(parse_list(key, v)?) }
            }
            "lookup_radius" => m.lookup_radius = parse(key, v)?,
            "image_channels" => m.image_channels = parse_list(key, v)?,
            "context_channels" => m.context_channels = parse(key, v)?,
            "hidden_channels" => m.hidden_channels = parse(key, v)?,
            "finest_stride" => m.finest_stride = parse(key, v)?,
            "stem_channels" => m.stem_channels = parse(key, v)?,
            "corr_hidden" => m.corr_hidden = parse(key, v)?,
            "corr_out" => m.corr_out = parse(key, v)?,
            "flow_hidden" => m.flow_hidden = parse(key, v)?,
            "flow_out" => m.flow_out = parse(key, v)?,
            "motion_channels" => m.motion_channels = parse(key, v)?,
            "head_channels" => m.head_channels = parse(key, v)?,
            "enhance_units" => m.enhance_units = parse(key, v)?,
            "unet_features" => m.unet_features = parse_bool(key, v)?,
            "train_iters" => self.schedule.train_iters = parse_list(key, v)?,
            "eval_iters" => self.schedule.eval_iters = parse_list(key, v)?,
            "gamma" => self.loss.gamma = parse(key, v)?,
            "epsilon" => self.loss.epsilon = parse(key, v)?,
            "q" => self.loss.q = parse(key, v)?,
            "epsilon_prime" => self.loss.epsilon_prime = parse(key, v)?,
            "robust_mode" => {
                self.loss.robust_mode =
                    v.parse().map_err(|_| ConfigError::Parse { key: key.into(), value: v.into() })?
            }
            "finest_scale_only" => self.loss.finest_scale_only = parse_bool(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "clip_norm" => self.train.clip_norm = parse(key, v)?,
            "pct_start" => self.train.pct_start = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "double_precision" => self.train.double_precision = parse_bool(key, v)?,
            "pattern" => self.data.pattern = v.to_string(),
            "warp" => self.data.warp = v.to_string(),
            "max_displacement" => self.data.max_displacement = parse(key, v)?,
            "height" => self.data.height = parse(key, v)?,
            "width" => self.data.width = parse(key, v)?,
            "samples" => self.data.samples = parse(key, v)?,
            "data_seed" => self.data.data_seed = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_text(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "num_scales" => m.num_scales.to_string(),
            "lookup_levels" => m.lookup_levels.to_string(),
            "lookup_levels_per_scale" => m.lookup_levels_per_scale.as_deref().map(join).unwrap_or_else(|| "none".into()),
            "lookup_radius" => m.lookup_radius.to_string(),
            "image_channels" => join(&m.image_channels),
            "context_channels" => m.context_channels.to_string(),
            "hidden_channels" => m.hidden_channels.to_string(),
            "finest_stride" => m.finest_stride.to_string(),
            "stem_channels" => m.stem_channels.to_string(),
            "corr_hidden" => m.corr_hidden.to_string(),
            "corr_out" => m.corr_out.to_string(),
            "flow_hidden" => m.flow_hidden.to_string(),
            "flow_out" => m.flow_out.to_string(),
            "motion_channels" => m.motion_channels.to_string(),
            "head_channels" => m.head_channels.to_string(),
            "enhance_units" => m.enhance_units.to_string(),
            "unet_features" => m.unet_features.to_string(),
            "train_iters" => join(&self.schedule.train_iters),
            "eval_iters" => join(&self.schedule.eval_iters),
            "gamma" => self.loss.gamma.to_string(),
            "epsilon" => self.loss.epsilon.to_string(),
            "q" => self.loss.q.to_string(),
            "epsilon_prime" => self.loss.epsilon_prime.to_string(),
            "robust_mode" => self.loss.robust_mode.as_str().to_string(),
            "finest_scale_only" => self.loss.finest_scale_only.to_string(),
            "steps" => self.train.steps.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "clip_norm" => self.train.clip_norm.to_string(),
            "pct_start" => self.train.pct_start.to_string(),
            "seed" => self.train.seed.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "double_precision" => self.train.double_precision.to_string(),
            "pattern" => self.data.pattern.clone(),
            "warp" => self.data.warp.clone(),
            "max_displacement" => self.data.max_displacement.to_string(),
            "height" => self.data.height.to_string(),
            "width" => self.data.width.to_string(),
            "samples" => self.data.samples.to_string(),
            "data_seed" => self.data.data_seed.to_string(),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Only the architecture keys; used to match checkpoints against a run.
    pub fn model_text(&self) -> String {
        let mut out = String::new();
        for key in &KEYS[..MODEL_KEYS] {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_config(&self.model, &self.schedule, &self.loss)?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(t.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.pct_start) {
            return Err(invalid("pct_start", "must lie in [0, 1)"));
        }
        let d = &self.data;
        if !["noise", "checker", "blobs", "mixed"].contains(&d.pattern.as_str()) {
            return Err(invalid("pattern", "expected noise, checker, blobs or mixed"));
        }
        if !["translation", "affine", "smooth", "mixed"].contains(&d.warp.as_str()) {
            return Err(invalid("warp", "expected translation, affine, smooth or mixed"));
        }
        if !(d.max_displacement >= 0.0) {
            return Err(invalid("max_displacement", "must be non-negative"));
        }
        let mult = self.model.size_multiple();
        if d.height == 0 || d.width == 0 || !d.height.is_multiple_of(mult) || !d.width.is_multiple_of(mult) {
            return Err(invalid("height", format!("height and width must be positive multiples of {mult}")));
        }
        Ok(())
    }
}

/// Checks every architectural, schedule and loss invariant.
pub fn validate_config(
    cfg: &ModelConfig,
    sched: &IterationSchedule,
    loss: &LossConfig,
) -> Result<(), ConfigError> {
    if !(1..=4).contains(&cfg.num_scales) {
        return Err(invalid("num_scales", format!("{} not in [1, 4]", cfg.num_scales)));
    }
    if cfg.lookup_levels < 1 {
        return Err(invalid("lookup_levels", "must be at least 1"));
    }
    if let Some(per) = &cfg.lookup_levels_per_scale {
        if per.len() != cfg.num_scales {
            return Err(invalid("lookup_levels_per_scale", format!("{} entries for {} scales", per.len(), cfg.num_scales)));
        }
        if per.iter().any(|&l| l < 1) {
            return Err(invalid("lookup_levels_per_scale", "every entry must be at least 1"));
        }
    }
    if cfg.image_channels.len() != cfg.num_scales {
        return Err(invalid(
            "image_channels",
            format!("channel-list length {} does not match num_scales {}", cfg.image_channels.len(), cfg.num_scales),
        ));
    }
    if cfg.image_channels.contains(&0) {
        return Err(invalid("image_channels", "channel counts must be positive"));
    }
    if cfg.hidden_channels == 0 || cfg.context_channels <= cfg.hidden_channels {
        return Err(invalid("context_channels", "must exceed hidden_channels (split into hidden and input)"));
    }
    if cfg.finest_stride < 4 || !cfg.finest_stride.is_power_of_two() {
        return Err(invalid("finest_stride", "must be a power of two >= 4"));
    }
    for (key, v) in [
        ("stem_channels", cfg.stem_channels),
        ("corr_hidden", cfg.corr_hidden),
        ("corr_out", cfg.corr_out),
        ("flow_hidden", cfg.flow_hidden),
        ("flow_out", cfg.flow_out),
        ("head_channels", cfg.head_channels),
    ] {
        if v == 0 {
            return Err(invalid(key, "must be positive"));
        }
    }
    if cfg.motion_channels <= 2 {
        return Err(invalid("motion_channels", "must exceed the 2 raw flow channels"));
    }
    for (key, list) in [("train_iters", &sched.train_iters), ("eval_iters", &sched.eval_iters)] {
        if list.len() != cfg.num_scales {
            return Err(invalid(key, format!("{} entries for {} scales", list.len(), cfg.num_scales)));
        }
        if list.contains(&0) {
            return Err(invalid(key, "every scale needs at least one iteration"));
        }
    }
    if !(loss.gamma > 0.0 && loss.gamma <= 1.0) {
        return Err(invalid("gamma", "must lie in (0, 1]"));
    }
    if !(loss.epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    if !(loss.q > 0.0 && loss.q <= 1.0) {
        return Err(invalid("q", "must lie in (0, 1]"));
    }
    if !(loss.epsilon_prime >= 0.0) {
        return Err(invalid("epsilon_prime", "must be non-negative"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(model: ModelConfig, train: Vec<usize>) -> Result<(), ConfigError> {
        let n = model.num_scales;
        let sched = IterationSchedule { train_iters: train, eval_iters: vec![1; n] };
        validate_config(&model, &sched, &LossConfig::default())
    }

    #[test]
    fn paper_defaults_are_valid() {
        let c = RunConfig::default();
        assert_eq!(c.model.image_channels, vec![256, 128, 96]);
        assert_eq!(c.model.context_channels, 256);
        assert_eq!(c.schedule.train_iters, vec![4, 6, 8]);
        assert_eq!(c.model.lookup_levels, 2);
        validate_config(&c.model, &c.schedule, &c.loss).unwrap();
    }

    #[test]
    fn channel_list_mismatch_is_reported() {
        let m = ModelConfig { num_scales: 2, ..ModelConfig::default() };
        let err = check(m, vec![8, 10]).unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "image_channels"), "{err}");
    }

    #[test]
    fn four_scale_single_level_is_valid() {
        let m = ModelConfig {
            num_scales: 4,
            lookup_levels: 1,
            image_channels: vec![256, 256, 128, 96],
            ..ModelConfig::default()
        };
        check(m.clone(), vec![3, 3, 5, 7]).unwrap();
        assert_eq!(m.stride(0), 32);
    }

    #[test]
    fn strides_halve_once_per_scale_down_to_finest() {
        for n in 1..=4 {
            let m = ModelConfig { num_scales: n, image_channels: vec![8; n], ..ModelConfig::default() };
            let strides: Vec<usize> = (0..n).map(|s| m.stride(s)).collect();
            assert_eq!(*strides.last().unwrap(), 4);
            for w in strides.windows(2) {
                assert_eq!(w[0], 2 * w[1]);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(check(ModelConfig { num_scales: 5, image_channels: vec![8; 5], ..ModelConfig::default() }, vec![1; 5]).is_err());
        assert!(check(ModelConfig { lookup_levels: 0, ..ModelConfig::default() }, vec![4, 6, 8]).is_err());
        assert!(check(ModelConfig::default(), vec![4, 0, 8]).is_err());
        assert!(check(ModelConfig::default(), vec![4, 6]).is_err());
        let bad_loss = LossConfig { gamma: 1.5, ..LossConfig::default() };
        assert!(validate_config(&ModelConfig::default(), &IterationSchedule::default(), &bad_loss).is_err());
        let bad_loss = LossConfig { q: 0.0, ..LossConfig::default() };
        assert!(validate_config(&ModelConfig::default(), &IterationSchedule::default(), &bad_loss).is_err());
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = RunConfig::desk();
        c.set("train_iters", "3,3,5,7").unwrap();
        c.set("num_scales", "4").unwrap();
        c.set("robust_mode", "finetune").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);

        let mut d = RunConfig::default();
        d.apply_text("# comment\nlookup_levels = 3  # trailing\n\nimage_channels=64, 32, 16\n").unwrap();
        assert_eq!(d.model.lookup_levels, 3);
        assert_eq!(d.model.image_channels, vec![64, 32, 16]);
        assert_eq!(d.apply_text("bogus = 1"), Err(ConfigError::UnknownKey("bogus".into())));
        assert_eq!(d.apply_text("no equals sign"), Err(ConfigError::Syntax { line: 1 }));
    }

    #[test]
    fn every_key_is_gettable_and_settable() {
        let c = RunConfig::default();
        for key in KEYS {
            let v = c.get(key).unwrap();
            let mut d = RunConfig::default();
            d.set(key, &v).unwrap();
            assert_eq!(d, c, "{key}");
        }
    }
}
