//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::frame::ColorSpace;
use crate::position::PositionKind;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub position: PositionKind,
    /// Filter affinities with the compact fit when propagating.
    pub compact_infer: bool,
    /// Matching window radius (feature cells) at propagation time.
    pub window: Option<usize>,
    pub long_term: bool,
    /// Bilinear label upsampling before the argmax (nearest otherwise).
    pub bilinear: bool,
    pub scenarios: Vec<Scenario>,
    pub frame_size: usize,
    pub clip_length: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Seeds of evaluation clips start here; training clips use `0..`.
    pub eval_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            position: PositionKind::Absolute1D,
            compact_infer: false,
            window: Some(3),
            long_term: true,
            bilinear: true,
            scenarios: vec![Scenario::SingleSprite],
            frame_size: 64,
            clip_length: 20,
            train_clips: 40,
            eval_clips: 10,
            eval_seed: 1_000_000,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Every key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialisation, data sampling and bottleneck draws"),
    ("warmup_epochs", "epochs of intra-video reconstruction only"),
    ("inter_epochs", "epochs with negatives and the compactness loss"),
    ("steps_per_epoch", "optimizer steps per epoch"),
    ("batch_size", "query/reference pairs per step"),
    ("lr_warmup", "Adam learning rate during warm-up"),
    ("lr_inter", "Adam learning rate during the inter phase"),
    ("lambda_com", "weight of the compactness loss"),
    ("max_gap", "largest frame distance within a training pair"),
    ("temperature", "softmax temperature of feature dot products"),
    ("colorspace", "lab | rgb: input and reconstruction colour space"),
    ("bottleneck", "channel_dropout | rgb2gray | none"),
    ("drop_count", "channels dropped per draw"),
    ("drop_probability", "probability that the bottleneck fires"),
    ("negatives", "use memory-bank negatives in the inter phase"),
    ("bank_capacity", "memory bank size in frames"),
    ("bank_points", "feature points stored per bank frame"),
    ("momentum", "moving-average momentum of the bank encoder"),
    ("shift_mode", "shift | shuffle | none: position map modulation for negatives"),
    ("compact_train", "apply the compactness loss while training"),
    ("compact_infer", "filter affinities with the compact fit when propagating"),
    ("components", "mixture components of the compact fit"),
    ("sigma2_min", "variance floor of the compact fit"),
    ("position", "none | 2dspe | 1dape | 2dape"),
    ("window", "propagation window radius in feature cells, or none"),
    ("long_term", "keep frames 0 and 5 as propagation references"),
    ("bilinear", "bilinear label upsampling before the argmax"),
    ("scenarios", "comma-separated synthetic scenarios"),
    ("frame_size", "synthetic frame height and width"),
    ("clip_length", "frames per synthetic clip"),
    ("train_clips", "training clips per scenario"),
    ("eval_clips", "held-out clips per scenario"),
    ("eval_seed", "first seed of held-out clips"),
    ("output_dir", "directory for checkpoints and logs"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn named<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

impl RunConfig {
    /// Sets one key; unknown keys and unparsable values are errors that
    /// name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let value = value.trim();
        match key {
            "seed" => t.seed = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "inter_epochs" => t.inter_epochs = parse(key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_warmup" => t.lr_warmup = parse(key, value)?,
            "lr_inter" => t.lr_inter = parse(key, value)?,
            "lambda_com" => t.lambda_com = parse(key, value)?,
            "max_gap" => t.max_gap = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "colorspace" => {
                t.bottleneck.colorspace = match value {
                    "lab" => ColorSpace::Lab,
                    "rgb" => ColorSpace::Rgb,
                    _ => return Err(Error::Config(format!("{key}: expected lab or rgb, got {value:?}"))),
                }
            }
            "bottleneck" => t.bottleneck.mode = named(key, value)?,
            "drop_count" => t.bottleneck.drop_count = parse(key, value)?,
            "drop_probability" => t.bottleneck.probability = parse(key, value)?,
            "negatives" => t.negatives = parse_bool(key, value)?,
            "bank_capacity" => t.bank_capacity = parse(key, value)?,
            "bank_points" => t.bank_points = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "shift_mode" => t.shift_mode = named(key, value)?,
            "compact_train" => t.compact_train = parse_bool(key, value)?,
            "components" => t.components = parse(key, value)?,
            "sigma2_min" => t.sigma2_min = parse(key, value)?,
            "compact_infer" => self.compact_infer = parse_bool(key, value)?,
            "position" => self.position = named(key, value)?,
            "window" => {
                self.window = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "long_term" => self.long_term = parse_bool(key, value)?,
            "bilinear" => self.bilinear = parse_bool(key, value)?,
            "scenarios" => {
                self.scenarios = value
                    .split(',')
                    .map(|s| named(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "frame_size" => self.frame_size = parse(key, value)?,
            "clip_length" => self.clip_length = parse(key, value)?,
            "train_clips" => self.train_clips = parse(key, value)?,
            "eval_clips" => self.eval_clips = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        Ok(match key {
            "seed" => t.seed.to_string(),
            "warmup_epochs" => t.warmup_epochs.to_string(),
            "inter_epochs" => t.inter_epochs.to_string(),
            "steps_per_epoch" => t.steps_per_epoch.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_warmup" => t.lr_warmup.to_string(),
            "lr_inter" => t.lr_inter.to_string(),
            "lambda_com" => t.lambda_com.to_string(),
            "max_gap" => t.max_gap.to_string(),
            "temperature" => t.temperature.to_string(),
            "colorspace" => match t.bottleneck.colorspace {
                ColorSpace::Lab => "lab".into(),
                ColorSpace::Rgb => "rgb".into(),
            },
            "bottleneck" => t.bottleneck.mode.to_string(),
            "drop_count" => t.bottleneck.drop_count.to_string(),
            "drop_probability" => t.bottleneck.probability.to_string(),
            "negatives" => t.negatives.to_string(),
            "bank_capacity" => t.bank_capacity.to_string(),
            "bank_points" => t.bank_points.to_string(),
            "momentum" => t.momentum.to_string(),
            "shift_mode" => t.shift_mode.to_string(),
            "compact_train" => t.compact_train.to_string(),
            "components" => t.components.to_string(),
            "sigma2_min" => t.sigma2_min.to_string(),
            "compact_infer" => self.compact_infer.to_string(),
            "position" => self.position.to_string(),
            "window" => self.window.map_or("none".into(), |w| w.to_string()),
            "long_term" => self.long_term.to_string(),
            "bilinear" => self.bilinear.to_string(),
            "scenarios" => self.scenarios.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            "frame_size" => self.frame_size.to_string(),
            "clip_length" => self.clip_length.to_string(),
            "train_clips" => self.train_clips.to_string(),
            "eval_clips" => self.eval_clips.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        RunConfig::parse_str(&text)
    }

    /// All keys with their current values, loadable by [`RunConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.frame_size == 0 || self.frame_size % 4 != 0 {
            return Err(Error::Config(format!("frame_size must be a positive multiple of 4, got {}", self.frame_size)));
        }
        if self.clip_length < 2 {
            return Err(Error::Config(format!("clip_length must be at least 2, got {}", self.clip_length)));
        }
        if self.train_clips == 0 {
            return Err(Error::Config("train_clips must be positive".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("scenarios must not be empty".into()));
        }
        Ok(())
    }
}
