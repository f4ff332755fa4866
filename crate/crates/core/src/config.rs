//! Flat `key=value` configuration with dotted keys and two profiles.
//!
//! A run's configuration is the profile defaults, overlaid by a config file,
//! overlaid by `--set key=value` pairs. The resolved flat map is what gets
//! written into manifests and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneVariant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Rgbd,
    Rgbt,
}

impl Modality {
    pub fn has_aux(self) -> bool {
        self != Modality::Rgb
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "rgbd" | "rgb-d" => Ok(Modality::Rgbd),
            "rgbt" | "rgb-t" => Ok(Modality::Rgbt),
            _ => Err(format!("expected rgb, rgbd or rgbt, got `{s}`")),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Rgbd => "rgbd",
            Modality::Rgbt => "rgbt",
        })
    }
}

/// A downstream task is named after the modality it consumes.
pub type Task = Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    PromptTune,
    FullFinetune,
    NoSpg,
    PromptConcat,
}

impl TrainMode {
    /// Whether the model for this mode carries SPG blocks.
    pub fn uses_spg(self) -> bool {
        matches!(
            self,
            TrainMode::PromptTune | TrainMode::FullFinetune | TrainMode::PromptConcat
        )
    }

    /// Modes that adapt a pre-trained model rather than train from scratch.
    pub fn adapts(self) -> bool {
        self != TrainMode::Pretrain
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(TrainMode::Pretrain),
            "prompt_tune" | "prompt-tune" => Ok(TrainMode::PromptTune),
            "full_finetune" | "full-finetune" => Ok(TrainMode::FullFinetune),
            "no_spg" | "no-spg" => Ok(TrainMode::NoSpg),
            "prompt_concat" | "prompt-concat" => Ok(TrainMode::PromptConcat),
            _ => Err(format!(
                "expected pretrain, prompt_tune, full_finetune, no_spg or prompt_concat, got `{s}`"
            )),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Pretrain => "pretrain",
            TrainMode::PromptTune => "prompt_tune",
            TrainMode::FullFinetune => "full_finetune",
            TrainMode::NoSpg => "no_spg",
            TrainMode::PromptConcat => "prompt_concat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Toy,
    Paper,
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            _ => Err(format!("expected toy or paper, got `{s}`")),
        }
    }
}

impl Profile {
    pub const ENV: &'static str = "UNISOD_PROFILE";

    /// Reads `UNISOD_PROFILE`, defaulting to `toy`.
    pub fn from_env() -> Result<Self> {
        match std::env::var(Self::ENV) {
            Ok(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", Self::ENV))),
            Err(_) => Ok(Profile::Toy),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub layers: usize,
    pub decoder_width: usize,
    pub input_hw: (usize, usize),
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            layers: 4,
            decoder_width: 64,
            input_hw: (64, 64),
        }
    }

    pub fn paper_shaped() -> Self {
        Self {
            backbone: BackboneConfig::paper_shaped(),
            layers: 4,
            decoder_width: PAPER_DECODER_WIDTH,
            input_hw: (384, 384),
        }
    }
}

/// Decoder width of the `paper` profile.
pub const PAPER_DECODER_WIDTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_smooth: f64,
    pub w_bce: f64,
    pub w_smooth: f64,
    pub w_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_smooth: 10.0,
            w_bce: 1.0,
            w_smooth: 1.0,
            w_dice: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub task: Task,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub weight_decay: f64,
    pub deterministic: bool,
    pub checkpoint_every: Option<u64>,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn toy(mode: TrainMode, task: Task) -> Self {
        Self {
            mode,
            task,
            lr: 1e-3,
            batch_size: 4,
            epochs: 5,
            max_steps: None,
            seed: 0,
            weight_decay: 0.0,
            deterministic: true,
            checkpoint_every: None,
            loss: LossConfig::default(),
        }
    }

    /// Published protocol: AdamW at 1e-5; batch 4 for 200 epochs when
    /// pre-training, batch 8 for 300 epochs when tuning prompts.
    pub fn paper(mode: TrainMode, task: Task) -> Self {
        let (batch_size, epochs) = match mode {
            TrainMode::Pretrain => (4, 200),
            _ => (8, 300),
        };
        Self {
            lr: 1e-5,
            batch_size,
            epochs,
            ..Self::toy(mode, task)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: PathBuf,
    pub rgb_dir: String,
    pub aux_dir: String,
    pub gt_dir: String,
    pub modality: Modality,
    pub target_size: (usize, usize),
}

/// Every configuration a command needs, resolved from a [`FlatConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<DataConfig>,
    pub output_dir: PathBuf,
}

pub const KNOWN_KEYS: &[&str] = &[
    "profile",
    "data.root",
    "data.rgb_dir",
    "data.aux_dir",
    "data.gt_dir",
    "data.modality",
    "data.height",
    "data.width",
    "backbone.channels",
    "backbone.variant",
    "transformer.layers",
    "decoder.width",
    "loss.alpha_smooth",
    "loss.w_bce",
    "loss.w_smooth",
    "loss.w_dice",
    "train.mode",
    "train.task",
    "train.lr",
    "train.batch_size",
    "train.epochs",
    "train.max_steps",
    "train.seed",
    "train.weight_decay",
    "train.deterministic",
    "train.checkpoint_every",
    "output.dir",
];

/// Ordered dotted-key configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatConfig(pub BTreeMap<String, String>);

impl FlatConfig {
    /// Profile defaults. Batch size and epochs are left unset so they can
    /// follow the training mode.
    pub fn defaults(profile: Profile) -> Self {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: &str| {
            m.insert(k.to_string(), v.to_string());
        };
        put("profile", profile.name());
        put("data.rgb_dir", "RGB");
        put("data.aux_dir", "Aux");
        put("data.gt_dir", "GT");
        put("data.modality", "rgb");
        put("backbone.variant", "toy_conv");
        put("transformer.layers", "4");
        put("loss.alpha_smooth", "10");
        put("loss.w_bce", "1");
        put("loss.w_smooth", "1");
        put("loss.w_dice", "1");
        put("train.mode", "pretrain");
        put("train.task", "rgb");
        put("train.seed", "0");
        put("train.weight_decay", "0");
        put("train.deterministic", "true");
        put("output.dir", "runs");
        match profile {
            Profile::Toy => {
                put("data.height", "64");
                put("data.width", "64");
                put("backbone.channels", "16,32,64,128");
                put("decoder.width", "64");
                put("train.lr", "0.001");
            }
            Profile::Paper => {
                put("data.height", "384");
                put("data.width", "384");
                put("backbone.channels", "128,256,512,1024");
                put("decoder.width", &PAPER_DECODER_WIDTH.to_string());
                put("train.lr", "0.00001");
            }
        }
        FlatConfig(m)
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(FlatConfig(m))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `other` on top of `self`.
    pub fn overlay(&mut self, other: &FlatConfig) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{assignment}`")))?;
        self.0.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None | Some("") => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("bad value `{v}` for key `{key}`: {e}"))),
        }
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.parsed(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn string(&self, key: &str) -> Result<String> {
        self.get(key)
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Validates keys and builds typed settings.
    pub fn resolve(&self) -> Result<Settings> {
        if let Some(k) = self.0.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        let profile: Profile = self.required("profile")?;
        let channels_raw = self.string("backbone.channels")?;
        let parts: Vec<&str> = channels_raw.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "bad value `{channels_raw}` for key `backbone.channels`: expected 4 comma-separated widths"
            )));
        }
        let mut channels = [0usize; 4];
        for (c, p) in channels.iter_mut().zip(&parts) {
            *c = p.parse().map_err(|e| {
                Error::Config(format!(
                    "bad value `{channels_raw}` for key `backbone.channels`: {e}"
                ))
            })?;
        }
        let variant = match self.string("backbone.variant")?.as_str() {
            "toy_conv" => BackboneVariant::ToyConv,
            "external" => BackboneVariant::External,
            other => {
                return Err(Error::Config(format!(
                    "bad value `{other}` for key `backbone.variant`: expected toy_conv or external"
                )))
            }
        };
        let backbone = BackboneConfig { channels, variant };
        backbone.validate()?;
        let height: usize = self.required("data.height")?;
        let width: usize = self.required("data.width")?;
        if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "data.height/data.width must be positive multiples of 32, got {height}x{width}"
            )));
        }
        let model = ModelConfig {
            backbone,
            layers: self.required("transformer.layers")?,
            decoder_width: self.required("decoder.width")?,
            input_hw: (height, width),
        };
        if model.decoder_width == 0 {
            return Err(Error::Config("decoder.width must be >= 1".into()));
        }

        let mode: TrainMode = self.required("train.mode")?;
        let task: Task = self.required("train.task")?;
        let base = match profile {
            Profile::Toy => TrainConfig::toy(mode, task),
            Profile::Paper => TrainConfig::paper(mode, task),
        };
        let train = TrainConfig {
            mode,
            task,
            lr: self.required("train.lr")?,
            batch_size: self.parsed("train.batch_size")?.unwrap_or(base.batch_size),
            epochs: self.parsed("train.epochs")?.unwrap_or(base.epochs),
            max_steps: self.parsed("train.max_steps")?,
            seed: self.required("train.seed")?,
            weight_decay: self.required("train.weight_decay")?,
            deterministic: self.required("train.deterministic")?,
            checkpoint_every: self.parsed("train.checkpoint_every")?,
            loss: LossConfig {
                alpha_smooth: self.required("loss.alpha_smooth")?,
                w_bce: self.required("loss.w_bce")?,
                w_smooth: self.required("loss.w_smooth")?,
                w_dice: self.required("loss.w_dice")?,
            },
        };
        if train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(train.lr.is_finite() && train.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", train.lr)));
        }

        let data = match self.get("data.root") {
            None | Some("") => None,
            Some(root) => Some(DataConfig {
                root: PathBuf::from(root),
                rgb_dir: self.string("data.rgb_dir")?,
                aux_dir: self.string("data.aux_dir")?,
                gt_dir: self.string("data.gt_dir")?,
                modality: self.required("data.modality")?,
                target_size: (height, width),
            }),
        };
        Ok(Settings {
            profile,
            model,
            train,
            data,
            output_dir: PathBuf::from(self.string("output.dir")?),
        })
    }
}
