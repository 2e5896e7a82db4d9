//! Flat `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and repeated keys are errors. `PANTHER_SEED` in the
//! environment overrides `seed`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use panther_core::decoder::Mode;
use panther_core::layers::Activation;
use panther_core::model::PantherConfig;
use panther_core::train::TrainConfig;
use panther_core::vision::{PromptScheme, VitConfig};

pub const SEED_ENV: &str = "PANTHER_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key}: invalid value {value:?}: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Threshold setting: a cosine threshold in `[0, 1]` or no pruning at all.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tau {
    Threshold(f64),
    Off,
}

impl FromStr for Tau {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "off" {
            return Ok(Tau::Off);
        }
        let v: f64 = s.parse().map_err(|_| "expected a number or \"off\"".to_string())?;
        if !(0.0..=1.0).contains(&v) {
            return Err("must lie in [0, 1]".into());
        }
        Ok(Tau::Threshold(v))
    }
}

impl std::fmt::Display for Tau {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tau::Threshold(v) => write!(f, "{v}"),
            Tau::Off => f.write_str("off"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub vit_depth: usize,
    pub vit_width: usize,
    pub vit_heads: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub scheme: PromptScheme,
    pub k_sp: usize,
    pub l_max: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_seed: u64,
    pub connector: Activation,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub max_len: usize,
    pub mode: Mode,
    pub bridge: bool,
    pub tau: Tau,
    pub seed: u64,
    pub lr_prompt: f64,
    pub lr_model: f64,
    pub grad_clip: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub precision: Precision,
    pub max_new: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = PantherConfig::default();
        let train = TrainConfig::default();
        Self::from_parts(&model, &train)
    }
}

impl RunConfig {
    fn from_parts(m: &PantherConfig, t: &TrainConfig) -> Self {
        Self {
            vit_depth: m.vit.depth,
            vit_width: m.vit.width,
            vit_heads: m.vit.heads,
            patch_size: m.vit.patch_size,
            image_height: m.vit.image_height,
            image_width: m.vit.image_width,
            channels: m.vit.channels,
            scheme: m.vit.scheme,
            k_sp: m.k_sp,
            l_max: m.l_max,
            text_width: m.text_width,
            text_depth: m.text_depth,
            text_heads: m.text_heads,
            text_seed: m.text_seed,
            connector: m.connector_act,
            decoder_depth: m.decoder_depth,
            decoder_width: m.decoder_width,
            decoder_heads: m.decoder_heads,
            max_len: m.max_len,
            mode: m.mode,
            bridge: t.tau.is_some(),
            tau: Tau::Threshold(t.tau.unwrap_or(0.95)),
            seed: t.seed,
            lr_prompt: t.lr_prompt,
            lr_model: t.lr_model,
            grad_clip: t.grad_clip,
            steps: t.steps,
            batch_size: t.batch_size,
            precision: if t.single_precision {
                Precision::F32
            } else {
                Precision::F64
            },
            max_new: 4,
        }
    }

    /// The micro model used for gradient checks, everything at width 8.
    pub fn micro() -> Self {
        Self::from_parts(&PantherConfig::micro(), &TrainConfig::default())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Applies `PANTHER_SEED` when set.
    pub fn with_env(mut self) -> Result<Self, ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, &v)?;
        }
        Ok(self)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "vit_depth" => self.vit_depth = parse(key, v)?,
            "vit_width" => self.vit_width = parse(key, v)?,
            "vit_heads" => self.vit_heads = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "scheme" => self.scheme = parse(key, v)?,
            "k_sp" => self.k_sp = parse(key, v)?,
            "l_max" => self.l_max = parse(key, v)?,
            "text_width" => self.text_width = parse(key, v)?,
            "text_depth" => self.text_depth = parse(key, v)?,
            "text_heads" => self.text_heads = parse(key, v)?,
            "text_seed" => self.text_seed = parse(key, v)?,
            "connector" => {
                self.connector = match v {
                    "gelu" => Activation::Gelu,
                    "identity" => Activation::Identity,
                    _ => return Err(bad(key, v, "expected gelu|identity")),
                }
            }
            "decoder_depth" => self.decoder_depth = parse(key, v)?,
            "decoder_width" => self.decoder_width = parse(key, v)?,
            "decoder_heads" => self.decoder_heads = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "bridge" => {
                self.bridge = match v {
                    "on" => true,
                    "off" => false,
                    _ => return Err(bad(key, v, "expected on|off")),
                }
            }
            "tau" => self.tau = v.parse().map_err(|e: String| bad(key, v, &e))?,
            "seed" => self.seed = parse(key, v)?,
            "lr_prompt" => self.lr_prompt = parse(key, v)?,
            "lr_model" => self.lr_model = parse(key, v)?,
            "grad_clip" => {
                self.grad_clip = if v == "off" { None } else { Some(parse(key, v)?) }
            }
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(bad(key, v, "expected f64|f32")),
                }
            }
            "max_new" => self.max_new = parse(key, v)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    /// Every key, one per line, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("vit_depth", self.vit_depth.to_string());
        put("vit_width", self.vit_width.to_string());
        put("vit_heads", self.vit_heads.to_string());
        put("patch_size", self.patch_size.to_string());
        put("image_height", self.image_height.to_string());
        put("image_width", self.image_width.to_string());
        put("channels", self.channels.to_string());
        put("scheme", self.scheme.to_string());
        put("k_sp", self.k_sp.to_string());
        put("l_max", self.l_max.to_string());
        put("text_width", self.text_width.to_string());
        put("text_depth", self.text_depth.to_string());
        put("text_heads", self.text_heads.to_string());
        put("text_seed", self.text_seed.to_string());
        put(
            "connector",
            match self.connector {
                Activation::Gelu => "gelu",
                Activation::Identity => "identity",
            }
            .into(),
        );
        put("decoder_depth", self.decoder_depth.to_string());
        put("decoder_width", self.decoder_width.to_string());
        put("decoder_heads", self.decoder_heads.to_string());
        put("max_len", self.max_len.to_string());
        put("mode", self.mode.to_string());
        put("bridge", if self.bridge { "on" } else { "off" }.into());
        put("tau", self.tau.to_string());
        put("seed", self.seed.to_string());
        put("lr_prompt", self.lr_prompt.to_string());
        put("lr_model", self.lr_model.to_string());
        put(
            "grad_clip",
            self.grad_clip.map_or("off".into(), |c| c.to_string()),
        );
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put(
            "precision",
            match self.precision {
                Precision::F64 => "f64",
                Precision::F32 => "f32",
            }
            .into(),
        );
        put("max_new", self.max_new.to_string());
        s
    }

    pub fn model_config(&self) -> PantherConfig {
        PantherConfig {
            vit: VitConfig {
                depth: self.vit_depth,
                width: self.vit_width,
                heads: self.vit_heads,
                patch_size: self.patch_size,
                image_height: self.image_height,
                image_width: self.image_width,
                channels: self.channels,
                scheme: self.scheme,
            },
            k_sp: self.k_sp,
            l_max: self.l_max,
            text_width: self.text_width,
            text_depth: self.text_depth,
            text_heads: self.text_heads,
            text_seed: self.text_seed,
            connector_act: self.connector,
            decoder_depth: self.decoder_depth,
            decoder_width: self.decoder_width,
            decoder_heads: self.decoder_heads,
            max_len: self.max_len,
            mode: self.mode,
        }
    }

    /// Pruning threshold in effect: `None` when the bridge is off or
    /// `tau=off`.
    pub fn effective_tau(&self) -> Option<f64> {
        match (self.bridge, self.tau) {
            (true, Tau::Threshold(t)) => Some(t),
            _ => None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr_prompt: self.lr_prompt,
            lr_model: self.lr_model,
            tau: self.effective_tau(),
            grad_clip: self.grad_clip,
            single_precision: self.precision == Precision::F32,
            seed: self.seed,
        }
    }
}

const KEYS: [&str; 30] = [
    "vit_depth",
    "vit_width",
    "vit_heads",
    "patch_size",
    "image_height",
    "image_width",
    "channels",
    "scheme",
    "k_sp",
    "l_max",
    "text_width",
    "text_depth",
    "text_heads",
    "text_seed",
    "connector",
    "decoder_depth",
    "decoder_width",
    "decoder_heads",
    "max_len",
    "mode",
    "bridge",
    "tau",
    "seed",
    "lr_prompt",
    "lr_model",
    "grad_clip",
    "steps",
    "batch_size",
    "precision",
    "max_new",
];

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, &e.to_string()))
}
