//! Training configuration and its flat `key=value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which layers an integration method touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Integration {
    #[default]
    Off,
    /// First layer only.
    Shallow,
    /// Every layer.
    Deep,
}

impl Integration {
    /// Whether 0-based layer `n` participates.
    pub fn applies(self, n: usize) -> bool {
        match self {
            Integration::Off => false,
            Integration::Shallow => n == 0,
            Integration::Deep => true,
        }
    }

    pub fn is_on(self) -> bool {
        self != Integration::Off
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Integration::Off => "off",
            Integration::Shallow => "shallow",
            Integration::Deep => "deep",
        }
    }
}

impl FromStr for Integration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Integration::Off),
            "shallow" => Ok(Integration::Shallow),
            "deep" => Ok(Integration::Deep),
            _ => Err(Error::Config(format!("expected off|shallow|deep, got `{s}`"))),
        }
    }
}

/// Side of the translation model an integration method is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "src" => Ok(Side::Source),
            "target" | "trg" | "tgt" => Ok(Side::Target),
            _ => Err(Error::Config(format!("expected source|target, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Representation layers of each language model (layer 1 is the
    /// embedding layer).
    pub lm_layers: usize,
    /// Encoder and decoder layers of the translation model.
    pub layers: usize,
    pub warmup: usize,
    pub lr_scale: f64,
    pub token_budget: usize,
    pub max_steps: usize,
    pub lm_steps: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub clip_norm: f64,
    pub fusion: Integration,
    pub kt: Integration,
    pub kt_scale: f64,
    /// Use only the forward language model's representations.
    pub uni_directional: bool,
    pub fusion_side: Side,
    pub kt_side: Side,
    pub vocab_size: usize,
    pub valid_every: usize,
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 512,
            d_ff: 2048,
            heads: 8,
            lm_layers: 6,
            layers: 6,
            warmup: 4000,
            lr_scale: 1.0,
            token_budget: 4096,
            max_steps: 100_000,
            lm_steps: 100_000,
            seed: 1,
            label_smoothing: 0.1,
            dropout: 0.1,
            clip_norm: 5.0,
            fusion: Integration::Off,
            kt: Integration::Off,
            kt_scale: 1.0,
            uni_directional: false,
            fusion_side: Side::Source,
            kt_side: Side::Target,
            vocab_size: 32_000,
            valid_every: 500,
            beam: 4,
            length_penalty: 0.6,
            max_len: 200,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Small model suited to a single CPU core.
    pub fn desk() -> Self {
        Self {
            d: 32,
            d_ff: 64,
            heads: 4,
            lm_layers: 3,
            layers: 3,
            warmup: 200,
            lr_scale: 1.0,
            token_budget: 384,
            max_steps: 3000,
            lm_steps: 1500,
            dropout: 0.0,
            vocab_size: 4000,
            valid_every: 500,
            max_len: 40,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d" => self.d = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "lm_layers" => self.lm_layers = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "lr_scale" => self.lr_scale = parse(key, v)?,
            "token_budget" => self.token_budget = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "lm_steps" => self.lm_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "label_smoothing" => self.label_smoothing = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "kt" => self.kt = v.parse()?,
            "kt_scale" => self.kt_scale = parse(key, v)?,
            "uni_directional" => self.uni_directional = parse(key, v)?,
            "fusion_side" => self.fusion_side = v.parse()?,
            "kt_side" => self.kt_side = v.parse()?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "valid_every" => self.valid_every = parse(key, v)?,
            "beam" => self.beam = parse(key, v)?,
            "length_penalty" => self.length_penalty = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {} is not key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("d", self.d.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("heads", self.heads.to_string());
        kv("lm_layers", self.lm_layers.to_string());
        kv("layers", self.layers.to_string());
        kv("warmup", self.warmup.to_string());
        kv("lr_scale", self.lr_scale.to_string());
        kv("token_budget", self.token_budget.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("lm_steps", self.lm_steps.to_string());
        kv("seed", self.seed.to_string());
        kv("label_smoothing", self.label_smoothing.to_string());
        kv("dropout", self.dropout.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("fusion", self.fusion.as_str().into());
        kv("kt", self.kt.as_str().into());
        kv("kt_scale", self.kt_scale.to_string());
        kv("uni_directional", self.uni_directional.to_string());
        kv("fusion_side", self.fusion_side.as_str().into());
        kv("kt_side", self.kt_side.as_str().into());
        kv("vocab_size", self.vocab_size.to_string());
        kv("valid_every", self.valid_every.to_string());
        kv("beam", self.beam.to_string());
        kv("length_penalty", self.length_penalty.to_string());
        kv("max_len", self.max_len.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("lm_layers", self.lm_layers),
            ("layers", self.layers),
            ("warmup", self.warmup),
            ("token_budget", self.token_budget),
            ("beam", self.beam),
            ("max_len", self.max_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) || !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d={} must be even and divisible by heads={}",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("dropout and label_smoothing must lie in [0, 1)".into()));
        }
        if self.kt.is_on() && self.layers != self.lm_layers {
            return Err(Error::Config(format!(
                "knowledge transfer needs equal layer counts: translation model has {}, language model has {}",
                self.layers, self.lm_layers
            )));
        }
        Ok(())
    }
}
