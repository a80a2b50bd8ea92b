//! Flat `key=value` run configuration.
//!
//! Every key has a default; unknown keys are rejected. Values can be
//! overridden from the environment as `HIGARMENT_<KEY>` (key uppercased).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hca::{HcaConfig, SimilaritySource};
use crate::optim::AdamWConfig;

pub const ENV_PREFIX: &str = "HIGARMENT_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// No fabric path; the raw encoder features are used unchanged.
    NoMmse,
    /// Context is the plain concatenation of the enhanced pair, weight fixed at 1.
    NoHca,
}

macro_rules! text_enum {
    ($t:ty { $($v:path => $s:literal),+ }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(format!("expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
    };
}

text_enum!(Precision { Precision::F32 => "f32", Precision::F64 => "f64" });
text_enum!(Variant { Variant::Full => "full", Variant::NoMmse => "no_mmse", Variant::NoHca => "no_hca" });
text_enum!(SimilaritySource { SimilaritySource::Raw => "raw", SimilaritySource::Enhanced => "enhanced" });

macro_rules! run_config {
    ($( $(#[$doc:meta])* $key:ident : $ty:ty = $default:expr ),+ $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $key: $ty, )+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default, )+ }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),+];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: `{value}`: {e}")))?;
                    } )+
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($key), format_value(&self.$key)) ),+]
            }
        }
    };
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn format(&self) -> String;
}

macro_rules! via_from_str {
    ($($t:ty),+) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn format(&self) -> String {
                self.to_string()
            }
        }
    )+};
}

via_from_str!(u64, usize, f64, bool, String, Precision, Variant, SimilaritySource);

impl ConfigValue for Option<f64> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "" | "none" => Ok(None),
            _ => s.parse().map(Some).map_err(|e: std::num::ParseFloatError| e.to_string()),
        }
    }
    fn format(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.to_string())
    }
}

fn parse_value<T: ConfigValue>(s: &str) -> std::result::Result<T, String> {
    T::parse(s)
}

fn format_value<T: ConfigValue>(v: &T) -> String {
    v.format()
}

run_config! {
    seed: u64 = 0,
    /// f32 rounds parameters to single precision after init and every update.
    precision: Precision = Precision::F32,
    d_model: usize = 64,
    /// Patch size of the sketch and swatch encoders.
    patch: usize = 8,
    n_queries: usize = 8,
    max_prompt_len: usize = 16,
    subword_buckets: usize = 64,
    lambda: f64 = 0.6,
    alpha_override: Option<f64> = None,
    similarity_source: SimilaritySource = SimilaritySource::Raw,
    detach_alpha: bool = false,
    variant: Variant = Variant::Full,
    image_size: usize = 32,
    swatch_size: usize = 32,
    timesteps: usize = 1000,
    beta_start: f64 = 1e-4,
    beta_end: f64 = 0.02,
    ddim_steps: usize = 50,
    lr: f64 = 1e-4,
    weight_decay: f64 = 0.01,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    eps: f64 = 1e-8,
    batch_size: usize = 8,
    steps: usize = 2000,
    denoiser_patch: usize = 4,
    denoiser_width1: usize = 64,
    denoiser_width2: usize = 128,
    time_dim: usize = 32,
    freeze_denoiser: bool = false,
    /// Fabric database file; empty builds one from the grammar.
    db: String = String::new(),
    /// Number of fixed (t, ε) draws per sample used for the probe loss.
    probe_draws: usize = 8,
}

impl RunConfig {
    /// Parse `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `HIGARMENT_<KEY>` variables found through `lookup`.
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Vec<String>> {
        let mut applied = Vec::new();
        for key in Self::KEYS {
            let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
            if let Some(v) = lookup(&var) {
                self.set(key, &v)?;
                applied.push(var);
            }
        }
        Ok(applied)
    }

    pub fn apply_env(&mut self) -> Result<Vec<String>> {
        self.apply_env_with(|k| std::env::var(k).ok())
    }

    /// Every key, one per line, in declaration order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("patch", self.patch),
            ("n_queries", self.n_queries),
            ("max_prompt_len", self.max_prompt_len),
            ("subword_buckets", self.subword_buckets),
            ("image_size", self.image_size),
            ("swatch_size", self.swatch_size),
            ("timesteps", self.timesteps),
            ("ddim_steps", self.ddim_steps),
            ("batch_size", self.batch_size),
            ("denoiser_patch", self.denoiser_patch),
            ("denoiser_width1", self.denoiser_width1),
            ("denoiser_width2", self.denoiser_width2),
            ("time_dim", self.time_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch) || !self.swatch_size.is_multiple_of(self.patch) {
            return Err(Error::Config("image_size and swatch_size must be multiples of patch".into()));
        }
        if !self.image_size.is_multiple_of(2 * self.denoiser_patch) {
            return Err(Error::Config("image_size must be a multiple of 2·denoiser_patch".into()));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even".into()));
        }
        if self.ddim_steps > self.timesteps || !self.timesteps.is_multiple_of(self.ddim_steps) {
            return Err(Error::Config("ddim_steps must divide timesteps".into()));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config("need 0 < beta_start <= beta_end < 1".into()));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config("need lr > 0, weight_decay >= 0, eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        self.hca().validate()
    }

    pub fn hca(&self) -> HcaConfig {
        HcaConfig {
            lambda: self.lambda,
            alpha_override: self.alpha_override,
            similarity: self.similarity_source,
            detach_alpha: self.detach_alpha,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.ddim_steps, 50);
        assert_eq!(c.lambda, 0.6);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.alpha_override = Some(0.7);
        c.variant = Variant::NoHca;
        c.db = "x/db.jsonl".into();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("seed=1\nlearning_rate=0.1\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn bad_values() {
        assert!(RunConfig::parse("steps=-1").is_err());
        assert!(RunConfig::parse("variant=half").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\nsteps = 5 # short\n").unwrap();
        assert_eq!(c.steps, 5);
    }

    #[test]
    fn env_overrides() {
        let mut c = RunConfig::default();
        let applied = c
            .apply_env_with(|k| (k == "HIGARMENT_STEPS").then(|| "7".to_string()))
            .unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(applied, vec!["HIGARMENT_STEPS".to_string()]);
    }

    #[test]
    fn validation_catches_inconsistent_sizes() {
        let mut c = RunConfig::default();
        c.image_size = 36;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.lambda = 1.0;
        assert!(c.validate().is_err());
    }
}
