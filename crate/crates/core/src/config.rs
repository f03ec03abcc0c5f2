//! Training configuration, built-in profiles and the architecture
//! fingerprint stored in checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How the forward and inverse summaries are fused before predicting proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Attention,
}

/// How the top-1 proposal is chosen at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "vote")]
    Vote,
    #[serde(rename = "attn")]
    AttentionScore,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vote" => Ok(Self::Vote),
            "attn" | "attention" => Ok(Self::AttentionScore),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (vote|attn)"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vote => "vote",
            Self::AttentionScore => "attn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Charades,
    Activitynet,
    Synthetic,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "charades" => Ok(Self::Charades),
            "activitynet" => Ok(Self::Activitynet),
            "synthetic" => Ok(Self::Synthetic),
            _ => Err(Error::Config(format!(
                "unknown profile `{s}` (charades|activitynet|synthetic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Sampled clips per video.
    pub n_v: usize,
    /// Words per query.
    pub n_q: usize,
    pub d_v: usize,
    pub d_w: usize,
    /// Vocabulary size, reserved tokens included.
    pub vocab_size: usize,
    pub d_h: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    /// Gaussian mask sharpness.
    pub alpha: f64,
    pub width_cap: f64,
    /// Proposals per query.
    pub k: usize,
    pub fusion_mode: FusionMode,
    /// Inverse-query stream.
    pub mt_enabled: bool,
    /// Multiple proposals; `k` is forced to 1 when off.
    pub mc_enabled: bool,
    pub epochs: usize,
    pub seed: u64,
    pub inference_strategy: Strategy,
    /// When set, a vote counts 1 for each peer with IoU above this value
    /// instead of the continuous IoU sum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_threshold: Option<f64>,
    pub layers: usize,
    pub heads: usize,
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Charades => Self {
                learning_rate: 4e-4,
                batch_size: 128,
                n_v: 200,
                n_q: 20,
                d_v: 1024,
                d_w: 300,
                vocab_size: 1111,
                d_h: 256,
                beta1: 0.1,
                beta2: 0.15,
                beta3: 0.1,
                beta4: 0.15,
                alpha: 5.5,
                width_cap: 0.45,
                k: 10,
                fusion_mode: FusionMode::Attention,
                mt_enabled: true,
                mc_enabled: true,
                epochs: 30,
                seed: 0,
                inference_strategy: Strategy::Vote,
                vote_threshold: None,
                layers: 3,
                heads: 4,
                grad_clip: 5.0,
            },
            Profile::Activitynet => Self {
                batch_size: 64,
                d_v: 512,
                vocab_size: 8000,
                alpha: 5.0,
                width_cap: 1.0,
                k: 7,
                ..Self::profile(Profile::Charades)
            },
            Profile::Synthetic => Self {
                learning_rate: 1e-3,
                batch_size: 32,
                n_v: 32,
                n_q: 8,
                d_v: 16,
                d_w: 16,
                vocab_size: 50,
                d_h: 32,
                alpha: 5.0,
                width_cap: 1.0,
                k: 3,
                epochs: 30,
                seed: 7,
                ..Self::profile(Profile::Charades)
            },
        }
    }

    /// Reads a TOML file whose keys override a base profile. The base is the
    /// file's own `profile` key if present, else `fallback`.
    pub fn from_file(path: &Path, fallback: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_toml_str(&text, fallback).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str, fallback: Profile) -> Result<Self> {
        let mut overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match overrides.remove("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => fallback,
        };
        let mut base = toml::Table::try_from(Self::profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            if !base.contains_key(&key) && key != "vote_threshold" {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
            base.insert(key, value);
        }
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.normalized().validated()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies derived settings: a single proposal without multi-proposal
    /// collaboration.
    pub fn normalized(mut self) -> Self {
        if !self.mc_enabled {
            self.k = 1;
        }
        self
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("n_v", self.n_v),
            ("n_q", self.n_q),
            ("d_v", self.d_v),
            ("d_w", self.d_w),
            ("d_h", self.d_h),
            ("k", self.k),
            ("layers", self.layers),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.vocab_size < crate::data::RESERVED_TOKENS.len() + 1 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond reserved tokens",
                self.vocab_size
            )));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("beta4", self.beta4),
        ] {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if self.beta1 >= self.beta2 {
            return Err(Error::Config("beta1 must be smaller than beta2".into()));
        }
        if self.beta3 >= self.beta4 {
            return Err(Error::Config("beta3 must be smaller than beta4".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.width_cap > 0.0 && self.width_cap <= 1.0) {
            return Err(Error::Config("width_cap must lie in (0, 1]".into()));
        }
        if self.d_h % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_h ({})",
                self.heads, self.d_h
            )));
        }
        if !self.mc_enabled && self.k != 1 {
            return Err(Error::Config("k must be 1 when mc_enabled is false".into()));
        }
        if let Some(t) = self.vote_threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config("vote_threshold must lie in [0, 1)".into()));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Hash of every setting that changes parameter shapes or the forward pass.
    pub fn fingerprint(&self) -> String {
        let arch = serde_json::json!({
            "n_v": self.n_v,
            "n_q": self.n_q,
            "d_v": self.d_v,
            "d_w": self.d_w,
            "vocab_size": self.vocab_size,
            "d_h": self.d_h,
            "k": self.k,
            "fusion_mode": self.fusion_mode,
            "mt_enabled": self.mt_enabled,
            "layers": self.layers,
            "heads": self.heads,
            "alpha": self.alpha,
            "width_cap": self.width_cap,
        });
        let digest = Sha256::digest(arch.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Synthetic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_profiles_validate() {
        for p in [Profile::Charades, Profile::Activitynet, Profile::Synthetic] {
            TrainConfig::profile(p).validate().unwrap();
        }
    }

    #[test]
    fn mc_off_forces_single_proposal() {
        let cfg = TrainConfig {
            mc_enabled: false,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(cfg.normalized().k, 1);
    }

    #[test]
    fn margins_must_be_ordered() {
        let cfg = TrainConfig {
            beta1: 0.2,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            beta3: 0.15,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_overrides_profile() {
        let cfg = TrainConfig::from_toml_str(
            "profile = \"activitynet\"\nepochs = 3\nfusion_mode = \"concat\"\ninference_strategy = \"attn\"\n",
            Profile::Synthetic,
        )
        .unwrap();
        assert_eq!(cfg.d_v, 512);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.fusion_mode, FusionMode::Concat);
        assert_eq!(cfg.inference_strategy, Strategy::AttentionScore);
        assert!(TrainConfig::from_toml_str("bogus = 1", Profile::Synthetic).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = TrainConfig::profile(Profile::Charades);
        let back = TrainConfig::from_toml_str(&cfg.to_toml(), Profile::Synthetic).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn fingerprint_tracks_architecture_only() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            learning_rate: 0.1,
            epochs: 99,
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = TrainConfig { k: 4, ..a.clone() };
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
