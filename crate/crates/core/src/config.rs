//! Plain-text `key=value` training configuration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DEFAULT_RESOLUTION;
use crate::error::{Error, Result};
use crate::features::{DEFAULT_HAAR_LEVELS, DEFAULT_PCA_DIM, DEFAULT_TEXTURE_DIM};
use crate::memory::Aggregation;
use crate::sae::DEFAULT_LATENT_DIM;
use crate::segnet::EmbeddingOperator;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Number of retrieved neighbours `T`.
    pub context_size: usize,
    pub operator: EmbeddingOperator,
    pub aggregation: Aggregation,
    pub resolution: usize,
    pub haar_levels: usize,
    pub texture_dim: usize,
    pub texture_epochs: usize,
    /// Pretrained backbone archive; `None` trains the small encoder.
    pub texture_weights: Option<PathBuf>,
    /// PCA width for pretrained features; 0 keeps the raw layer.
    pub pca_dim: usize,
    pub latent_dim: usize,
    pub sae_epochs: usize,
    /// Epochs of target fine-tuning for the transfer-learning baseline.
    pub finetune_epochs: usize,
    pub concat_width: usize,
    /// Target memory bound; `None` is unbounded.
    pub memory_capacity: Option<usize>,
    /// Source samples held out for in-domain testing by the benchmark.
    pub source_test: usize,
    /// Target samples (in id order) that feed memories and fine-tuning;
    /// the rest are test cases.
    pub target_memory: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 5,
            learning_rate: 1e-3,
            seed: 0,
            context_size: 5,
            operator: EmbeddingOperator::Average,
            aggregation: Aggregation::Average,
            resolution: DEFAULT_RESOLUTION,
            haar_levels: DEFAULT_HAAR_LEVELS,
            texture_dim: DEFAULT_TEXTURE_DIM,
            texture_epochs: 30,
            texture_weights: None,
            pca_dim: DEFAULT_PCA_DIM,
            latent_dim: DEFAULT_LATENT_DIM,
            sae_epochs: 60,
            finetune_epochs: 100,
            concat_width: 128,
            memory_capacity: None,
            source_test: 20,
            target_memory: 40,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enum_err = |e: Error| Error::Config(format!("{key}: {e}"));
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "context_size" => self.context_size = parse_num(key, value)?,
            "operator" => self.operator = value.parse().map_err(enum_err)?,
            "aggregation" => self.aggregation = value.parse().map_err(enum_err)?,
            "resolution" => self.resolution = parse_num(key, value)?,
            "haar_levels" => self.haar_levels = parse_num(key, value)?,
            "texture_dim" => self.texture_dim = parse_num(key, value)?,
            "texture_epochs" => self.texture_epochs = parse_num(key, value)?,
            "texture_weights" => {
                self.texture_weights = (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            "pca_dim" => self.pca_dim = parse_num(key, value)?,
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "sae_epochs" => self.sae_epochs = parse_num(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse_num(key, value)?,
            "concat_width" => self.concat_width = parse_num(key, value)?,
            "memory_capacity" => {
                self.memory_capacity = match value {
                    "full" | "none" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "source_test" => self.source_test = parse_num(key, value)?,
            "target_memory" => self.target_memory = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("context_size", self.context_size),
            ("resolution", self.resolution),
            ("texture_dim", self.texture_dim),
            ("latent_dim", self.latent_dim),
            ("concat_width", self.concat_width),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a multiple of 16, got {}",
                self.resolution
            )));
        }
        if self.haar_levels == 0 || self.resolution % (1 << self.haar_levels) != 0 {
            return Err(Error::Config(format!(
                "haar_levels {} does not divide resolution {}",
                self.haar_levels, self.resolution
            )));
        }
        if self.latent_dim % 64 != 0 {
            return Err(Error::Config("latent_dim must be a multiple of 64".into()));
        }
        if self.memory_capacity == Some(0) {
            return Err(Error::Config("memory_capacity must be positive or full".into()));
        }
        Ok(())
    }

    /// Canonical text form; [`Self::parse`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("seed", self.seed.to_string());
        kv("context_size", self.context_size.to_string());
        kv("operator", self.operator.to_string());
        kv("aggregation", self.aggregation.to_string());
        kv("resolution", self.resolution.to_string());
        kv("haar_levels", self.haar_levels.to_string());
        kv("texture_dim", self.texture_dim.to_string());
        kv("texture_epochs", self.texture_epochs.to_string());
        kv(
            "texture_weights",
            self.texture_weights
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        );
        kv("pca_dim", self.pca_dim.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("sae_epochs", self.sae_epochs.to_string());
        kv("finetune_epochs", self.finetune_epochs.to_string());
        kv("concat_width", self.concat_width.to_string());
        kv(
            "memory_capacity",
            self.memory_capacity.map_or_else(|| "full".to_string(), |c| c.to_string()),
        );
        kv("source_test", self.source_test.to_string());
        kv("target_memory", self.target_memory.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.context_size), (100, 5, 5));
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.operator, EmbeddingOperator::Average);
        assert_eq!(c.latent_dim, 256);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.learning_rate = 3.3e-4;
        c.memory_capacity = Some(50);
        c.texture_weights = Some("w/vgg.ctxw".into());
        c.operator = EmbeddingOperator::Concat;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn partial_file_with_comments() {
        let c = TrainConfig::parse("# desk run\nepochs = 7\n\nresolution=64\noperator=sum\n").unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.resolution, 64);
        assert_eq!(c.operator, EmbeddingOperator::Sum);
        assert_eq!(c.batch_size, 5);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "epoch=3",
            "epochs=3\nepochs=4",
            "epochs",
            "epochs=-1",
            "operator=product",
            "resolution=40",
            "latent_dim=100",
            "memory_capacity=0",
            "learning_rate=0",
        ] {
            assert!(matches!(TrainConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
