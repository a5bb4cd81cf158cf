//! Experiment configuration: a flat key=value file (one per line, `#`
//! comments) mapped onto [`ExperimentConfig`]. Parse errors name the
//! offending key and line.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{VeConfig, VeKind};
use crate::scene::{SceneConfig, TaskKind};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub ves: Vec<VeKind>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub max_text_len: usize,
    pub ve_dropout_training: bool,
    pub eval_sample: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    pub corpus_seed: u64,
    pub pool_size: usize,
    pub scene: SceneConfig,
    pub ve_config: VeConfig,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub type_embeddings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Qa,
            ves: vec![VeKind::Region, VeKind::Grid],
            seeds: vec![1, 2, 3],
            epochs: 10,
            batch_size: 64,
            learning_rate: 5e-4,
            warmup_fraction: 0.05,
            weight_decay: 0.05,
            max_text_len: 96,
            ve_dropout_training: false,
            eval_sample: 512,
            train_examples: 1200,
            val_examples: 160,
            test_examples: 320,
            corpus_seed: 9001,
            pool_size: 32,
            scene: SceneConfig::default(),
            ve_config: VeConfig::default(),
            layers: 4,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            dropout: 0.1,
            type_embeddings: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoreError::Config("seeds must be non-empty".into()));
        }
        if self.batch_size < 1 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be > 0".into()));
        }
        if self.ves.is_empty() {
            return Err(CoreError::Config("ves must name at least one encoder".into()));
        }
        if self.pool_size < 2 {
            return Err(CoreError::Config("pool_size must be >= 2".into()));
        }
        self.scene.validate()?;
        self.ve_config.validate()
    }

    /// Stable FNV-1a hash of the canonical JSON form; used for resume
    /// manifests and checkpoint provenance.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn parse_list_ves(value: &str) -> Result<Vec<VeKind>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(VeKind::parse).collect()
}

fn parse_list_u64(value: &str) -> Option<Vec<u64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().ok())
        .collect()
}

/// Parse the key=value experiment file. Unknown keys and malformed values
/// are configuration errors naming the key and line number.
pub fn parse_config_str(content: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CoreError::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |key: &str| {
            CoreError::Config(format!(
                "line {}: invalid value `{value}` for key `{key}`",
                lineno + 1
            ))
        };
        match key {
            "task" => {
                cfg.task = match value {
                    "qa" => TaskKind::Qa,
                    "matching" => TaskKind::Matching,
                    _ => return Err(bad(key)),
                }
            }
            "ves" => cfg.ves = parse_list_ves(value)?,
            "seeds" => cfg.seeds = parse_list_u64(value).ok_or_else(|| bad(key))?,
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad(key))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad(key))?,
            "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad(key))?,
            "warmup_fraction" => cfg.warmup_fraction = value.parse().map_err(|_| bad(key))?,
            "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad(key))?,
            "max_text_len" => cfg.max_text_len = value.parse().map_err(|_| bad(key))?,
            "ve_dropout_training" => {
                cfg.ve_dropout_training = value.parse().map_err(|_| bad(key))?
            }
            "eval_sample" => cfg.eval_sample = value.parse().map_err(|_| bad(key))?,
            "train_examples" => cfg.train_examples = value.parse().map_err(|_| bad(key))?,
            "val_examples" => cfg.val_examples = value.parse().map_err(|_| bad(key))?,
            "test_examples" => cfg.test_examples = value.parse().map_err(|_| bad(key))?,
            "corpus_seed" => cfg.corpus_seed = value.parse().map_err(|_| bad(key))?,
            "pool_size" => cfg.pool_size = value.parse().map_err(|_| bad(key))?,
            "canvas" => cfg.scene.canvas = value.parse().map_err(|_| bad(key))?,
            "min_objects" => cfg.scene.min_objects = value.parse().map_err(|_| bad(key))?,
            "max_objects" => cfg.scene.max_objects = value.parse().map_err(|_| bad(key))?,
            "unique_attribute_pairs" => {
                cfg.scene.unique_attribute_pairs = value.parse().map_err(|_| bad(key))?
            }
            "frozen_seed" => cfg.ve_config.frozen_seed = value.parse().map_err(|_| bad(key))?,
            "region_jitter_std" => {
                cfg.ve_config.region_jitter_std = value.parse().map_err(|_| bad(key))?
            }
            "layers" => cfg.layers = value.parse().map_err(|_| bad(key))?,
            "heads" => cfg.heads = value.parse().map_err(|_| bad(key))?,
            "model_dim" => cfg.model_dim = value.parse().map_err(|_| bad(key))?,
            "ffn_dim" => cfg.ffn_dim = value.parse().map_err(|_| bad(key))?,
            "dropout" => cfg.dropout = value.parse().map_err(|_| bad(key))?,
            "type_embeddings" => cfg.type_embeddings = value.parse().map_err(|_| bad(key))?,
            other => {
                return Err(CoreError::Config(format!(
                    "line {}: unknown configuration key `{other}`",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(CoreError::MissingInput(format!("config file {}", path.display())));
    }
    parse_config_str(&std::fs::read_to_string(path)?)
}

/// Render a config back to the key=value format (round-trips through
/// [`parse_config_str`]).
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let ves: Vec<&str> = cfg.ves.iter().map(|v| v.as_str()).collect();
    let seeds: Vec<String> = cfg.seeds.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(s, "task = {}", cfg.task.as_str());
    let _ = writeln!(s, "ves = {}", ves.join(","));
    let _ = writeln!(s, "seeds = {}", seeds.join(","));
    let _ = writeln!(s, "epochs = {}", cfg.epochs);
    let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(s, "learning_rate = {}", cfg.learning_rate);
    let _ = writeln!(s, "warmup_fraction = {}", cfg.warmup_fraction);
    let _ = writeln!(s, "weight_decay = {}", cfg.weight_decay);
    let _ = writeln!(s, "max_text_len = {}", cfg.max_text_len);
    let _ = writeln!(s, "ve_dropout_training = {}", cfg.ve_dropout_training);
    let _ = writeln!(s, "eval_sample = {}", cfg.eval_sample);
    let _ = writeln!(s, "train_examples = {}", cfg.train_examples);
    let _ = writeln!(s, "val_examples = {}", cfg.val_examples);
    let _ = writeln!(s, "test_examples = {}", cfg.test_examples);
    let _ = writeln!(s, "corpus_seed = {}", cfg.corpus_seed);
    let _ = writeln!(s, "pool_size = {}", cfg.pool_size);
    let _ = writeln!(s, "canvas = {}", cfg.scene.canvas);
    let _ = writeln!(s, "min_objects = {}", cfg.scene.min_objects);
    let _ = writeln!(s, "max_objects = {}", cfg.scene.max_objects);
    let _ = writeln!(s, "unique_attribute_pairs = {}", cfg.scene.unique_attribute_pairs);
    let _ = writeln!(s, "frozen_seed = {}", cfg.ve_config.frozen_seed);
    let _ = writeln!(s, "region_jitter_std = {}", cfg.ve_config.region_jitter_std);
    let _ = writeln!(s, "layers = {}", cfg.layers);
    let _ = writeln!(s, "heads = {}", cfg.heads);
    let _ = writeln!(s, "model_dim = {}", cfg.model_dim);
    let _ = writeln!(s, "ffn_dim = {}", cfg.ffn_dim);
    let _ = writeln!(s, "dropout = {}", cfg.dropout);
    let _ = writeln!(s, "type_embeddings = {}", cfg.type_embeddings);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_kv_format() {
        let mut cfg = ExperimentConfig::default();
        cfg.task = TaskKind::Matching;
        cfg.ves = vec![VeKind::Grid, VeKind::Patch];
        cfg.seeds = vec![7];
        cfg.learning_rate = 2e-4;
        let rendered = render_config(&cfg);
        let parsed = parse_config_str(&rendered).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str("epochz = 10").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epochz"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = parse_config_str("epochs = ten").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epochs"), "{msg}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = parse_config_str("# a comment\n\nepochs = 3\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.epochs += 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
