//! Run configuration: a flat UTF-8 `key = value` file with `#` comments.
//! Unknown keys are rejected; command-line flags override file values.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::decoder::{Activation, DecoderConfig};
use crate::error::{Error, Result};
use crate::model::SelectionMechanism;

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Number of decoder heads.
    pub m: usize,
    /// Per-head layer counts (a single value broadcasts to all heads).
    pub layers: Vec<usize>,
    /// Per-head attention-head counts.
    pub heads: Vec<usize>,
    pub d_model: usize,
    pub d_mlp: usize,
    pub max_len: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub selection: SelectionKind,
    pub selection_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    pub max_new_tokens: usize,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Keys that appeared explicitly (file or override), for detecting
    /// conflicts with a checkpoint header.
    explicit: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    Max,
    Random,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            m: 2,
            layers: vec![2],
            heads: vec![2],
            d_model: 32,
            d_mlp: 128,
            max_len: 64,
            activation: Activation::Gelu,
            learning_rate: 0.05,
            epochs: 10,
            temperature: 1.0,
            selection: SelectionKind::Max,
            selection_weights: None,
            seed: 0,
            grad_clip: None,
            log_every: 1,
            max_new_tokens: 64,
            corpus: None,
            vocab: None,
            checkpoint: None,
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("config line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn was_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key {key:?}: {what}"));
        let usize_of = |v: &str| v.parse::<usize>().map_err(|_| bad("expected an integer"));
        let f64_of = |v: &str| v.parse::<f64>().map_err(|_| bad("expected a number"));
        let list_of = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| bad("expected a list of integers"))
                })
                .collect()
        };
        match key {
            "m" => self.m = usize_of(value)?,
            "layers" => self.layers = list_of(value)?,
            "heads" => self.heads = list_of(value)?,
            "d_e" => self.d_model = usize_of(value)?,
            "d_mlp" => self.d_mlp = usize_of(value)?,
            "l_max" => self.max_len = usize_of(value)?,
            "activation" => self.activation = Activation::parse(value)?,
            "learning_rate" => self.learning_rate = f64_of(value)?,
            "epochs" => self.epochs = usize_of(value)?,
            "temperature" => self.temperature = f64_of(value)?,
            "selection" => {
                self.selection = match value {
                    "max" => SelectionKind::Max,
                    "random" => SelectionKind::Random,
                    other => return Err(bad(&format!("unknown selection {other:?}"))),
                }
            }
            "selection_weights" => {
                let weights = value
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|_| bad("expected a list of numbers"))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                self.selection_weights = Some(weights);
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("expected an integer"))?,
            "grad_clip" => self.grad_clip = Some(f64_of(value)?),
            "log_every" => self.log_every = usize_of(value)?,
            "max_new_tokens" => self.max_new_tokens = usize_of(value)?,
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "vocab" => self.vocab = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("d_e", self.d_model),
            ("d_mlp", self.d_mlp),
            ("l_max", self.max_len),
            ("epochs", self.epochs),
            ("log_every", self.log_every),
            ("max_new_tokens", self.max_new_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be non-negative".to_string(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".to_string()));
        }
        for list in [&self.layers, &self.heads] {
            if list.is_empty() || (list.len() != 1 && list.len() != self.m) {
                return Err(Error::Config(format!(
                    "layers/heads lists must have 1 or m = {} entries",
                    self.m
                )));
            }
        }
        if self.selection == SelectionKind::Max && self.selection_weights.is_some() {
            return Err(Error::Config(
                "selection_weights only apply to selection = random".to_string(),
            ));
        }
        Ok(())
    }

    fn broadcast(&self, list: &[usize]) -> Vec<usize> {
        if list.len() == 1 {
            vec![list[0]; self.m]
        } else {
            list.to_vec()
        }
    }

    pub fn layers_per_head(&self) -> Vec<usize> {
        self.broadcast(&self.layers)
    }

    pub fn heads_per_head(&self) -> Vec<usize> {
        self.broadcast(&self.heads)
    }

    /// Decoder configs for all heads, given the vocabulary size.
    pub fn decoder_configs(&self, vocab_size: usize) -> Result<Vec<DecoderConfig>> {
        let layers = self.layers_per_head();
        let heads = self.heads_per_head();
        let configs: Vec<DecoderConfig> = (0..self.m)
            .map(|i| DecoderConfig {
                vocab_size,
                max_len: self.max_len,
                d_model: self.d_model,
                d_mlp: self.d_mlp,
                n_layers: layers[i],
                n_heads: heads[i],
                activation: self.activation,
            })
            .collect();
        for c in &configs {
            c.validate()?;
        }
        Ok(configs)
    }

    /// The concrete selection mechanism for an ensemble of `m` heads.
    pub fn selection_mechanism(&self, m: usize) -> Result<SelectionMechanism> {
        let mechanism = match self.selection {
            SelectionKind::Max => SelectionMechanism::Max,
            SelectionKind::Random => match &self.selection_weights {
                Some(w) => SelectionMechanism::RandomIndex { weights: w.clone() },
                None => SelectionMechanism::uniform_random(m),
            },
        };
        mechanism
            .validate(m)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(mechanism)
    }

    pub fn require_path(&self, what: &str) -> Result<&Path> {
        let path = match what {
            "corpus" => &self.corpus,
            "vocab" => &self.vocab,
            "checkpoint" => &self.checkpoint,
            _ => &None,
        };
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("config is missing the {what} path")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let cfg = RunConfig::parse_str(
            "\
# training setup
m = 3
layers = 1,2,1
heads = 2
d_e = 16
d_mlp = 32
l_max = 32
learning_rate = 0.1
epochs = 5
selection = random
selection_weights = 0.2, 0.3, 0.5
seed = 7
corpus = data/corpus.txt
vocab = out/vocab.txt
checkpoint = out/model.gammt
",
        )
        .unwrap();
        assert_eq!(cfg.m, 3);
        assert_eq!(cfg.layers_per_head(), vec![1, 2, 1]);
        assert_eq!(cfg.heads_per_head(), vec![2, 2, 2]);
        assert!(cfg.was_set("seed"));
        assert!(!cfg.was_set("temperature"));
        let s = cfg.selection_mechanism(3).unwrap();
        assert_eq!(
            s,
            SelectionMechanism::RandomIndex {
                weights: vec![0.2, 0.3, 0.5]
            }
        );
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(RunConfig::parse_str("frobnicate = 1\n").is_err());
        assert!(RunConfig::parse_str("just words\n").is_err());
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(RunConfig::parse_str("m = 0\n").is_err());
        assert!(RunConfig::parse_str("temperature = -1\n").is_err());
        assert!(RunConfig::parse_str("layers = 1,2\nm = 3\n").is_err());
        assert!(RunConfig::parse_str("selection_weights = 0.5,0.5\n").is_err());
    }

    #[test]
    fn uniform_random_weights_by_default() {
        let cfg = RunConfig::parse_str("selection = random\n").unwrap();
        assert_eq!(
            cfg.selection_mechanism(2).unwrap(),
            SelectionMechanism::uniform_random(2)
        );
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse_str("\n# nothing\n  \nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }
}
