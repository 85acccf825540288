//! Flat key=value experiment configuration.
//!
//! Every run resolves one of these: defaults, overlaid by an optional
//! config file, overlaid by command-line overrides. The resolved form is
//! written next to the run's outputs so any artifact can be reproduced
//! from it. Unknown keys are rejected by name — a typo must never silently
//! fall back to a default.

use std::collections::BTreeMap;
use std::path::Path;

use xattnlab_core::tasks::{CorpusConfig, Inflection, LanguageSpec, NoiseConfig, Reorder, TaskSpec, NUM_SPECIALS};
use xattnlab_core::train::FineTuneRegime;
use xattnlab_core::{ModelConfig, RegimeSetting, TrainConfig, TransferSide};

use crate::CliError;

/// Keys with defaults, in render order. The value here is the default.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("regime", "EMB_XATTN"),
    ("side", "source"),
    ("model.d_model", "64"),
    ("model.n_heads", "4"),
    ("model.n_enc_layers", "2"),
    ("model.n_dec_layers", "2"),
    ("model.d_ff", "256"),
    ("model.max_len", "64"),
    ("model.dropout", "0.1"),
    ("train.lr", "0.0003"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.98"),
    ("train.eps", "1e-9"),
    ("train.warmup", "100"),
    ("train.clip_norm", "1"),
    ("train.smoothing", "0.1"),
    ("train.batch_size", "16"),
    ("train.max_steps", "1000"),
    ("train.eval_every", "50"),
    ("train.seed", "0"),
    ("data.kind", "translation"),
    ("data.concept_vocab", "600"),
    ("data.train_pairs", "8000"),
    ("data.dev_pairs", "200"),
    ("data.test_pairs", "200"),
    ("data.min_len", "3"),
    ("data.max_len", "12"),
    ("data.zipf_s", "1.2"),
    ("data.seed", "0"),
    ("src.surface_seed", "1"),
    ("src.reorder", "identity"),
    ("src.inflection", "none"),
    ("tgt.surface_seed", "2"),
    ("tgt.reorder", "identity"),
    ("tgt.inflection", "none"),
    ("noise.mask_ratio", "0.35"),
    ("noise.lambda", "3.5"),
];

/// Keys that are legal but have no default; the commands that need them
/// fail with a usage error when they are absent.
const OPTIONAL: &[&str] = &["lexicon.child_surface", "lexicon.parent_surface"];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|&(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!(
                        "config line {} is not key=value: {raw:?}",
                        lineno + 1
                    ))
                })?;
                let (k, v) = (k.trim(), v.trim());
                if !values.contains_key(k) && !OPTIONAL.contains(&k) {
                    return Err(CliError::Usage(format!("unknown config key {k:?}")));
                }
                values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(ExperimentConfig { values })
    }

    /// Command-line override for a known key.
    pub fn set(&mut self, key: &str, value: String) {
        debug_assert!(
            self.values.contains_key(key) || OPTIONAL.contains(&key),
            "override of unknown key {key}"
        );
        self.values.insert(key.to_string(), value);
    }

    /// The resolved configuration as sorted key=value lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    fn raw(&self, key: &str) -> Result<&str, CliError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Usage(format!("config key {key:?} is required here")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| {
            CliError::Usage(format!("config value {key}={raw:?} does not parse"))
        })
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn vocab_size(&self) -> Result<usize, CliError> {
        Ok(self.parse::<usize>("data.concept_vocab")? + NUM_SPECIALS)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let vocab = self.vocab_size()?;
        Ok(ModelConfig {
            d_model: self.parse("model.d_model")?,
            n_heads: self.parse("model.n_heads")?,
            n_enc_layers: self.parse("model.n_enc_layers")?,
            n_dec_layers: self.parse("model.n_dec_layers")?,
            d_ff: self.parse("model.d_ff")?,
            max_len: self.parse("model.max_len")?,
            dropout: self.parse("model.dropout")?,
            src_vocab_size: vocab,
            tgt_vocab_size: vocab,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            lr: self.parse("train.lr")?,
            beta1: self.parse("train.beta1")?,
            beta2: self.parse("train.beta2")?,
            eps: self.parse("train.eps")?,
            warmup: self.parse("train.warmup")?,
            clip_norm: self.parse("train.clip_norm")?,
            smoothing: self.parse("train.smoothing")?,
            batch_size: self.parse("train.batch_size")?,
            max_steps: self.parse("train.max_steps")?,
            eval_every: self.parse("train.eval_every")?,
            seed: self.parse("train.seed")?,
        })
    }

    pub fn corpus_config(&self) -> Result<CorpusConfig, CliError> {
        Ok(CorpusConfig {
            train_pairs: self.parse("data.train_pairs")?,
            dev_pairs: self.parse("data.dev_pairs")?,
            test_pairs: self.parse("data.test_pairs")?,
            min_len: self.parse("data.min_len")?,
            max_len: self.parse("data.max_len")?,
            zipf_s: self.parse("data.zipf_s")?,
        })
    }

    pub fn data_kind(&self) -> Result<&str, CliError> {
        match self.raw("data.kind")? {
            k @ ("translation" | "denoise") => Ok(k),
            other => Err(CliError::Usage(format!(
                "data.kind must be translation or denoise, got {other:?}"
            ))),
        }
    }

    pub fn data_seed(&self) -> Result<u64, CliError> {
        self.parse("data.seed")
    }

    fn language(&self, prefix: &str) -> Result<LanguageSpec, CliError> {
        let reorder = Reorder::parse(self.raw(&format!("{prefix}.reorder"))?)
            .map_err(CliError::Core)?;
        let inflection = Inflection::parse(self.raw(&format!("{prefix}.inflection"))?)
            .map_err(CliError::Core)?;
        Ok(LanguageSpec {
            concept_vocab: self.parse("data.concept_vocab")?,
            surface_seed: self.parse(&format!("{prefix}.surface_seed"))?,
            reorder,
            inflection,
        })
    }

    pub fn task(&self) -> Result<TaskSpec, CliError> {
        Ok(TaskSpec {
            src: self.language("src")?,
            tgt: self.language("tgt")?,
        })
    }

    pub fn noise_config(&self) -> Result<NoiseConfig, CliError> {
        Ok(NoiseConfig {
            mask_ratio: self.parse("noise.mask_ratio")?,
            lambda: self.parse("noise.lambda")?,
        })
    }

    pub fn side(&self) -> Result<TransferSide, CliError> {
        match self.raw("side")? {
            "source" => Ok(TransferSide::NewSource),
            "target" => Ok(TransferSide::NewTarget),
            other => Err(CliError::Usage(format!(
                "side must be source or target, got {other:?}"
            ))),
        }
    }

    /// The configured regime, or `None` when the regime key is the sweep
    /// marker `all`.
    pub fn regime_selection(&self) -> Result<Option<FineTuneRegime>, CliError> {
        let side = self.side()?;
        match self.raw("regime")? {
            "all" => Ok(None),
            name => {
                let setting = RegimeSetting::parse(name).map_err(|_| {
                    CliError::Usage(format!("unknown regime {name:?} (or \"all\")"))
                })?;
                Ok(Some(FineTuneRegime::new(setting, side)))
            }
        }
    }

    /// Surface seed pair for lexicon gold construction: (child, parent).
    pub fn lexicon_surfaces(&self) -> Result<(u64, u64), CliError> {
        Ok((
            self.parse("lexicon.child_surface")?,
            self.parse("lexicon.parent_surface")?,
        ))
    }
}
