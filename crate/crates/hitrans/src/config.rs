//! Run configuration: one JSON document covering the model, tokenizer,
//! trainer, data paths, and verification knobs.
//!
//! Resolution is layered: a named preset supplies every field, an optional
//! config file deep-merges over it, then repeatable `key.path=value`
//! overrides, and finally the seed/variant shorthands. Unknown keys are
//! rejected at every level, and the merged result must validate before any
//! command runs.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::HiTransformerConfig;
use crate::tokenizer::TokenizerConfig;
use crate::train::TrainConfig;
use serde_json::{json, Value};

/// Where each split lives and how labels are interpreted.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: String,
    pub val: String,
    pub test: String,
    pub labels: LabelSpec,
    /// Drop utterances whose label is outside the label set instead of
    /// keeping them as unlabeled context.
    pub drop_masked: bool,
}

/// Either a built-in label-set name or an explicit ordered list.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum LabelSpec {
    Named(String),
    List(Vec<String>),
}

impl LabelSpec {
    pub fn to_label_map(&self) -> Result<LabelMap> {
        match self {
            LabelSpec::Named(name) => LabelMap::by_name(name),
            LabelSpec::List(names) => LabelMap::new(names.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub path: String,
    pub min_freq: u64,
    pub target_size: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub overfit_seed: u64,
    pub parity_seed: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: HiTransformerConfig,
    pub tokenizer: TokenizerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub gradcheck: GradcheckConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tokenizer.validate()?;
        self.train.validate()?;
        self.data.labels.to_label_map()?;
        if self.tokenizer.max_len > self.model.lower.max_positions {
            return Err(Error::Config(format!(
                "tokenizer.max_len {} exceeds lower.max_positions {}: encoded \
                 utterances could not be embedded",
                self.tokenizer.max_len, self.model.lower.max_positions
            )));
        }
        Ok(())
    }

    /// Switches between the plain and speaker-aware variants, keeping the
    /// upper width consistent with what the dialog encoder will be fed.
    pub fn set_variant(&mut self, speaker: bool) {
        self.model.speaker_variant = speaker;
        self.model.upper.d_model =
            self.model.lower.d_model + if speaker { self.model.s_max } else { 0 };
    }

    /// Applies one run seed everywhere a seed is consumed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.gradcheck.seed = seed;
        self.synth.overfit_seed = seed;
        self.synth.parity_seed = seed.wrapping_add(1);
    }

    /// The actual vocabulary file wins over the configured placeholder.
    pub fn adopt_vocab_size(&mut self, n: usize) {
        self.model.vocab_size = n;
    }
}

/// Complete configuration for the named preset. `tiny` is sized for desk
/// runs and tests; `paper` matches the documented full-scale defaults
/// (12-layer/768-wide lower encoder, 4-layer/8-head upper encoder,
/// learning rate 1e-5, 300-unit classifier with 0.5 dropout).
pub fn preset(name: &str) -> Result<Value> {
    let value = match name {
        "tiny" => json!({
            "model": {
                "lower": {
                    "n_layers": 2, "n_heads": 4, "d_model": 32, "d_ff": 64,
                    "attn_dropout": 0.1, "max_positions": 64,
                    "positional_kind": "learned"
                },
                "upper": {
                    "n_layers": 2, "n_heads": 8, "d_model": 32, "d_ff": 128,
                    "attn_dropout": 0.1, "max_positions": 512,
                    "positional_kind": "sinusoidal"
                },
                "vocab_size": 4000,
                "n_classes": 4,
                "classifier_hidden": 64,
                "classifier_dropout": 0.1,
                "speaker_variant": false,
                "s_max": 8,
                "pool_specials": true
            },
            "tokenizer": { "max_len": 64, "lowercase": true },
            "train": {
                "learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
                "epochs": 50, "seed": 42, "freeze_lower": false, "log_base": "two"
            },
            "data": {
                "train": "data/train.jsonl",
                "val": "data/val.jsonl",
                "test": "data/test.jsonl",
                "labels": "friends4",
                "drop_masked": false
            },
            "vocab": { "path": "vocab.txt", "min_freq": 1, "target_size": 4000 },
            "gradcheck": { "eps": 1e-4, "samples": 200, "seed": 7 },
            "synth": { "overfit_seed": 17, "parity_seed": 23 }
        }),
        "paper" => json!({
            "model": {
                "lower": {
                    "n_layers": 12, "n_heads": 12, "d_model": 768, "d_ff": 3072,
                    "attn_dropout": 0.1, "max_positions": 512,
                    "positional_kind": "learned"
                },
                "upper": {
                    "n_layers": 4, "n_heads": 8, "d_model": 768, "d_ff": 3072,
                    "attn_dropout": 0.1, "max_positions": 512,
                    "positional_kind": "sinusoidal"
                },
                "vocab_size": 30522,
                "n_classes": 4,
                "classifier_hidden": 300,
                "classifier_dropout": 0.5,
                "speaker_variant": false,
                "s_max": 8,
                "pool_specials": true
            },
            "tokenizer": { "max_len": 512, "lowercase": true },
            "train": {
                "learning_rate": 1e-5, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
                "epochs": 10, "seed": 42, "freeze_lower": false, "log_base": "two"
            },
            "data": {
                "train": "data/train.jsonl",
                "val": "data/val.jsonl",
                "test": "data/test.jsonl",
                "labels": "friends4",
                "drop_masked": false
            },
            "vocab": { "path": "vocab.txt", "min_freq": 2, "target_size": 30522 },
            "gradcheck": { "eps": 1e-4, "samples": 200, "seed": 7 },
            "synth": { "overfit_seed": 17, "parity_seed": 23 }
        }),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {:?}; available: tiny, paper",
                other
            )))
        }
    };
    Ok(value)
}

/// Recursive JSON merge: objects merge key-by-key, everything else is
/// replaced by the overlay.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.path=value` override. The value is parsed as JSON
/// when possible, otherwise taken as a bare string, so
/// `train.learning_rate=0.01` and `data.labels=friends4` both work.
pub fn apply_set(cfg: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Cli(format!("--set expects key.path=value, got {:?}", spec))
    })?;
    if path.is_empty() {
        return Err(Error::Cli(format!("--set has an empty key path in {:?}", spec)));
    }
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = cfg;
    for key in path.split('.') {
        let obj = slot.as_object_mut().ok_or_else(|| {
            Error::Cli(format!("--set path {:?} descends into a non-object", path))
        })?;
        slot = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

/// Layered resolution: preset, then optional config-file JSON, then `--set`
/// overrides, deserialized strictly. Seed/variant shorthands are applied by
/// the caller on the typed result.
pub fn resolve(preset_name: &str, file_json: Option<&str>, sets: &[String]) -> Result<RunConfig> {
    let mut value = preset(preset_name)?;
    if let Some(text) = file_json {
        let overlay: Value = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("config file is not valid JSON: {}", e)))?;
        if !overlay.is_object() {
            return Err(Error::Parse("config file must be a JSON object".into()));
        }
        merge(&mut value, overlay);
    }
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid configuration: {}", e)))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PositionalKind;

    #[test]
    fn presets_validate() {
        for name in ["tiny", "paper"] {
            let cfg = resolve(name, None, &[]).unwrap();
            cfg.validate().unwrap();
        }
        assert_eq!(preset("huge").unwrap_err().kind(), "config");
    }

    #[test]
    fn tiny_preset_shape() {
        let cfg = resolve("tiny", None, &[]).unwrap();
        assert_eq!(cfg.model.lower.n_layers, 2);
        assert_eq!(cfg.model.lower.d_model, 32);
        assert_eq!(cfg.model.lower.n_heads, 4);
        assert_eq!(cfg.model.upper.n_layers, 2);
        assert_eq!(cfg.model.upper.n_heads, 8);
        assert!(!cfg.model.speaker_variant);
        assert_eq!(cfg.model.upper.d_model, 32);
        assert_eq!(cfg.tokenizer.max_len, 64);
        assert_eq!(cfg.train.learning_rate, 1e-3);
    }

    #[test]
    fn paper_preset_shape() {
        let cfg = resolve("paper", None, &[]).unwrap();
        assert_eq!(cfg.model.lower.n_layers, 12);
        assert_eq!(cfg.model.lower.d_model, 768);
        assert_eq!(cfg.model.upper.n_layers, 4);
        assert_eq!(cfg.model.upper.n_heads, 8);
        assert_eq!(cfg.model.classifier_hidden, 300);
        assert_eq!(cfg.model.classifier_dropout, 0.5);
        assert_eq!(cfg.train.learning_rate, 1e-5);
        assert_eq!(cfg.model.lower.positional_kind, PositionalKind::Learned);
        assert_eq!(cfg.model.upper.positional_kind, PositionalKind::Sinusoidal);
    }

    #[test]
    fn variant_switch_adjusts_upper_width() {
        let mut cfg = resolve("tiny", None, &[]).unwrap();
        cfg.set_variant(true);
        assert!(cfg.model.speaker_variant);
        assert_eq!(cfg.model.upper.d_model, 40);
        cfg.validate().unwrap();
        cfg.set_variant(false);
        assert!(!cfg.model.speaker_variant);
        assert_eq!(cfg.model.upper.d_model, 32);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_file_overrides_preset() {
        let file = r#"{"train": {"epochs": 3}, "model": {"lower": {"n_layers": 1}}}"#;
        let cfg = resolve("tiny", Some(file), &[]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.lower.n_layers, 1);
        // Untouched siblings keep preset values.
        assert_eq!(cfg.model.lower.d_model, 32);
        assert_eq!(cfg.train.learning_rate, 1e-3);
    }

    #[test]
    fn set_overrides_beat_the_file() {
        let file = r#"{"train": {"epochs": 3}}"#;
        let sets = vec![
            "train.epochs=9".to_string(),
            "data.labels=emorynlp7".to_string(),
            "model.n_classes=7".to_string(),
        ];
        let cfg = resolve("tiny", Some(file), &sets).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.data.labels, LabelSpec::Named("emorynlp7".into()));
        assert_eq!(cfg.data.labels.to_label_map().unwrap().len(), 7);
        cfg.validate().unwrap();
    }

    #[test]
    fn set_accepts_json_values() {
        let sets = vec![
            r#"data.labels=["up","down"]"#.to_string(),
            "model.n_classes=2".to_string(),
            "train.freeze_lower=true".to_string(),
        ];
        let cfg = resolve("tiny", None, &sets).unwrap();
        assert_eq!(
            cfg.data.labels,
            LabelSpec::List(vec!["up".into(), "down".into()])
        );
        assert!(cfg.train.freeze_lower);
    }

    #[test]
    fn set_rejects_malformed_specs() {
        let mut v = preset("tiny").unwrap();
        assert_eq!(apply_set(&mut v, "no-equals").unwrap_err().kind(), "cli");
        assert_eq!(apply_set(&mut v, "=1").unwrap_err().kind(), "cli");
        assert_eq!(
            apply_set(&mut v, "train.epochs.deeper=1").unwrap_err().kind(),
            "cli"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = r#"{"train": {"epohcs": 3}}"#;
        let err = resolve("tiny", Some(file), &[]).unwrap_err();
        assert_eq!(err.kind(), "config");
        assert!(err.to_string().contains("epohcs"), "{err}");

        let err = resolve("tiny", None, &["turbo=true".to_string()]).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn bad_file_json_is_a_parse_error() {
        assert_eq!(resolve("tiny", Some("{"), &[]).unwrap_err().kind(), "parse");
        assert_eq!(resolve("tiny", Some("[1]"), &[]).unwrap_err().kind(), "parse");
    }

    #[test]
    fn cross_field_validation_catches_overlong_tokenizer() {
        let cfg =
            resolve("tiny", None, &["tokenizer.max_len=128".to_string()]).unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.kind(), "config");
        assert!(err.to_string().contains("max_len"), "{err}");
    }

    #[test]
    fn seed_shorthand_reaches_every_consumer() {
        let mut cfg = resolve("tiny", None, &[]).unwrap();
        cfg.set_seed(99);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.gradcheck.seed, 99);
        assert_eq!(cfg.synth.overfit_seed, 99);
        assert_ne!(cfg.synth.parity_seed, cfg.synth.overfit_seed);
    }

    #[test]
    fn merge_replaces_non_objects() {
        let mut base = json!({"a": {"b": 1, "c": [1, 2]}, "d": 4});
        merge(&mut base, json!({"a": {"c": [9]}, "e": 5}));
        assert_eq!(base, json!({"a": {"b": 1, "c": [9]}, "d": 4, "e": 5}));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = resolve("tiny", None, &[]).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
