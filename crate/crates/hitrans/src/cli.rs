//! Command-line surface: one binary, subcommand per task.
//!
//! Every command resolves its configuration the same way (preset → config
//! file → `--set` overrides → seed/variant shorthands), validates it, and
//! then runs. Failures print a single-line JSON object to stderr and exit
//! nonzero; outputs that land in files are written atomically.

use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::data::{self, Corpus};
use crate::error::{Error, Result};
use crate::gradcheck::model_grad_check;
use crate::metrics;
use crate::model::encode_dialog;
use crate::synth;
use crate::tokenizer::{build_vocab, Vocab};
use crate::train::{self, evaluate};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

/// Threshold under which the finite-difference check counts as passing.
pub const GRADCHECK_THRESHOLD: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(
    name = "hitrans",
    version,
    about = "Hierarchical transformer for utterance-level emotion recognition in dialogs"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file merged over the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config value, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// One seed for everything seeded (training, gradcheck, synthesis).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Base configuration to start from.
    #[arg(long, global = true, default_value = "tiny")]
    preset: String,

    /// Model variant; `speaker` concatenates speaker one-hots between the
    /// two encoder levels.
    #[arg(long, global = true, value_enum)]
    variant: Option<Variant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Base,
    Speaker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a WordPiece vocabulary from the training split.
    BuildVocab {
        /// Output path; defaults to the configured vocab path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Print per-split dialog/utterance/class counts.
    Stats,
    /// Train a model and save the best-validation checkpoint.
    Train {
        /// Checkpoint destination.
        #[arg(long, value_name = "PATH", default_value = "model.ckpt")]
        out: PathBuf,
    },
    /// Score a checkpoint on one split and print the metrics report.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Label a split with a checkpoint; emits dialogs as JSON-lines with
    /// predicted labels.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Output file; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Finite-difference-check gradients through the full model and loss.
    Gradcheck,
    /// Write the seeded synthetic corpora (overfit and speaker-parity).
    Synth {
        /// Directory to create the corpora under.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

impl Cli {
    /// Resolves the layered configuration these flags describe.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let file_text = match &self.config {
            Some(path) => Some(std::fs::read_to_string(path).map_err(|e| {
                Error::Cli(format!("cannot read config {}: {}", path.display(), e))
            })?),
            None => None,
        };
        let mut cfg = config::resolve(&self.preset, file_text.as_deref(), &self.sets)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(variant) = self.variant {
            cfg.set_variant(variant == Variant::Speaker);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(&self) -> Result<i32> {
        let cfg = self.resolve_config()?;
        match &self.command {
            Command::BuildVocab { out } => cmd_build_vocab(&cfg, out.as_deref()),
            Command::Stats => cmd_stats(&cfg),
            Command::Train { out } => cmd_train(&cfg, out),
            Command::Eval { checkpoint, split } => cmd_eval(&cfg, checkpoint, *split),
            Command::Predict { checkpoint, split, out } => {
                cmd_predict(&cfg, checkpoint, *split, out.as_deref())
            }
            Command::Gradcheck => cmd_gradcheck(&cfg),
            Command::Synth { out } => cmd_synth(&cfg, out),
        }
    }
}

/// Parses the process arguments and runs; returns the exit code. Errors are
/// printed as one JSON line on stderr.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match cli.run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.kind(), "message": e.message() })
            );
            1
        }
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    data::load_corpus(
        Path::new(&cfg.data.train),
        Path::new(&cfg.data.val),
        Path::new(&cfg.data.test),
        cfg.data.labels.to_label_map()?,
        cfg.data.drop_masked,
    )
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    Vocab::load(Path::new(&cfg.vocab.path))
}

fn split_of<'c>(corpus: &'c Corpus, split: Split) -> &'c [data::Dialog] {
    match split {
        Split::Train => &corpus.train,
        Split::Val => &corpus.val,
        Split::Test => &corpus.test,
    }
}

fn cmd_build_vocab(cfg: &RunConfig, out: Option<&Path>) -> Result<i32> {
    let dialogs = data::load_split(Path::new(&cfg.data.train))?;
    let texts: Vec<&str> = dialogs
        .iter()
        .flat_map(|d| d.utterances.iter().map(|u| u.text.as_str()))
        .collect();
    let vocab = build_vocab(texts, cfg.vocab.target_size, cfg.vocab.min_freq)?;
    let path = out.unwrap_or_else(|| Path::new(&cfg.vocab.path));
    checkpoint::write_atomic(path, vocab.to_file_string().as_bytes())?;
    println!(
        "{}",
        serde_json::json!({ "vocab_size": vocab.len(), "path": path.display().to_string() })
    );
    Ok(0)
}

fn cmd_stats(cfg: &RunConfig) -> Result<i32> {
    let corpus = load_corpus(cfg)?;
    print!("{}", data::corpus_stats(&corpus).render());
    Ok(0)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let vocab = load_vocab(cfg)?;
    let corpus = load_corpus(cfg)?;
    let mut cfg = cfg.clone();
    cfg.adopt_vocab_size(vocab.len());
    if cfg.model.s_max < corpus.s_max {
        return Err(Error::Capacity(format!(
            "corpus has dialogs with {} distinct speakers but s_max is {}",
            corpus.s_max, cfg.model.s_max
        )));
    }
    if cfg.model.n_classes != corpus.labels.len() {
        return Err(Error::Config(format!(
            "model.n_classes {} does not match the {}-label set",
            cfg.model.n_classes,
            corpus.labels.len()
        )));
    }
    let outcome = train::train(
        &corpus,
        &vocab,
        &cfg.tokenizer,
        &cfg.model,
        &cfg.train,
        &mut |entry| {
            println!("{}", serde_json::to_string(entry).expect("log entry serializes"))
        },
    )?;
    let fingerprint = checkpoint::vocab_fingerprint(&vocab);
    checkpoint::save(out, &outcome.model, &corpus.labels, &fingerprint)?;
    println!(
        "{}",
        serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "best_val_macro_f1": outcome.best_val_macro_f1,
            "checkpoint": out.display().to_string(),
        })
    );
    Ok(0)
}

/// Loads a checkpoint and cross-checks it against the configured vocabulary
/// and label set.
fn load_compatible(
    cfg: &RunConfig,
    path: &Path,
) -> Result<(checkpoint::Checkpoint, Vocab, Corpus)> {
    let ckpt = checkpoint::load(path)?;
    let vocab = load_vocab(cfg)?;
    ckpt.require_vocab(&vocab)?;
    let corpus = load_corpus(cfg)?;
    ckpt.require_labels(&corpus.labels)?;
    Ok((ckpt, vocab, corpus))
}

fn cmd_eval(cfg: &RunConfig, ckpt_path: &Path, split: Split) -> Result<i32> {
    let (ckpt, vocab, corpus) = load_compatible(cfg, ckpt_path)?;
    let outcome =
        evaluate(&ckpt.model, split_of(&corpus, split), &vocab, &cfg.tokenizer, &corpus.labels)?;
    let report = metrics::report(&outcome.cm, corpus.labels.names(), outcome.masked)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(0)
}

fn cmd_predict(cfg: &RunConfig, ckpt_path: &Path, split: Split, out: Option<&Path>) -> Result<i32> {
    let (ckpt, vocab, corpus) = load_compatible(cfg, ckpt_path)?;
    let mut dialogs = split_of(&corpus, split).to_vec();
    for dialog in dialogs.iter_mut() {
        let encoded = encode_dialog(dialog, &vocab, &cfg.tokenizer, &corpus.labels)?;
        let preds = ckpt.model.predict(&encoded)?;
        for (u, p) in dialog.utterances.iter_mut().zip(preds) {
            let name = corpus.labels.name(p).ok_or_else(|| {
                Error::Index(format!("predicted class {} has no label name", p))
            })?;
            u.label = Some(name.to_string());
        }
    }
    let rendered = data::dialogs_to_jsonl(&dialogs);
    match out {
        Some(path) => checkpoint::write_atomic(path, rendered.as_bytes())?,
        None => print!("{}", rendered),
    }
    Ok(0)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    let max_rel_err = model_grad_check(
        &cfg.model,
        cfg.gradcheck.eps,
        cfg.gradcheck.samples,
        cfg.gradcheck.seed,
    )?;
    let pass = max_rel_err < GRADCHECK_THRESHOLD;
    println!(
        "{}",
        serde_json::json!({
            "max_rel_err": max_rel_err,
            "threshold": GRADCHECK_THRESHOLD,
            "pass": pass,
        })
    );
    Ok(if pass { 0 } else { 1 })
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let corpora = [
        ("overfit", synth::overfit_corpus(cfg.synth.overfit_seed)),
        ("parity", synth::parity_corpus(cfg.synth.parity_seed)),
    ];
    let mut written = Vec::new();
    for (name, corpus) in &corpora {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        for (split, dialogs) in corpus.splits() {
            let path = dir.join(format!("{}.jsonl", split));
            data::save_split(&path, dialogs)?;
            written.push(path.display().to_string());
        }
    }
    println!("{}", serde_json::json!({ "written": written }));
    Ok(0)
}

/// Parses CLI arguments from an explicit list — the unit-test entry point.
pub fn try_parse_from<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_subcommands_and_global_flags() {
        let cli = try_parse_from([
            "hitrans",
            "train",
            "--preset",
            "tiny",
            "--set",
            "train.epochs=2",
            "--seed",
            "9",
            "--variant",
            "speaker",
            "--out",
            "m.ckpt",
        ])
        .unwrap();
        let cfg = cli.resolve_config().unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.seed, 9);
        assert!(cfg.model.speaker_variant);
        assert_eq!(cfg.model.upper.d_model, 40);
    }

    #[test]
    fn rejects_unknown_subcommand_and_bad_flag_values() {
        assert!(try_parse_from(["hitrans", "explode"]).is_err());
        assert!(try_parse_from(["hitrans", "eval"]).is_err()); // missing --checkpoint
        assert!(
            try_parse_from(["hitrans", "eval", "--checkpoint", "x", "--split", "dev"]).is_err()
        );
    }

    #[test]
    fn bad_preset_surfaces_as_config_error() {
        let cli = try_parse_from(["hitrans", "stats", "--preset", "huge"]).unwrap();
        assert_eq!(cli.resolve_config().unwrap_err().kind(), "config");
    }

    #[test]
    fn variant_base_is_explicitly_selectable() {
        let cli = try_parse_from(["hitrans", "gradcheck", "--variant", "base"]).unwrap();
        let cfg = cli.resolve_config().unwrap();
        assert!(!cfg.model.speaker_variant);
        assert_eq!(cfg.model.upper.d_model, cfg.model.lower.d_model);
    }
}
