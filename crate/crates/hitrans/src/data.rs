//! Dialog corpus model: JSON-lines files, label mapping with out-of-set
//! masking, and split statistics.
//!
//! A corpus file is UTF-8 JSON-lines, one dialog per line:
//! `{"utterances":[{"text":"...","speaker":"...","label":"..."}]}` with
//! `label` optional. A corpus is three such files (train/val/test).
//! Utterances whose label is absent or outside the configured label set are
//! *masked*: they stay in the dialog as context but are excluded from loss
//! and metrics. Set `drop_masked` at load time to remove them entirely
//! instead.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub text: String,
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialog {
    pub utterances: Vec<Utterance>,
}

impl Dialog {
    /// Number of distinct speaker names in this dialog.
    pub fn distinct_speakers(&self) -> usize {
        let mut seen = HashSet::new();
        for u in &self.utterances {
            seen.insert(u.speaker.as_str());
        }
        seen.len()
    }
}

/// Ordered emotion-class inventory; class id = position in the list.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<LabelMap> {
        if names.is_empty() {
            return Err(Error::Config("label set must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config(format!("label {} is empty", i)));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label {:?}", n)));
            }
        }
        Ok(LabelMap { names, index })
    }

    /// The four Friends/EmotionPush classes kept for training and scoring.
    pub fn friends4() -> LabelMap {
        LabelMap::new(vec!["anger".into(), "joy".into(), "sadness".into(), "neutral".into()])
            .expect("builtin label set")
    }

    /// The seven EmoryNLP classes.
    pub fn emorynlp7() -> LabelMap {
        LabelMap::new(vec![
            "neutral".into(),
            "joyful".into(),
            "peaceful".into(),
            "powerful".into(),
            "scared".into(),
            "mad".into(),
            "sad".into(),
        ])
        .expect("builtin label set")
    }

    pub fn by_name(name: &str) -> Result<LabelMap> {
        match name {
            "friends4" => Ok(LabelMap::friends4()),
            "emorynlp7" => Ok(LabelMap::emorynlp7()),
            other => Err(Error::Config(format!(
                "unknown label set {:?} (expected friends4 or emorynlp7)",
                other
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Class id for an utterance, or `None` when the utterance is masked
    /// (label absent or outside this set).
    pub fn label_id(&self, u: &Utterance) -> Option<usize> {
        u.label.as_deref().and_then(|l| self.id(l))
    }
}

/// A loaded three-split corpus with its label set and the speaker-count
/// ceiling `s_max` (the max distinct-speaker count of any dialog, taken over
/// all splits so no split can overflow the speaker one-hot width).
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Dialog>,
    pub val: Vec<Dialog>,
    pub test: Vec<Dialog>,
    pub labels: LabelMap,
    pub s_max: usize,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[Dialog]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Parses one split's JSON-lines text. Blank lines are skipped; anything
/// else must be a dialog object. `origin` names the file in errors.
pub fn parse_dialogs(text: &str, origin: &str) -> Result<Vec<Dialog>> {
    let mut dialogs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let dialog: Dialog = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{}:{}: {}", origin, i + 1, e)))?;
        if dialog.utterances.is_empty() {
            return Err(Error::Data(format!(
                "{}:{}: dialog has no utterances",
                origin,
                i + 1
            )));
        }
        for u in &dialog.utterances {
            if u.speaker.is_empty() {
                return Err(Error::Data(format!(
                    "{}:{}: utterance has an empty speaker name",
                    origin,
                    i + 1
                )));
            }
        }
        dialogs.push(dialog);
    }
    Ok(dialogs)
}

pub fn load_split(path: &Path) -> Result<Vec<Dialog>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}: {}", path.display(), e)))?;
    parse_dialogs(&text, &path.display().to_string())
}

/// Serializes dialogs back to the JSON-lines format.
pub fn dialogs_to_jsonl(dialogs: &[Dialog]) -> String {
    let mut out = String::new();
    for d in dialogs {
        let line = serde_json::to_string(d).expect("dialog serialization cannot fail");
        let _ = writeln!(out, "{}", line);
    }
    out
}

pub fn save_split(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    std::fs::write(path, dialogs_to_jsonl(dialogs))
        .map_err(|e| Error::Io(format!("writing {}: {}", path.display(), e)))?;
    Ok(())
}

/// Loads the three split files and assembles a corpus. With `drop_masked`,
/// utterances whose label is absent or out of set are removed up front
/// (dialogs left empty by that are dropped too); otherwise they are kept as
/// context and only excluded from loss and metrics.
pub fn load_corpus(
    train: &Path,
    val: &Path,
    test: &Path,
    labels: LabelMap,
    drop_masked: bool,
) -> Result<Corpus> {
    let mut splits = [load_split(train)?, load_split(val)?, load_split(test)?];
    if drop_masked {
        for split in &mut splits {
            for d in split.iter_mut() {
                d.utterances.retain(|u| labels.label_id(u).is_some());
            }
            split.retain(|d| !d.utterances.is_empty());
        }
    }
    let [train, val, test] = splits;
    let s_max = train
        .iter()
        .chain(&val)
        .chain(&test)
        .map(Dialog::distinct_speakers)
        .max()
        .unwrap_or(0)
        .max(1);
    Ok(Corpus { train, val, test, labels, s_max })
}

/// Per-split counts in the shape of a dataset summary table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SplitStats {
    pub dialogs: usize,
    pub utterances: usize,
    /// Labeled-utterance count per class, aligned with the label set.
    pub per_class: Vec<u64>,
    /// Utterances whose label is absent or outside the label set.
    pub masked: u64,
}

impl SplitStats {
    /// The conventional `dialogs(utterances)` cell, e.g. `2(5)`.
    pub fn dialog_utterance_cell(&self) -> String {
        format!("{}({})", self.dialogs, self.utterances)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CorpusStats {
    pub labels: Vec<String>,
    pub s_max: usize,
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
}

fn split_stats(dialogs: &[Dialog], labels: &LabelMap) -> SplitStats {
    let mut per_class = vec![0u64; labels.len()];
    let mut masked = 0u64;
    let mut utterances = 0usize;
    for d in dialogs {
        for u in &d.utterances {
            utterances += 1;
            match labels.label_id(u) {
                Some(c) => per_class[c] += 1,
                None => masked += 1,
            }
        }
    }
    SplitStats { dialogs: dialogs.len(), utterances, per_class, masked }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    CorpusStats {
        labels: corpus.labels.names().to_vec(),
        s_max: corpus.s_max,
        train: split_stats(&corpus.train, &corpus.labels),
        val: split_stats(&corpus.val, &corpus.labels),
        test: split_stats(&corpus.test, &corpus.labels),
    }
}

impl CorpusStats {
    /// Plain-text table: one row per split with the `dialogs(utterances)`
    /// cell, per-class counts, and the masked count.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:>14}", "split", "dialogs(utts)");
        for l in &self.labels {
            let _ = write!(out, " {:>10}", l);
        }
        let _ = writeln!(out, " {:>10}", "masked");
        for (name, s) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let _ = write!(out, "{:<8} {:>14}", name, s.dialog_utterance_cell());
            for c in &s.per_class {
                let _ = write!(out, " {:>10}", c);
            }
            let _ = writeln!(out, " {:>10}", s.masked);
        }
        let _ = writeln!(out, "s_max: {}", self.s_max);
        out
    }
}
