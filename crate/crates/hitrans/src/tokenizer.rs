//! Lowercasing, basic splitting, and greedy WordPiece tokenization.
//!
//! The vocabulary is a plain text file, one token per line, line number = id;
//! the first four lines are always `[PAD] [UNK] [CLS] [SEP]`. Subword
//! continuations carry the `##` prefix.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

const SPECIALS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

/// Immutable token inventory with dense ids `0..len`.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocab from an ordered token list; the first four entries must
    /// be the specials and no token may repeat.
    pub fn new(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Data(format!(
                "vocabulary must start with {:?}, got only {} tokens",
                SPECIALS,
                tokens.len()
            )));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Data(format!(
                    "vocabulary token {} must be {}, got {:?}",
                    i, want, tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("vocabulary token {} is empty", i)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {:?}", t)));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Serializes as one token per line (line number = id).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{}", t);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading vocab {}: {}", path.display(), e)))?;
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::Parse(format!(
                    "{}:{}: empty vocabulary line",
                    path.display(),
                    lineno + 1
                )));
            }
            tokens.push(line.to_string());
        }
        Vocab::new(tokens)
    }
}

/// Tokenizer knobs shared by every encode call.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Hard cap on the encoded length, specials included.
    pub max_len: usize,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { max_len: 512, lowercase: true }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 {
            return Err(Error::Config(format!(
                "max_len must be at least 3 ([CLS], one token, [SEP]), got {}",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Ids plus the pooling-eligibility mask for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    /// True for positions eligible for max-pooling (all non-`[PAD]`
    /// positions; this pipeline never pads, so currently every position).
    pub mask: Vec<bool>,
}

/// Splits on Unicode whitespace, with ASCII punctuation kept as standalone
/// single-character tokens; lowercases first when asked.
pub fn basic_split(text: &str, lowercase: bool) -> Vec<String> {
    let text = if lowercase { text.to_lowercase() } else { text.to_string() };
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if c.is_ascii_punctuation() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Builds a vocabulary from raw text: specials, then whole words with
/// frequency at least `min_freq` (by descending frequency, ties
/// lexicographic), then single-character pieces (`c` and `##c`) covering the
/// words that fell below `min_freq`; the assembled list is truncated to
/// `target_size`.
pub fn build_vocab<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    target_size: usize,
    min_freq: u64,
) -> Result<Vocab> {
    if target_size <= SPECIALS.len() {
        return Err(Error::Config(format!(
            "vocab target_size must exceed {} (the reserved specials), got {}",
            SPECIALS.len(),
            target_size
        )));
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for w in basic_split(text, true) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }

    let mut frequent: Vec<(&String, u64)> = Vec::new();
    let mut rare: Vec<&String> = Vec::new();
    for (w, &n) in &freq {
        if n >= min_freq.max(1) {
            frequent.push((w, n));
        } else {
            rare.push(w);
        }
    }
    frequent.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut chars: Vec<char> = rare.iter().flat_map(|w| w.chars()).collect();
    chars.sort_unstable();
    chars.dedup();

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for (w, _) in frequent {
        if seen.insert(w.clone()) {
            tokens.push(w.clone());
        }
    }
    for c in chars {
        for piece in [c.to_string(), format!("##{}", c)] {
            if seen.insert(piece.clone()) {
                tokens.push(piece);
            }
        }
    }
    tokens.truncate(target_size);
    Vocab::new(tokens)
}

/// Greedy longest-match-from-the-left WordPiece split of one (already
/// lowercased, whitespace-free) word; returns `["[UNK]"]` when the word
/// cannot be decomposed.
pub fn wordpiece_tokenize(word: &str, vocab: &Vocab) -> Vec<String> {
    debug_assert!(!word.is_empty());
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched: Option<String> = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, "##");
            }
            if vocab.contains(&candidate) {
                matched = Some(candidate);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(p) => {
                pieces.push(p);
                start = end;
            }
            None => return vec![UNK_TOKEN.to_string()],
        }
    }
    pieces
}

/// Full text-to-ids pipeline: lowercase, basic split, WordPiece, add
/// `[CLS]`/`[SEP]`, and truncate the subword tail so the total length never
/// exceeds `max_len`.
pub fn encode(text: &str, vocab: &Vocab, cfg: &TokenizerConfig) -> Result<Encoded> {
    cfg.validate()?;
    let mut piece_ids = Vec::new();
    for word in basic_split(text, cfg.lowercase) {
        for piece in wordpiece_tokenize(&word, vocab) {
            let id = vocab
                .id(&piece)
                .expect("wordpiece_tokenize only returns in-vocabulary pieces");
            piece_ids.push(id);
        }
    }
    piece_ids.truncate(cfg.max_len - 2);
    let mut ids = Vec::with_capacity(piece_ids.len() + 2);
    ids.push(CLS_ID);
    ids.extend_from_slice(&piece_ids);
    ids.push(SEP_ID);
    let mask = vec![true; ids.len()];
    Ok(Encoded { ids, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab_of(extra: &[&str]) -> Vocab {
        let mut toks: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        toks.extend(extra.iter().map(|s| s.to_string()));
        Vocab::new(toks).unwrap()
    }

    // ── vocab construction ──────────────────────────────────────────────────

    #[test]
    fn build_vocab_orders_by_frequency() {
        let v = build_vocab(["a a b"], 10, 1).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
    }

    #[test]
    fn build_vocab_rejects_tiny_target() {
        let err = build_vocab(["a"], 4, 1).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn build_vocab_breaks_frequency_ties_lexicographically() {
        let v = build_vocab(["zebra apple zebra apple"], 10, 1).unwrap();
        assert_eq!(v.id("apple"), Some(4));
        assert_eq!(v.id("zebra"), Some(5));
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        let err = build_vocab(["", "   "], 10, 1).unwrap_err();
        assert_eq!(err.kind(), "data");
    }

    #[test]
    fn build_vocab_covers_rare_words_with_char_pieces() {
        // "qx" appears once, below min_freq 2: it contributes "q"/"##q"/"x"/"##x".
        let v = build_vocab(["hi hi qx"], 20, 2).unwrap();
        assert!(v.contains("hi"));
        assert!(!v.contains("qx"));
        for p in ["q", "##q", "x", "##x"] {
            assert!(v.contains(p), "missing {p}");
        }
        assert_eq!(wordpiece_tokenize("qx", &v), vec!["q", "##x"]);
    }

    #[test]
    fn build_vocab_truncates_to_target_size() {
        let v = build_vocab(["a b c d e f g h"], 7, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("c"), Some(6));
        assert!(!v.contains("d"));
    }

    #[test]
    fn vocab_enforces_specials_and_uniqueness() {
        let err = Vocab::new(vec!["[PAD]".into(), "[UNK]".into()]).unwrap_err();
        assert_eq!(err.kind(), "data");
        let err = Vocab::new(vec![
            "[UNK]".into(),
            "[PAD]".into(),
            "[CLS]".into(),
            "[SEP]".into(),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("[PAD]"));
        let err = Vocab::new(vec![
            "[PAD]".into(),
            "[UNK]".into(),
            "[CLS]".into(),
            "[SEP]".into(),
            "a".into(),
            "a".into(),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab_of(&["hello", "##lo", "world"]);
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.id("##lo"), Some(5));
    }

    #[test]
    fn vocab_load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "[PAD]\n[UNK]\n\n[SEP]\n").unwrap();
        let err = Vocab::load(&path).unwrap_err();
        assert_eq!(err.kind(), "parse");
        assert!(err.to_string().contains(":3:"), "{err}");
    }

    // ── wordpiece ───────────────────────────────────────────────────────────

    #[test]
    fn wordpiece_greedy_longest_match() {
        let v = vocab_of(&["agree", "##ment", "agreem"]);
        // Greedy takes the longest first piece ("agreem"), then fails and
        // falls back to [UNK] — unless the longest usable prefix is chosen.
        // With "agreem" present but no "##ent", decomposition fails:
        assert_eq!(wordpiece_tokenize("agreement", &v), vec![UNK_TOKEN]);
        let v = vocab_of(&["agree", "##ment"]);
        assert_eq!(wordpiece_tokenize("agreement", &v), vec!["agree", "##ment"]);
    }

    #[test]
    fn wordpiece_exact_hit() {
        let v = vocab_of(&["i"]);
        assert_eq!(wordpiece_tokenize("i", &v), vec!["i"]);
    }

    #[test]
    fn wordpiece_unknown_word_falls_back_to_unk() {
        let v = vocab_of(&["hello"]);
        assert_eq!(wordpiece_tokenize("zzz", &v), vec![UNK_TOKEN]);
    }

    // ── encode ──────────────────────────────────────────────────────────────

    #[test]
    fn encode_empty_text_is_cls_sep() {
        let v = vocab_of(&[]);
        let e = encode("", &v, &TokenizerConfig::default()).unwrap();
        assert_eq!(e.ids, vec![CLS_ID, SEP_ID]);
        assert_eq!(e.mask, vec![true, true]);
    }

    #[test]
    fn encode_pipeline_hand_example() {
        let v = vocab_of(&["i", "agree", "."]);
        let e = encode("I agree.", &v, &TokenizerConfig::default()).unwrap();
        let want: Vec<usize> =
            vec![CLS_ID, v.id("i").unwrap(), v.id("agree").unwrap(), v.id(".").unwrap(), SEP_ID];
        assert_eq!(e.ids, want);
    }

    #[test]
    fn encode_truncates_tail_to_max_len() {
        let v = vocab_of(&["w"]);
        let text = vec!["w"; 600].join(" ");
        let e = encode(&text, &v, &TokenizerConfig::default()).unwrap();
        assert_eq!(e.ids.len(), 512);
        assert_eq!(e.ids[0], CLS_ID);
        assert_eq!(*e.ids.last().unwrap(), SEP_ID);
        assert_eq!(e.ids.iter().filter(|&&i| i == v.id("w").unwrap()).count(), 510);
    }

    #[test]
    fn encode_rejects_max_len_below_three() {
        let v = vocab_of(&[]);
        let cfg = TokenizerConfig { max_len: 2, lowercase: true };
        assert_eq!(encode("hi", &v, &cfg).unwrap_err().kind(), "config");
    }

    #[test]
    fn encode_is_deterministic() {
        let v = vocab_of(&["the", "cat", "sat", "."]);
        let cfg = TokenizerConfig::default();
        let a = encode("The cat sat.", &v, &cfg).unwrap();
        let b = encode("The cat sat.", &v, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn char_complete_vocab_never_produces_unk() {
        let v = build_vocab(["abc xyz qrs"], 100, 10).unwrap(); // everything rare
        for word in ["cab", "zzz", "saqb"] {
            let pieces = wordpiece_tokenize(word, &v);
            assert!(pieces.iter().all(|p| p != UNK_TOKEN), "{word} -> {pieces:?}");
        }
    }

    proptest! {
        #[test]
        fn encode_respects_bounds(text in ".{0,200}", max_len in 3usize..40) {
            let v = build_vocab(["a b c d the quick brown fox . !"], 50, 1).unwrap();
            let cfg = TokenizerConfig { max_len, lowercase: true };
            let e = encode(&text, &v, &cfg).unwrap();
            prop_assert!(e.ids.len() <= max_len);
            prop_assert_eq!(e.ids[0], CLS_ID);
            prop_assert_eq!(*e.ids.last().unwrap(), SEP_ID);
            prop_assert_eq!(e.mask.len(), e.ids.len());
        }
    }
}
