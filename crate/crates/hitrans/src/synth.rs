//! Seeded synthetic corpora for exercising the two model variants without
//! licensed dialog data.
//!
//! The overfit corpus is a word-lookup task: each utterance samples one of
//! four emotion classes and draws its words from that class's 15-word pool,
//! so a small model can memorize it quickly. The speaker-parity corpus
//! isolates speaker awareness: every utterance says the same thing, and the
//! label only records whether the speaker just changed — text carries zero
//! signal, so only a speaker-aware model can beat the majority class.

use crate::data::{Corpus, Dialog, LabelMap, Utterance};
use rand::seq::IndexedRandom as _;
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

/// 15 words per class; with the four specials this builds a vocabulary of
/// about 60 pieces.
pub const OVERFIT_POOLS: [(&str, &[&str]); 4] = [
    (
        "anger",
        &[
            "furious", "rage", "irate", "livid", "seething", "fuming", "outraged", "cross",
            "hostile", "bitter", "annoyed", "temper", "snapped", "growled", "glared",
        ],
    ),
    (
        "joy",
        &[
            "delighted", "cheerful", "thrilled", "beaming", "gleeful", "sunny", "laughing",
            "smiling", "ecstatic", "upbeat", "jolly", "grinning", "merry", "joyous", "elated",
        ],
    ),
    (
        "sadness",
        &[
            "gloomy", "weeping", "tearful", "mournful", "somber", "blue", "downcast", "sobbing",
            "grieving", "heartbroken", "dismal", "forlorn", "miserable", "sighing", "aching",
        ],
    ),
    (
        "neutral",
        &[
            "table", "window", "report", "coffee", "schedule", "meeting", "street", "weather",
            "ticket", "paper", "lunch", "office", "train", "email", "phone",
        ],
    ),
];

fn overfit_dialog(rng: &mut ChaCha8Rng) -> Dialog {
    let n = rng.random_range(4..=8);
    let speakers = ["A", "B"];
    let utterances = (0..n)
        .map(|i| {
            let (label, pool) = OVERFIT_POOLS[rng.random_range(0..OVERFIT_POOLS.len())];
            let words = rng.random_range(2..=5);
            let text = (0..words)
                .map(|_| *pool.choose(rng).expect("pool is non-empty"))
                .collect::<Vec<_>>()
                .join(" ");
            Utterance {
                text,
                speaker: speakers[i % 2].to_string(),
                label: Some(label.to_string()),
            }
        })
        .collect();
    Dialog { utterances }
}

/// Word-lookup corpus: 32 training dialogs of 4–8 utterances, four classes
/// with disjoint word pools, 8-dialog validation and test splits drawn from
/// the same distribution.
pub fn overfit_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| (0..n).map(|_| overfit_dialog(&mut rng)).collect::<Vec<_>>();
    let train = draw(32);
    let val = draw(8);
    let test = draw(8);
    let s_max = 2;
    Corpus { train, val, test, labels: LabelMap::friends4(), s_max }
}

/// All training texts of the overfit corpus, one per utterance — input for
/// vocabulary building.
pub fn overfit_texts(corpus: &Corpus) -> Vec<String> {
    corpus
        .train
        .iter()
        .flat_map(|d| d.utterances.iter().map(|u| u.text.clone()))
        .collect()
}

pub const PARITY_TEXT: &str = "okay";
pub const PARITY_SPEAKERS: [&str; 4] = ["A", "B", "C", "D"];

fn parity_dialog(rng: &mut ChaCha8Rng) -> Dialog {
    let n = rng.random_range(6..=10);
    let mut utterances: Vec<Utterance> = Vec::with_capacity(n);
    let mut prev: Option<String> = None;
    for _ in 0..n {
        // Keep the labels near 50/50: repeat the previous speaker half the
        // time, otherwise switch to one of the other three.
        let speaker = match &prev {
            Some(p) if rng.random_bool(0.5) => p.clone(),
            Some(p) => {
                let others: Vec<&&str> =
                    PARITY_SPEAKERS.iter().filter(|s| *s != p).collect();
                others.choose(rng).expect("three alternatives").to_string()
            }
            None => PARITY_SPEAKERS.choose(rng).expect("four speakers").to_string(),
        };
        let label = match &prev {
            Some(p) if *p == speaker => "same",
            _ => "diff",
        };
        utterances.push(Utterance {
            text: PARITY_TEXT.to_string(),
            speaker: speaker.clone(),
            label: Some(label.to_string()),
        });
        prev = Some(speaker);
    }
    Dialog { utterances }
}

/// Speaker-parity corpus: identical text everywhere; the label says whether
/// the utterance keeps the previous speaker ("same") or switches ("diff",
/// including every dialog opener). 96/24/48 dialogs of 6–10 utterances over
/// four speakers.
pub fn parity_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| (0..n).map(|_| parity_dialog(&mut rng)).collect::<Vec<_>>();
    let train = draw(96);
    let val = draw(24);
    let test = draw(48);
    let labels = LabelMap::new(vec!["same".into(), "diff".into()]).expect("distinct labels");
    let s_max = PARITY_SPEAKERS.len();
    Corpus { train, val, test, labels, s_max }
}
