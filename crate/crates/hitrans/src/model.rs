//! The assembled hierarchical classifier.
//!
//! Word level: token ids are embedded (token row + learned position row),
//! run through the lower encoder stack, and max-pooled into one vector per
//! utterance. Dialog level: the utterance vectors get a sinusoidal position
//! signal, optionally a per-dialog speaker one-hot concatenated on the right
//! (the speaker-aware variant), and run through the upper encoder stack.
//! A two-layer SELU classifier with dropout maps each contextual utterance
//! vector to class probabilities.
//!
//! The model owns the token and lower position tables and adds both
//! positional signals itself; the two internal stacks are built without any
//! positional handling of their own. This keeps the upper position signal at
//! the utterance-vector width so it lands before the speaker concat.

use crate::data::{Dialog, LabelMap};
use crate::encoder::{
    sinusoidal_positions, BoundStack, EncoderConfig, EncoderStack, PositionalKind, INIT_STD,
};
use crate::error::{Error, Result};
use crate::tape::{Mode, NodeId, Tape};
use crate::tensor::{argmax, Tensor};
use crate::tokenizer::{encode, Encoded, TokenizerConfig, Vocab, CLS_ID, SEP_ID};
use rand::Rng;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiTransformerConfig {
    pub lower: EncoderConfig,
    pub upper: EncoderConfig,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub classifier_hidden: usize,
    pub classifier_dropout: f64,
    pub speaker_variant: bool,
    /// Speaker one-hot width: the max distinct-speaker count over the corpus.
    pub s_max: usize,
    /// Whether `[CLS]`/`[SEP]` positions participate in the utterance
    /// max-pool.
    pub pool_specials: bool,
}

impl HiTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        self.lower.validate()?;
        // The upper stack never generates its own position signal (the model
        // adds sinusoids at utterance-vector width before the speaker
        // concat), so validate its shape with positions out of the picture.
        EncoderConfig { positional_kind: PositionalKind::None, ..self.upper.clone() }.validate()?;
        match self.lower.positional_kind {
            PositionalKind::Learned | PositionalKind::None => {}
            PositionalKind::Sinusoidal => {
                return Err(Error::Config(
                    "lower positional_kind must be learned or none".into(),
                ));
            }
        }
        match self.upper.positional_kind {
            PositionalKind::Sinusoidal | PositionalKind::None => {}
            PositionalKind::Learned => {
                return Err(Error::Config(
                    "upper positional_kind must be sinusoidal or none".into(),
                ));
            }
        }
        if self.upper.positional_kind == PositionalKind::Sinusoidal
            && self.lower.d_model % 2 != 0
        {
            return Err(Error::Config(format!(
                "sinusoidal upper positions require an even lower d_model, got {}",
                self.lower.d_model
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must cover the four special tokens, got {}",
                self.vocab_size
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be at least 1".into()));
        }
        if self.classifier_hidden == 0 {
            return Err(Error::Config("classifier_hidden must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return Err(Error::Config(format!(
                "classifier_dropout must satisfy 0 <= p < 1, got {}",
                self.classifier_dropout
            )));
        }
        if self.s_max == 0 {
            return Err(Error::Config("s_max must be at least 1".into()));
        }
        let want_upper = if self.speaker_variant {
            self.lower.d_model + self.s_max
        } else {
            self.lower.d_model
        };
        if self.upper.d_model != want_upper {
            return Err(Error::Config(format!(
                "upper d_model must be {} (lower d_model {}{}), got {}",
                want_upper,
                self.lower.d_model,
                if self.speaker_variant {
                    format!(" + s_max {}", self.s_max)
                } else {
                    String::new()
                },
                self.upper.d_model
            )));
        }
        Ok(())
    }

    fn stack_config(base: &EncoderConfig) -> EncoderConfig {
        EncoderConfig { positional_kind: PositionalKind::None, ..base.clone() }
    }
}

/// All parameters plus the config they were shaped by.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: HiTransformerConfig,
    /// Token embedding table `[vocab_size, d_lower]`.
    pub tokens: Tensor,
    /// Learned lower position table `[lower.max_positions, d_lower]`,
    /// present iff the lower positional kind is `learned`.
    pub positions: Option<Tensor>,
    pub lower: EncoderStack,
    pub upper: EncoderStack,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Model {
    pub fn init<R: Rng>(config: &HiTransformerConfig, rng: &mut R) -> Result<Model> {
        config.validate()?;
        let d = config.lower.d_model;
        let tokens = Tensor::randn(&[config.vocab_size, d], INIT_STD, rng).with_grad();
        let positions = match config.lower.positional_kind {
            PositionalKind::Learned => {
                Some(Tensor::randn(&[config.lower.max_positions, d], INIT_STD, rng).with_grad())
            }
            _ => None,
        };
        let lower = EncoderStack::init(&HiTransformerConfig::stack_config(&config.lower), rng)?;
        let upper = EncoderStack::init(&HiTransformerConfig::stack_config(&config.upper), rng)?;
        let w1 =
            Tensor::randn(&[config.upper.d_model, config.classifier_hidden], INIT_STD, rng)
                .with_grad();
        let b1 = Tensor::zeros(&[config.classifier_hidden]).with_grad();
        let w2 =
            Tensor::randn(&[config.classifier_hidden, config.n_classes], INIT_STD, rng)
                .with_grad();
        let b2 = Tensor::zeros(&[config.n_classes]).with_grad();
        Ok(Model { config: config.clone(), tokens, positions, lower, upper, w1, b1, w2, b2 })
    }

    /// Walks every parameter in canonical order with its canonical name:
    /// `embed.tokens`, `embed.positions`, `lower.layer{i}.*`,
    /// `upper.layer{i}.*`, `classifier.{w1,b1,w2,b2}`.
    pub fn visit<F: FnMut(&str, &Tensor)>(&self, f: &mut F) {
        f("embed.tokens", &self.tokens);
        if let Some(p) = &self.positions {
            f("embed.positions", p);
        }
        self.lower.visit("lower.", f);
        self.upper.visit("upper.", f);
        f("classifier.w1", &self.w1);
        f("classifier.b1", &self.b1);
        f("classifier.w2", &self.w2);
        f("classifier.b2", &self.b2);
    }

    /// Mutable twin of [`Model::visit`], same order and names.
    pub fn visit_mut<F: FnMut(&str, &mut Tensor)>(&mut self, f: &mut F) {
        f("embed.tokens", &mut self.tokens);
        if let Some(p) = &mut self.positions {
            f("embed.positions", p);
        }
        self.lower.visit_mut("lower.", f);
        self.upper.visit_mut("upper.", f);
        f("classifier.w1", &mut self.w1);
        f("classifier.b1", &mut self.b1);
        f("classifier.w2", &mut self.w2);
        f("classifier.b2", &mut self.b2);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Registers every parameter on the tape and returns the bound handle
    /// plus the node ids in visit order (for gradient application).
    pub fn bind(&self, tape: &mut Tape) -> (BoundModel, Vec<NodeId>) {
        let mut ids = Vec::new();
        self.visit(&mut |_, t| ids.push(tape.leaf(t)));
        let bound = BoundModel::from_ids(&self.config, &ids).expect("bind follows visit order");
        (bound, ids)
    }

    /// Eval-mode forward on a scratch tape: (logits, probabilities).
    pub fn forward_eval(&self, dialog: &EncodedDialog) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, probs) = dialog_forward(
            &mut tape,
            &bound,
            &dialog.utterances,
            Some(&dialog.speakers),
            Mode::Eval,
            &mut rng,
        )?;
        Ok((tape.tensor(logits), tape.tensor(probs)))
    }

    /// Per-utterance most likely class; ties go to the lowest class index.
    pub fn predict(&self, dialog: &EncodedDialog) -> Result<Vec<usize>> {
        let (_, probs) = self.forward_eval(dialog)?;
        let (n, c) = probs.dims2()?;
        Ok((0..n).map(|j| argmax(&probs.data[j * c..(j + 1) * c])).collect())
    }
}

/// Number of parameter tensors a model config implies (visit-order length).
pub fn model_tensor_count(cfg: &HiTransformerConfig) -> usize {
    1 + usize::from(cfg.lower.positional_kind == PositionalKind::Learned)
        + 16 * (cfg.lower.n_layers + cfg.upper.n_layers)
        + 4
}

/// Tape handles for a whole model, laid out like [`Model::visit`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: HiTransformerConfig,
    pub tokens: NodeId,
    pub positions: Option<NodeId>,
    pub lower: BoundStack,
    pub upper: BoundStack,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl BoundModel {
    pub fn from_ids(cfg: &HiTransformerConfig, ids: &[NodeId]) -> Result<BoundModel> {
        let expected = model_tensor_count(cfg);
        if ids.len() != expected {
            return Err(Error::Contract(format!(
                "model binding expects {} tensors, got {}",
                expected,
                ids.len()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &ids[at..at + n];
            at += n;
            s
        };
        let tokens = take(1)[0];
        let positions = match cfg.lower.positional_kind {
            PositionalKind::Learned => Some(take(1)[0]),
            _ => None,
        };
        let lower_cfg = HiTransformerConfig::stack_config(&cfg.lower);
        let upper_cfg = HiTransformerConfig::stack_config(&cfg.upper);
        let lower = BoundStack::from_ids(&lower_cfg, take(16 * cfg.lower.n_layers))?;
        let upper = BoundStack::from_ids(&upper_cfg, take(16 * cfg.upper.n_layers))?;
        let rest = take(4);
        Ok(BoundModel {
            config: cfg.clone(),
            tokens,
            positions,
            lower,
            upper,
            w1: rest[0],
            b1: rest[1],
            w2: rest[2],
            b2: rest[3],
        })
    }
}

/// Per-dialog speaker one-hots: speakers are indexed by order of first
/// appearance, each row is that index's one-hot zero-padded to `s_max`.
pub fn speaker_onehots(speakers: &[String], s_max: usize) -> Result<Tensor> {
    let mut order: Vec<&str> = Vec::new();
    let mut indices = Vec::with_capacity(speakers.len());
    for s in speakers {
        let idx = match order.iter().position(|o| o == s) {
            Some(i) => i,
            None => {
                order.push(s);
                order.len() - 1
            }
        };
        indices.push(idx);
    }
    if order.len() > s_max {
        return Err(Error::Capacity(format!(
            "dialog has {} distinct speakers but s_max is {}",
            order.len(),
            s_max
        )));
    }
    let mut data = vec![0.0; speakers.len() * s_max];
    for (row, &idx) in indices.iter().enumerate() {
        data[row * s_max + idx] = 1.0;
    }
    Tensor::from_vec(&[speakers.len(), s_max], data)
}

/// Token-embedding rows plus learned position rows: `[len(ids), d_lower]`.
pub fn embed_utterance(tape: &mut Tape, bound: &BoundModel, ids: &[usize]) -> Result<NodeId> {
    if ids.len() < 2 {
        return Err(Error::Contract(format!(
            "an encoded utterance has at least [CLS] and [SEP], got {} ids",
            ids.len()
        )));
    }
    if ids.len() > bound.config.lower.max_positions {
        return Err(Error::Length(format!(
            "utterance length {} exceeds lower max_positions {}",
            ids.len(),
            bound.config.lower.max_positions
        )));
    }
    let tok = tape.embedding_lookup(bound.tokens, ids)?;
    match bound.positions {
        Some(table) => {
            let pos_ids: Vec<usize> = (0..ids.len()).collect();
            let pos = tape.embedding_lookup(table, &pos_ids)?;
            tape.add(tok, pos)
        }
        None => Ok(tok),
    }
}

/// Lower-encodes one utterance and max-pools it to `[1, d_lower]`.
pub fn utterance_vector<R: Rng>(
    tape: &mut Tape,
    bound: &BoundModel,
    encoded: &Encoded,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    let e = embed_utterance(tape, bound, &encoded.ids)?;
    let enc = bound.lower.run_layers(tape, e, &encoded.mask, mode, rng, None)?;
    let keep: Vec<bool> = encoded
        .ids
        .iter()
        .zip(&encoded.mask)
        .map(|(&id, &m)| {
            m && (bound.config.pool_specials || (id != CLS_ID && id != SEP_ID))
        })
        .collect();
    tape.max_pool_rows(enc, &keep)
}

/// Full dialog forward: utterance vectors, upper position signal, optional
/// speaker concat, upper encoding, classifier. Returns (logits,
/// probabilities), both `[N_i, n_classes]`.
pub fn dialog_forward<R: Rng>(
    tape: &mut Tape,
    bound: &BoundModel,
    utterances: &[Encoded],
    speakers: Option<&[String]>,
    mode: Mode,
    rng: &mut R,
) -> Result<(NodeId, NodeId)> {
    let n = utterances.len();
    if n == 0 {
        return Err(Error::Contract("dialog_forward needs at least one utterance".into()));
    }
    let mut rows = Vec::with_capacity(n);
    for enc in utterances {
        rows.push(utterance_vector(tape, bound, enc, mode, rng)?);
    }
    let mut u = tape.concat(&rows, 0)?;

    if bound.config.upper.positional_kind == PositionalKind::Sinusoidal {
        let pe = sinusoidal_positions(n, bound.config.lower.d_model)?;
        let pec = tape.constant(&pe);
        u = tape.add(u, pec)?;
    }

    if bound.config.speaker_variant {
        let speakers = speakers.ok_or_else(|| {
            Error::Contract("the speaker variant needs the dialog's speaker list".into())
        })?;
        if speakers.len() != n {
            return Err(Error::Contract(format!(
                "{} speakers for {} utterances",
                speakers.len(),
                n
            )));
        }
        let onehots = speaker_onehots(speakers, bound.config.s_max)?;
        let oc = tape.constant(&onehots);
        u = tape.concat(&[u, oc], 1)?;
    }

    let t = bound.upper.run_layers(tape, u, &vec![true; n], mode, rng, None)?;

    let h = tape.matmul(t, bound.w1)?;
    let h = tape.add_row_broadcast(h, bound.b1)?;
    let h = tape.selu(h);
    let h = tape.dropout(h, bound.config.classifier_dropout, mode, rng)?;
    let logits = tape.matmul(h, bound.w2)?;
    let logits = tape.add_row_broadcast(logits, bound.b2)?;
    let probs = tape.softmax_rows(logits)?;
    Ok((logits, probs))
}

/// One dialog, tokenized and label-mapped, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDialog {
    pub utterances: Vec<Encoded>,
    pub speakers: Vec<String>,
    /// Class id per utterance; `None` marks a masked utterance.
    pub golds: Vec<Option<usize>>,
}

/// Runs the tokenizer over every utterance and maps labels (out-of-set or
/// absent labels become `None`).
pub fn encode_dialog(
    dialog: &Dialog,
    vocab: &Vocab,
    cfg: &TokenizerConfig,
    labels: &LabelMap,
) -> Result<EncodedDialog> {
    let mut utterances = Vec::with_capacity(dialog.utterances.len());
    let mut speakers = Vec::with_capacity(dialog.utterances.len());
    let mut golds = Vec::with_capacity(dialog.utterances.len());
    for u in &dialog.utterances {
        utterances.push(encode(&u.text, vocab, cfg)?);
        speakers.push(u.speaker.clone());
        golds.push(labels.label_id(u));
    }
    Ok(EncodedDialog { utterances, speakers, golds })
}
