//! Weighted cross-entropy loss, Adam, and the dialog-per-step training loop.
//!
//! Each optimizer step processes one dialog (batch size 1): forward in train
//! mode, loss, backward, Adam update. The per-utterance loss term is
//! `(1/w_c) · (−log₂ ŷ_c)` with `w_c` the class's share of the training
//! utterances, so rare classes weigh more. A step normalizes by the dialog's
//! unmasked utterance count; the reported epoch loss is the summed
//! contributions over the summed counts. After every epoch the model is
//! scored on the validation split and the best macro-F1 snapshot is kept.

use crate::data::{Corpus, Dialog, LabelMap};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{
    dialog_forward, encode_dialog, EncodedDialog, HiTransformerConfig, Model,
};
use crate::tape::{Gradients, LogBase, Mode, NodeId, Tape};
use crate::tokenizer::{TokenizerConfig, Vocab};
use rand::seq::SliceRandom as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Leave the embedding tables and the lower stack untouched by the
    /// optimizer.
    pub freeze_lower: bool,
    pub log_base: LogBase,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "{} must satisfy 0 <= beta < 1, got {}",
                    name, b
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-class loss weights `w_c = a_c / Σ a_i` from training-split counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn class_weights(train: &[Dialog], labels: &LabelMap) -> Result<ClassWeights> {
    let mut counts = vec![0u64; labels.len()];
    for d in train {
        for u in &d.utterances {
            if let Some(c) = labels.label_id(u) {
                counts[c] += 1;
            }
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Train(format!(
            "class {:?} has no utterances in the training split; its loss weight \
             would be undefined — shrink the label set or fix the data",
            labels.name(c).unwrap_or("?")
        )));
    }
    let total: u64 = counts.iter().sum();
    let w = counts.iter().map(|&n| n as f64 / total as f64).collect();
    Ok(ClassWeights { w, counts })
}

/// Adds the weighted cross-entropy of one dialog's probabilities to the
/// tape: per unmasked utterance `(1/w_c) · (−log ŷ_c)`, summed. Returns the
/// scalar contribution node and the unmasked count, or `None` when every
/// utterance is masked.
pub fn weighted_ce(
    tape: &mut Tape,
    probs: NodeId,
    golds: &[Option<usize>],
    weights: &ClassWeights,
    base: LogBase,
) -> Result<Option<(NodeId, usize)>> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[1] != weights.w.len() {
        return Err(Error::Shape(format!(
            "probabilities must be [N, {}], got {:?}",
            weights.w.len(),
            shape
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if golds.len() != n {
        return Err(Error::Contract(format!(
            "{} gold labels for {} probability rows",
            golds.len(),
            n
        )));
    }
    let mut count = 0usize;
    let mut select = vec![0.0; n * c];
    for (j, gold) in golds.iter().enumerate() {
        if let Some(g) = *gold {
            if g >= c {
                return Err(Error::Index(format!(
                    "gold class {} out of range for {} classes",
                    g, c
                )));
            }
            select[j * c + g] = 1.0 / weights.w[g];
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let sel = tape.constant_from(&[n, c], select)?;
    let logp = tape.log_clamped(probs, base);
    let weighted = tape.mul(sel, logp)?;
    let total = tape.sum(weighted);
    Ok(Some((tape.scale(total, -1.0), count)))
}

/// First/second Adam moments for every parameter, aligned with the model's
/// visit order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model) -> AdamState {
        let mut m = Vec::new();
        model.visit(&mut |_, t| m.push(vec![0.0; t.numel()]));
        AdamState { t: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update on a single parameter array.
fn adam_update(
    data: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..data.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

fn frozen(name: &str, cfg: &TrainConfig) -> bool {
    cfg.freeze_lower && (name.starts_with("embed.") || name.starts_with("lower."))
}

/// Applies the accumulated `Tensor::grad`s with bias-corrected Adam. Frozen
/// groups are skipped entirely (parameters and moments untouched).
pub fn adam_step(model: &mut Model, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    // Validate first so a bad gradient can't leave a half-updated model.
    let mut bad: Option<String> = None;
    model.visit(&mut |name, t| {
        if bad.is_none() && !frozen(name, cfg) {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    bad = Some(name.to_string());
                }
            }
        }
    });
    if let Some(name) = bad {
        return Err(Error::Train(format!("non-finite gradient in parameter {:?}", name)));
    }
    state.t += 1;
    let t = state.t;
    let mut idx = 0;
    let (m, v) = (&mut state.m, &mut state.v);
    model.visit_mut(&mut |name, tensor| {
        if !frozen(name, cfg) {
            if let Some(g) = tensor.grad.take() {
                adam_update(&mut tensor.data, &g, &mut m[idx], &mut v[idx], t, cfg);
                tensor.grad = Some(g);
            }
        }
        idx += 1;
    });
    Ok(())
}

/// Adds the tape gradients (node ids in visit order, as returned by
/// `Model::bind`) into each parameter's `grad` buffer.
pub fn accumulate_grads(model: &mut Model, ids: &[NodeId], grads: &Gradients) {
    let mut i = 0;
    model.visit_mut(&mut |_, t| {
        t.accumulate_grad(grads.get(ids[i]));
        i += 1;
    });
}

pub fn zero_grads(model: &mut Model) {
    model.visit_mut(&mut |_, t| t.zero_grad());
}

/// Confusion matrix plus masked count for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub cm: ConfusionMatrix,
    pub masked: u64,
}

/// Parallelism for evaluation: available cores, capped by the
/// `HITRANS_THREADS` environment variable when set.
pub fn eval_threads() -> Result<usize> {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("HITRANS_THREADS") {
        Ok(s) => {
            let cap: usize = s.parse().map_err(|_| {
                Error::Config(format!("HITRANS_THREADS must be a positive integer, got {:?}", s))
            })?;
            if cap == 0 {
                return Err(Error::Config("HITRANS_THREADS must be at least 1".into()));
            }
            Ok(avail.min(cap))
        }
        Err(_) => Ok(avail),
    }
}

/// Scores the model on a list of dialogs (eval mode, pure forwards spread
/// over `threads` workers; the merge is entrywise addition, so the result is
/// independent of the split).
pub fn evaluate_with_threads(
    model: &Model,
    dialogs: &[Dialog],
    vocab: &Vocab,
    tok: &TokenizerConfig,
    labels: &LabelMap,
    threads: usize,
) -> Result<EvalOutcome> {
    let threads = threads.clamp(1, dialogs.len().max(1));
    let run_chunk = |chunk: &[Dialog]| -> Result<EvalOutcome> {
        let mut cm = ConfusionMatrix::new(labels.len());
        let mut masked = 0u64;
        for d in chunk {
            let enc = encode_dialog(d, vocab, tok, labels)?;
            let preds = model.predict(&enc)?;
            for (p, g) in preds.iter().zip(&enc.golds) {
                match g {
                    Some(g) => cm.record(*g, *p)?,
                    None => masked += 1,
                }
            }
        }
        Ok(EvalOutcome { cm, masked })
    };
    if threads <= 1 {
        return run_chunk(dialogs);
    }
    let chunk_size = dialogs.len().div_ceil(threads);
    let results: Vec<Result<EvalOutcome>> = std::thread::scope(|scope| {
        let handles: Vec<_> = dialogs
            .chunks(chunk_size)
            .map(|chunk| scope.spawn(move || run_chunk(chunk)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut total = EvalOutcome { cm: ConfusionMatrix::new(labels.len()), masked: 0 };
    for r in results {
        let part = r?;
        total.cm.merge(&part.cm)?;
        total.masked += part.masked;
    }
    Ok(total)
}

pub fn evaluate(
    model: &Model,
    dialogs: &[Dialog],
    vocab: &Vocab,
    tok: &TokenizerConfig,
    labels: &LabelMap,
) -> Result<EvalOutcome> {
    evaluate_with_threads(model, dialogs, vocab, tok, labels, eval_threads()?)
}

/// One epoch's log line, emitted as JSON by the trainer.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_macro_f1: f64,
    pub val_wa: f64,
    pub val_uwa: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Snapshot with the best validation macro-F1 (earliest epoch on ties).
    pub model: Model,
    pub log: Vec<TrainLogEntry>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

/// Full training loop. `sink` sees every epoch's log entry as it is
/// produced (the CLI prints them as JSON lines).
pub fn train(
    corpus: &Corpus,
    vocab: &Vocab,
    tok: &TokenizerConfig,
    model_cfg: &HiTransformerConfig,
    train_cfg: &TrainConfig,
    sink: &mut dyn FnMut(&TrainLogEntry),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    tok.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Train("training split is empty".into()));
    }
    if corpus.val.is_empty() {
        return Err(Error::Train(
            "validation split is empty; model selection needs one".into(),
        ));
    }
    let weights = class_weights(&corpus.train, &corpus.labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut model = Model::init(model_cfg, &mut rng)?;
    let mut state = AdamState::new(&model);

    let encoded: Vec<EncodedDialog> = corpus
        .train
        .iter()
        .map(|d| encode_dialog(d, vocab, tok, &corpus.labels))
        .collect::<Result<_>>()?;

    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut order: Vec<usize> = (0..encoded.len()).collect();

    for epoch in 1..=train_cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_contrib = 0.0;
        let mut epoch_count = 0usize;
        for &di in &order {
            let dialog = &encoded[di];
            let mut tape = Tape::new();
            let (bound, ids) = model.bind(&mut tape);
            let (_, probs) = dialog_forward(
                &mut tape,
                &bound,
                &dialog.utterances,
                Some(&dialog.speakers),
                Mode::Train,
                &mut rng,
            )?;
            let Some((contribution, count)) =
                weighted_ce(&mut tape, probs, &dialog.golds, &weights, train_cfg.log_base)?
            else {
                continue; // fully masked dialog: nothing to learn from
            };
            let loss = tape.scale(contribution, 1.0 / count as f64);
            let loss_val = tape.value(loss);
            if !loss_val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {}, dialog {}",
                    epoch, di
                )));
            }
            epoch_contrib += tape.value(contribution);
            epoch_count += count;
            zero_grads(&mut model);
            let grads = tape.backward(loss)?;
            accumulate_grads(&mut model, &ids, &grads);
            adam_step(&mut model, &mut state, train_cfg)?;
        }
        if epoch_count == 0 {
            return Err(Error::Train(
                "every training utterance is masked; nothing to optimize".into(),
            ));
        }

        let val = evaluate(&model, &corpus.val, vocab, tok, &corpus.labels)?;
        let entry = TrainLogEntry {
            epoch,
            mean_train_loss: epoch_contrib / epoch_count as f64,
            val_macro_f1: crate::metrics::macro_f1(&val.cm),
            val_wa: crate::metrics::wa(&val.cm)?,
            val_uwa: crate::metrics::uwa(&val.cm)?,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if best.as_ref().map_or(true, |(_, f1, _)| entry.val_macro_f1 > *f1) {
            best = Some((epoch, entry.val_macro_f1, model.clone()));
        }
        sink(&entry);
        log.push(entry);
    }
    let (best_epoch, best_val_macro_f1, best_model) = best.expect("epochs >= 1");
    Ok(TrainOutcome { model: best_model, log, best_epoch, best_val_macro_f1 })
}
