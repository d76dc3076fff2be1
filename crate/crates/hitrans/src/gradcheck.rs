//! Finite-difference verification of tape gradients.
//!
//! [`grad_check`] compares analytic gradients of an arbitrary
//! parameters-to-scalar function against central differences at randomly
//! sampled coordinates and reports the worst relative error.
//! [`model_grad_check`] runs that comparison end-to-end through a full
//! dialog forward pass and the weighted cross-entropy loss.

use crate::error::{Error, Result};
use crate::model::{dialog_forward, BoundModel, HiTransformerConfig, Model};
use crate::tape::{LogBase, Mode, NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokenizer::Encoded;
use crate::train::{weighted_ce, ClassWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One evaluation of a differentiable function: the scalar loss and the
/// gradient for each parameter tensor, in parameter order.
pub struct GradEval {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Smallest permitted finite-difference step.
pub const EPS_MIN: f64 = 1e-7;
/// Largest permitted finite-difference step.
pub const EPS_MAX: f64 = 1e-3;

/// Compares analytic gradients of `f` against central finite differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` at `samples` randomly chosen
/// parameter coordinates and returns the maximum relative error
/// `|a - n| / max(|a|, |n|, 1e-12)`.
///
/// `f` must be deterministic (dropout in eval mode); it is evaluated twice at
/// the unperturbed point and any bitwise difference is a contract error.
pub fn grad_check<F>(
    mut f: F,
    params: &mut [Tensor],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<GradEval>,
{
    if !(EPS_MIN..=EPS_MAX).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference step must lie in [{:e}, {:e}], got {:e}",
            EPS_MIN, EPS_MAX, eps
        )));
    }
    let base = f(params)?;
    let again = f(params)?;
    let identical = base.loss.to_bits() == again.loss.to_bits()
        && base.grads.len() == again.grads.len()
        && base
            .grads
            .iter()
            .zip(&again.grads)
            .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    if !identical {
        return Err(Error::Contract(
            "function is not deterministic across evaluations (is dropout active?)".into(),
        ));
    }
    if base.grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "function returned {} gradient arrays for {} parameters",
            base.grads.len(),
            params.len()
        )));
    }
    for (g, p) in base.grads.iter().zip(params.iter()) {
        if g.len() != p.numel() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match parameter of {} elements",
                g.len(),
                p.numel()
            )));
        }
    }

    let total: usize = params.iter().map(|p| p.numel()).sum();
    if total == 0 || samples == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let mut coord = rng.random_range(0..total);
        let mut pi = 0;
        while coord >= params[pi].numel() {
            coord -= params[pi].numel();
            pi += 1;
        }
        let orig = params[pi].data[coord];
        params[pi].data[coord] = orig + eps;
        let plus = f(params)?.loss;
        params[pi].data[coord] = orig - eps;
        let minus = f(params)?.loss;
        params[pi].data[coord] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = base.grads[pi][coord];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Adapts a tape-level graph builder into the closure shape [`grad_check`]
/// expects: every parameter becomes a leaf (in order) and `build` must return
/// the scalar loss node.
pub fn tape_loss_fn<B>(build: B) -> impl FnMut(&[Tensor]) -> Result<GradEval>
where
    B: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    move |params: &[Tensor]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.requires_grad = true;
                tape.leaf(&p)
            })
            .collect();
        let loss = build(&mut tape, &ids)?;
        let grads = tape.backward(loss)?;
        Ok(GradEval {
            loss: tape.value(loss),
            grads: ids.iter().map(|&id| grads.get(id).to_vec()).collect(),
        })
    }
}

/// End-to-end gradient verification: builds a model for `cfg`, runs a fixed
/// three-utterance dialog through the full forward pass and the weighted
/// cross-entropy loss (dropout off), and finite-difference-checks `samples`
/// sampled parameter coordinates. Returns the maximum relative error.
///
/// The initialized weights are scaled up and jittered first: near the tiny
/// initialization scale the stack is almost linear in many parameters, their
/// true gradients sit at roundoff level, and central differences measure
/// only noise there.
pub fn model_grad_check(
    cfg: &HiTransformerConfig,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    // Scale 3 sits between two failure regimes for central differences:
    // near the raw initialization much of the stack is linear and true
    // gradients drown in roundoff, while larger scales saturate the output
    // softmax against the probability floor and flatten the loss.
    model_grad_check_with(cfg, eps, samples, seed, 3.0, 0.05)
}

fn model_grad_check_with(
    cfg: &HiTransformerConfig,
    eps: f64,
    samples: usize,
    seed: u64,
    scale: f64,
    jitter_amp: f64,
) -> Result<f64> {
    cfg.validate()?;
    let model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut params = Vec::new();
    model.visit(&mut |_, t| params.push(t.clone()));
    let mut jitter = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for p in params.iter_mut() {
        for v in p.data.iter_mut() {
            *v = *v * scale + jitter_amp * (jitter.random::<f64>() - 0.5);
        }
    }

    let mut ids_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let utterances: Vec<Encoded> = [5usize, 4, 6]
        .iter()
        .map(|&want| {
            let len = want.min(cfg.lower.max_positions).max(2);
            let mut ids = vec![crate::tokenizer::CLS_ID];
            for _ in 0..len.saturating_sub(2) {
                ids.push(if cfg.vocab_size > 4 {
                    ids_rng.random_range(4..cfg.vocab_size)
                } else {
                    crate::tokenizer::UNK_ID
                });
            }
            ids.push(crate::tokenizer::SEP_ID);
            let mask = vec![true; ids.len()];
            Encoded { ids, mask }
        })
        .collect();
    let speakers: Vec<String> = ["A", "B", "A"].iter().map(|s| s.to_string()).collect();
    let golds: Vec<Option<usize>> =
        (0..utterances.len()).map(|i| Some(i % cfg.n_classes)).collect();
    let weights = ClassWeights {
        w: vec![1.0 / cfg.n_classes as f64; cfg.n_classes],
        counts: vec![1; cfg.n_classes],
    };

    let cfg = cfg.clone();
    let f = tape_loss_fn(move |tape, ids| {
        let bound = BoundModel::from_ids(&cfg, ids)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, probs) =
            dialog_forward(tape, &bound, &utterances, Some(&speakers), Mode::Eval, &mut rng)?;
        let (contribution, count) =
            weighted_ce(tape, probs, &golds, &weights, LogBase::Two)?
                .expect("all utterances carry gold labels");
        Ok(tape.scale(contribution, 1.0 / count as f64))
    });
    grad_check(f, &mut params, eps, samples, seed.wrapping_add(3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[ignore]
    fn probe_conditioning() {
        let cfg = crate::config::resolve("tiny", None, &[]).unwrap();
        for variant in [false, true] {
            let mut model_cfg = cfg.model.clone();
            model_cfg.speaker_variant = variant;
            model_cfg.upper.d_model =
                model_cfg.lower.d_model + if variant { model_cfg.s_max } else { 0 };
            for seed in [7u64, 8, 9, 123] {
                for eps in [1e-4, 2e-4, 3e-4] {
                    let r = model_grad_check(&model_cfg, eps, 200, seed).unwrap();
                    println!("variant={variant} seed={seed} eps={eps:e}: {r:e}");
                }
            }
        }
    }

    #[test]
    fn quadratic_is_exact_to_1e9() {
        // f(x) = sum(x ⊙ x); analytic gradient 2x.
        let mut params = vec![Tensor::from_vec(&[4], vec![0.5, -1.25, 2.0, 3.5]).unwrap()];
        let f = tape_loss_fn(|tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum(sq))
        });
        let max_rel = grad_check(f, &mut params, 1e-5, 50, 1).unwrap();
        assert!(max_rel < 1e-9, "max rel err {}", max_rel);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let mut params = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        let f = tape_loss_fn(|tape, ids| Ok(tape.sum(ids[0])));
        let err = grad_check(f, &mut params, 1e-2, 1, 0).unwrap_err();
        assert_eq!(err.kind(), "config");
        let f = tape_loss_fn(|tape, ids| Ok(tape.sum(ids[0])));
        let err = grad_check(f, &mut params, 1e-8, 1, 0).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let mut params = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        let f = |_: &[Tensor]| {
            calls.set(calls.get() + 1.0);
            Ok(GradEval { loss: calls.get(), grads: vec![vec![1.0]] })
        };
        let err = grad_check(f, &mut params, 1e-5, 1, 0).unwrap_err();
        assert_eq!(err.kind(), "contract");
        assert!(err.to_string().contains("dropout"));
    }
}
