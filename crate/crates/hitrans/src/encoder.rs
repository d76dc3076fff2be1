//! Configurable transformer-encoder stack, used twice by the model: once at
//! the word level over token embeddings and once at the dialog level over
//! utterance vectors.
//!
//! The layer arrangement is post-layer-norm: `LN(X + Dropout(MHA(X)))`
//! followed by `LN(h + Dropout(FFN(h)))`, with GELU inside the feed-forward.
//! Attention is fully bidirectional; masked key positions receive a score of
//! negative infinity before the row softmax, so their weight is exactly
//! zero. The position signal is configurable: a learned table, fixed
//! sinusoids, or nothing at all (in which case the stack is exactly
//! permutation-equivariant, which the tests rely on).

use crate::error::{Error, Result};
use crate::tape::{Mode, NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;

/// Layer-norm epsilon used across the stack.
pub const LN_EPS: f64 = 1e-12;

/// Standard-deviation of the normal init for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalKind {
    Learned,
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Dropout rate applied to both sub-layer outputs (attention and
    /// feed-forward) in train mode.
    pub attn_dropout: f64,
    pub max_positions: usize,
    pub positional_kind: PositionalKind,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder {} must be at least 1", name)));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!(
                "attn_dropout must satisfy 0 <= p < 1, got {}",
                self.attn_dropout
            )));
        }
        if self.positional_kind == PositionalKind::Sinusoidal && self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoidal positions require an even d_model, got {}",
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Closed-form parameter count implied by a config.
pub fn param_count_for(cfg: &EncoderConfig) -> usize {
    let d = cfg.d_model;
    let per_layer = 4 * (d * d + d) + 2 * d * cfg.d_ff + cfg.d_ff + d + 4 * d;
    let positions = match cfg.positional_kind {
        PositionalKind::Learned => cfg.max_positions * d,
        _ => 0,
    };
    cfg.n_layers * per_layer + positions
}

/// One transformer layer's parameters. Weights multiply from the right
/// (`x · W`): shape `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl LayerParams {
    /// Field names in canonical traversal order; every ordered walk of the
    /// parameters (naming, binding, gradient application, checkpoints) goes
    /// through this list.
    pub const FIELD_NAMES: [&'static str; 16] = [
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
        "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
    ];

    fn init<R: Rng>(d: usize, d_ff: usize, rng: &mut R) -> LayerParams {
        let w = |rng: &mut R, rows, cols| Tensor::randn(&[rows, cols], INIT_STD, rng).with_grad();
        let b = |n| Tensor::zeros(&[n]).with_grad();
        LayerParams {
            wq: w(rng, d, d),
            bq: b(d),
            wk: w(rng, d, d),
            bk: b(d),
            wv: w(rng, d, d),
            bv: b(d),
            wo: w(rng, d, d),
            bo: b(d),
            w_ff1: w(rng, d, d_ff),
            b_ff1: b(d_ff),
            w_ff2: w(rng, d_ff, d),
            b_ff2: b(d),
            ln1_gamma: Tensor::ones(&[d]).with_grad(),
            ln1_beta: Tensor::zeros(&[d]).with_grad(),
            ln2_gamma: Tensor::ones(&[d]).with_grad(),
            ln2_beta: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub fn fields(&self) -> [&Tensor; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.w_ff1, &self.b_ff1, &self.w_ff2, &self.b_ff2, &self.ln1_gamma, &self.ln1_beta,
            &self.ln2_gamma, &self.ln2_beta,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.w_ff1, &mut self.b_ff1, &mut self.w_ff2,
            &mut self.b_ff2, &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

/// A full encoder stack: per-layer parameters plus the learned position
/// table when the config asks for one.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams>,
    /// `[max_positions, d_model]`, present iff `positional_kind` is learned.
    pub positions: Option<Tensor>,
}

impl EncoderStack {
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<EncoderStack> {
        config.validate()?;
        let positions = match config.positional_kind {
            PositionalKind::Learned => Some(
                Tensor::randn(&[config.max_positions, config.d_model], INIT_STD, rng).with_grad(),
            ),
            _ => None,
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::init(config.d_model, config.d_ff, rng))
            .collect();
        Ok(EncoderStack { config: config.clone(), layers, positions })
    }

    /// Walks every parameter in canonical order with its canonical name
    /// (`positions`, then `layer{i}.{field}`), all under `prefix`.
    pub fn visit<F: FnMut(&str, &Tensor)>(&self, prefix: &str, f: &mut F) {
        if let Some(p) = &self.positions {
            f(&format!("{prefix}positions"), p);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::FIELD_NAMES.iter().zip(layer.fields()) {
                f(&format!("{prefix}layer{i}.{name}"), t);
            }
        }
    }

    /// Mutable twin of [`EncoderStack::visit`], same order and names.
    pub fn visit_mut<F: FnMut(&str, &mut Tensor)>(&mut self, prefix: &str, f: &mut F) {
        if let Some(p) = &mut self.positions {
            f(&format!("{prefix}positions"), p);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LayerParams::FIELD_NAMES.iter().zip(layer.fields_mut()) {
                f(&format!("{prefix}layer{i}.{name}"), t);
            }
        }
    }

    /// Actual parameter count; always equals [`param_count_for`].
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Registers every parameter on the tape (in visit order) and returns
    /// the bound handle used to run the stack.
    pub fn bind(&self, tape: &mut Tape) -> BoundStack {
        let mut ids = Vec::new();
        self.visit("", &mut |_, t| ids.push(tape.leaf(t)));
        BoundStack::from_ids(&self.config, &ids).expect("bind follows visit order")
    }

    /// Pure eval-mode forward pass on a scratch tape.
    pub fn forward(&self, x: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xc = tape.constant(x);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = bound.encode(&mut tape, xc, mask, Mode::Eval, &mut rng, None)?;
        Ok(tape.tensor(out))
    }
}

use rand::SeedableRng as _;

/// Tape handles for one layer's parameters, in [`LayerParams::FIELD_NAMES`]
/// order.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub ids: [NodeId; 16],
}

impl BoundLayer {
    pub fn from_ids(ids: [NodeId; 16]) -> BoundLayer {
        BoundLayer { ids }
    }

    fn get(&self, name: &str) -> NodeId {
        let i = LayerParams::FIELD_NAMES
            .iter()
            .position(|n| *n == name)
            .expect("known layer field");
        self.ids[i]
    }
}

/// Tape handles for a whole stack.
#[derive(Debug, Clone)]
pub struct BoundStack {
    pub config: EncoderConfig,
    pub positions: Option<NodeId>,
    pub layers: Vec<BoundLayer>,
}

/// Number of parameter tensors a config implies (visit-order length).
pub fn tensor_count_for(cfg: &EncoderConfig) -> usize {
    cfg.n_layers * 16 + usize::from(cfg.positional_kind == PositionalKind::Learned)
}

impl BoundStack {
    /// Reassembles bound handles from node ids laid out in visit order.
    pub fn from_ids(config: &EncoderConfig, ids: &[NodeId]) -> Result<BoundStack> {
        let expected = tensor_count_for(config);
        if ids.len() != expected {
            return Err(Error::Contract(format!(
                "stack binding expects {} tensors, got {}",
                expected,
                ids.len()
            )));
        }
        let mut it = ids.iter().copied();
        let positions = match config.positional_kind {
            PositionalKind::Learned => Some(it.next().expect("counted above")),
            _ => None,
        };
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut arr = [NodeId::default(); 16];
                for slot in &mut arr {
                    *slot = it.next().expect("counted above");
                }
                BoundLayer::from_ids(arr)
            })
            .collect();
        Ok(BoundStack { config: config.clone(), positions, layers })
    }

    /// Applies the configured position signal, then all layers.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mask: &[bool],
        mode: Mode,
        rng: &mut R,
        attn_out: Option<&mut Vec<Tensor>>,
    ) -> Result<NodeId> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(Error::Shape(format!(
                "encoder input must be [T, {}], got {:?}",
                self.config.d_model, shape
            )));
        }
        let t = shape[0];
        let x = match self.config.positional_kind {
            PositionalKind::Learned => {
                if t > self.config.max_positions {
                    return Err(Error::Length(format!(
                        "sequence length {} exceeds max_positions {}",
                        t, self.config.max_positions
                    )));
                }
                let ids: Vec<usize> = (0..t).collect();
                let table = self.positions.expect("learned stack has a position table");
                let pos = tape.embedding_lookup(table, &ids)?;
                tape.add(x, pos)?
            }
            PositionalKind::Sinusoidal => {
                let pe = sinusoidal_positions(t, self.config.d_model)?;
                let pec = tape.constant(&pe);
                tape.add(x, pec)?
            }
            PositionalKind::None => x,
        };
        self.run_layers(tape, x, mask, mode, rng, attn_out)
    }

    /// Applies the layers only — no position signal. The model uses this
    /// when it injects its own positional treatment.
    pub fn run_layers<R: Rng>(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mask: &[bool],
        mode: Mode,
        rng: &mut R,
        mut attn_out: Option<&mut Vec<Tensor>>,
    ) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = transformer_layer(
                tape,
                h,
                mask,
                layer,
                &self.config,
                mode,
                rng,
                attn_out.as_deref_mut(),
            )?;
        }
        Ok(h)
    }
}

/// Scaled dot-product multi-head attention over `x: [T, d_model]`.
/// `mask[j] == false` removes position `j` from every query's key set. With
/// `attn_out` set, each head's post-softmax weight matrix is appended.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: NodeId,
    mask: &[bool],
    layer: &BoundLayer,
    cfg: &EncoderConfig,
    mut attn_out: Option<&mut Vec<Tensor>>,
) -> Result<NodeId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::Shape(format!(
            "attention input must be [T, {}], got {:?}",
            cfg.d_model, shape
        )));
    }
    let t = shape[0];
    if t == 0 {
        return Err(Error::Contract("attention needs at least one position".into()));
    }
    if mask.len() != t {
        return Err(Error::Contract(format!(
            "attention mask length {} does not match {} positions",
            mask.len(),
            t
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("all key positions are masked".into()));
    }

    let project = |tape: &mut Tape, w, b| -> Result<NodeId> {
        let xw = tape.matmul(x, w)?;
        tape.add_row_broadcast(xw, b)
    };
    let q = project(tape, layer.get("wq"), layer.get("bq"))?;
    let k = project(tape, layer.get("wk"), layer.get("bk"))?;
    let v = project(tape, layer.get("wv"), layer.get("bv"))?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qi = tape.slice_cols(q, h * dh, dh)?;
        let ki = tape.slice_cols(k, h * dh, dh)?;
        let vi = tape.slice_cols(v, h * dh, dh)?;
        let kit = tape.transpose(ki)?;
        let scores = tape.matmul(qi, kit)?;
        let scores = tape.scale(scores, scale);
        let masked = tape.mask_fill_cols(scores, mask)?;
        let attn = tape.softmax_rows(masked)?;
        if let Some(out) = attn_out.as_deref_mut() {
            out.push(tape.tensor(attn));
        }
        heads.push(tape.matmul_exact(attn, vi)?);
    }
    let concat = tape.concat(&heads, 1)?;
    let out = tape.matmul(concat, layer.get("wo"))?;
    tape.add_row_broadcast(out, layer.get("bo"))
}

/// One full post-layer-norm transformer layer.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer<R: Rng>(
    tape: &mut Tape,
    x: NodeId,
    mask: &[bool],
    layer: &BoundLayer,
    cfg: &EncoderConfig,
    mode: Mode,
    rng: &mut R,
    attn_out: Option<&mut Vec<Tensor>>,
) -> Result<NodeId> {
    let a = multi_head_attention(tape, x, mask, layer, cfg, attn_out)?;
    let a = tape.dropout(a, cfg.attn_dropout, mode, rng)?;
    let res1 = tape.add(x, a)?;
    let h = tape.layer_norm(res1, layer.get("ln1_gamma"), layer.get("ln1_beta"), LN_EPS)?;

    let f1 = tape.matmul(h, layer.get("w_ff1"))?;
    let f1 = tape.add_row_broadcast(f1, layer.get("b_ff1"))?;
    let f1 = tape.gelu(f1);
    let f2 = tape.matmul(f1, layer.get("w_ff2"))?;
    let f2 = tape.add_row_broadcast(f2, layer.get("b_ff2"))?;
    let f2 = tape.dropout(f2, cfg.attn_dropout, mode, rng)?;
    let res2 = tape.add(h, f2)?;
    tape.layer_norm(res2, layer.get("ln2_gamma"), layer.get("ln2_beta"), LN_EPS)
}

/// Fixed sinusoidal position signal: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`
/// and `PE[pos, 2i+1] = cos` of the same argument.
pub fn sinusoidal_positions(t: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal positions require an even dimension, got {}",
            d
        )));
    }
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_vec(&[t, d], data)
}
