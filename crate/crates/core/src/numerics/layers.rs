//! Trainable building blocks recorded on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tape::{Mat, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add_fan_in(format!("{name}.w"), d_in, d_out, rng);
        let b = store.add_zeros(format!("{name}.b"), 1, d_out);
        Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        }
    }

    pub fn without_bias<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add_fan_in(format!("{name}.w"), d_in, d_out, rng);
        Self {
            w,
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    /// Ids of every parameter, for tests that need to overwrite them.
    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), 1, dim, 1.0),
            beta: store.add_zeros(format!("{name}.beta"), 1, dim),
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm_rows(x, g, b, self.eps)
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mask<R: Rng + ?Sized>(&self, shape: (usize, usize), rng: &mut R) -> Mat {
        let keep = 1.0 / (1.0 - self.rate);
        Mat::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < self.rate {
                0.0
            } else {
                keep
            }
        })
    }

    pub fn apply<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, mode: Mode, rng: &mut R) -> Var {
        if mode == Mode::Eval || self.rate == 0.0 {
            return x;
        }
        let mask = self.mask(tape.shape(x), rng);
        tape.mul_const(x, mask)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, d_hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d_hidden, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.fc1.forward(tape, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }

    /// Same as [`forward`](Self::forward) with dropout on the hidden layer.
    pub fn forward_dropout<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        dropout: Dropout,
        mode: Mode,
        rng: &mut R,
    ) -> Var {
        let h = self.fc1.forward(tape, x);
        let h = tape.gelu(h);
        let h = dropout.apply(tape, h, mode, rng);
        self.fc2.forward(tape, h)
    }
}

/// Scaled dot-product attention with `heads` parallel heads.
///
/// Queries come from `q_tokens`, keys and values from `kv_tokens`; passing
/// the same matrix twice gives self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "model dim {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            o: Linear::new(store, rng, &format!("{name}.o"), d_model, d_model),
            heads,
            d_model,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, q_tokens: Var, kv_tokens: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, q_tokens, kv_tokens)?.0)
    }

    /// Also returns the per-head attention matrices (`n_q × n_kv`).
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape<'_>,
        q_tokens: Var,
        kv_tokens: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (nq, dq) = tape.shape(q_tokens);
        let (nk, dk) = tape.shape(kv_tokens);
        if nq == 0 || nk == 0 {
            return Err(Error::invalid("attention over an empty token sequence"));
        }
        if dq != self.d_model || dk != self.d_model {
            return Err(Error::Shape {
                op: "multi_head_attention",
                left: (nq, dq),
                right: (nk, dk),
            });
        }
        let q = self.q.forward(tape, q_tokens);
        let k = self.k.forward(tape, kv_tokens);
        let v = self.v.forward(tape, kv_tokens);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh),
                    tape.slice_cols(k, h * dh, dh),
                    tape.slice_cols(v, h * dh, dh),
                )
            };
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            weights.push(attn);
            outs.push(tape.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        Ok((self.o.forward(tape, merged), weights))
    }
}

/// Pre-norm encoder block: `x + MSA(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ffn: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d_model, d_ffn, d_model),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, x);
        let a = self.attn.forward(tape, h, h)?;
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, x);
        let f = self.ffn.forward(tape, h);
        Ok(tape.add(x, f))
    }

    /// Output projections of both residual branches.
    pub fn output_projections(&self) -> Vec<ParamId> {
        let mut ids = self.attn.o.param_ids();
        ids.extend(self.ffn.fc2.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        depth: usize,
        d_model: usize,
        heads: usize,
        d_ffn: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, rng, &format!("{name}.{i}"), d_model, heads, d_ffn))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, x)?;
        }
        Ok(x)
    }
}

/// Single-layer LSTM over the row (time) axis; returns every hidden state.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, hidden: usize) -> Self {
        Self {
            wx: store.add_fan_in(format!("{name}.wx"), d_in, 4 * hidden, rng),
            wh: store.add_fan_in(format!("{name}.wh"), hidden, 4 * hidden, rng),
            b: store.add_zeros(format!("{name}.b"), 1, 4 * hidden),
            d_in,
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, seq: Var) -> Result<Var> {
        let (n, d) = tape.shape(seq);
        if n == 0 {
            return Err(Error::invalid("LSTM over an empty sequence"));
        }
        if d != self.d_in {
            return Err(Error::Shape {
                op: "lstm_encode",
                left: (n, d),
                right: (self.d_in, 4 * self.hidden),
            });
        }
        let hd = self.hidden;
        let wx = tape.param(self.wx);
        let wh = tape.param(self.wh);
        let b = tape.param(self.b);
        // input contributions for all steps at once
        let xw = tape.affine(seq, wx, b);
        let mut h = tape.constant(Mat::zeros((1, hd)));
        let mut c = tape.constant(Mat::zeros((1, hd)));
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let xt = tape.slice_rows(xw, t, 1);
            let hh = tape.matmul(h, wh);
            let z = tape.add(xt, hh);
            let i = tape.slice_cols(z, 0, hd);
            let f = tape.slice_cols(z, hd, hd);
            let g = tape.slice_cols(z, 2 * hd, hd);
            let o = tape.slice_cols(z, 3 * hd, hd);
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let g = tape.tanh(g);
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, g);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);
            states.push(h);
        }
        Ok(tape.concat_rows(&states))
    }
}
