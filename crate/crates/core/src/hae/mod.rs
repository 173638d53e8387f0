//! Hybrid attention encoder for molecular vectors.
//!
//! A flat vector of length `N` becomes `⌈N / chunk⌉` tokens of `chunk`
//! consecutive values (zero-padded tail).
//!
//! ```text
//! e    = LN_tok(Linear(chunks(x)))
//! CTA  = MSA(LN(LSTM(chunks(denoise(LN_vec(x))))))
//! CNA  = α · e ⊙ σ(expand(GELU(squeeze(mean_tokens(e)))))
//! out  = MSA(e + CTA + CNA)
//! ```

mod wavelet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{LayerNorm, Linear, Lstm, Mat, MultiHeadAttention, ParamId, ParamStore, Tape, Var};

pub use wavelet::{
    denoise_on_tape, dwt_denoise, dwt_forward, dwt_inverse, soft_threshold, universal_threshold, DwtCoeffs,
    ThresholdRule, Wavelet, WaveletConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaeVariant {
    Full,
    NoCta,
    NoCna,
    Plain,
}

impl HaeVariant {
    pub const ALL: [HaeVariant; 4] = [HaeVariant::Full, HaeVariant::NoCta, HaeVariant::NoCna, HaeVariant::Plain];

    pub fn uses_cta(self) -> bool {
        matches!(self, HaeVariant::Full | HaeVariant::NoCna)
    }

    pub fn uses_cna(self) -> bool {
        matches!(self, HaeVariant::Full | HaeVariant::NoCta)
    }

    pub fn name(self) -> &'static str {
        match self {
            HaeVariant::Full => "full",
            HaeVariant::NoCta => "no_cta",
            HaeVariant::NoCna => "no_cna",
            HaeVariant::Plain => "plain",
        }
    }
}

impl std::str::FromStr for HaeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HaeVariant::ALL
            .into_iter()
            .find(|v| v.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::invalid(format!("unknown HAE variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaeConfig {
    /// Values per token.
    pub chunk: usize,
    /// `None` removes the denoising stage.
    pub wavelet: Option<WaveletConfig>,
    /// Squeeze ratio of the channel gate.
    pub beta: f64,
    pub variant: HaeVariant,
}

impl Default for HaeConfig {
    fn default() -> Self {
        Self {
            chunk: 16,
            wavelet: Some(WaveletConfig::default()),
            beta: 0.25,
            variant: HaeVariant::Full,
        }
    }
}

impl HaeConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.chunk == 0 {
            return Err(Error::invalid("chunk size must be positive"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("beta must be in (0, 1], got {}", self.beta)));
        }
        if squeeze_width(d_model, self.beta) == 0 {
            return Err(Error::invalid(format!(
                "channel squeeze {d_model}·{} leaves no channels",
                self.beta
            )));
        }
        if let Some(w) = &self.wavelet {
            w.validate()?;
        }
        Ok(())
    }

    pub fn tokens(&self, len: usize) -> usize {
        len.div_ceil(self.chunk)
    }
}

pub fn squeeze_width(channels: usize, beta: f64) -> usize {
    (channels as f64 * beta).floor() as usize
}

/// Zero-pads a `1 × N` row to a multiple of `chunk` and folds it into
/// `⌈N / chunk⌉ × chunk` tokens.
pub fn chunk_tokens(tape: &mut Tape<'_>, x: Var, chunk: usize) -> Var {
    let (_, n) = tape.shape(x);
    let t = n.div_ceil(chunk);
    let padded = if t * chunk == n {
        x
    } else {
        let pad = tape.constant(Mat::zeros((1, t * chunk - n)));
        tape.concat_cols(&[x, pad])
    };
    tape.reshape(padded, t, chunk)
}

#[derive(Clone, Debug)]
pub struct HaeEncoder {
    pub cfg: HaeConfig,
    pub input_len: usize,
    pub d: usize,
    ln_vec: LayerNorm,
    lstm: Lstm,
    ln_seq: LayerNorm,
    cta_attn: MultiHeadAttention,
    embed: Linear,
    ln_tok: LayerNorm,
    squeeze: Linear,
    expand: Linear,
    pub alpha: ParamId,
    out_attn: MultiHeadAttention,
}

impl HaeEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_len: usize,
        d: usize,
        heads: usize,
        cfg: &HaeConfig,
    ) -> Result<Self> {
        cfg.validate(d)?;
        if input_len < 4 {
            return Err(Error::invalid(format!("molecular input length {input_len} is below 4")));
        }
        if let Some(w) = &cfg.wavelet {
            w.check_length(input_len)?;
        }
        let inner = squeeze_width(d, cfg.beta);
        Ok(Self {
            cfg: cfg.clone(),
            input_len,
            d,
            ln_vec: LayerNorm::new(store, &format!("{name}.ln_vec"), input_len),
            lstm: Lstm::new(store, rng, &format!("{name}.lstm"), cfg.chunk, d),
            ln_seq: LayerNorm::new(store, &format!("{name}.ln_seq"), d),
            cta_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cta_attn"), d, heads)?,
            embed: Linear::new(store, rng, &format!("{name}.embed"), cfg.chunk, d),
            ln_tok: LayerNorm::new(store, &format!("{name}.ln_tok"), d),
            squeeze: Linear::new(store, rng, &format!("{name}.squeeze"), d, inner),
            expand: Linear::new(store, rng, &format!("{name}.expand"), inner, d),
            alpha: store.add_filled(format!("{name}.alpha"), 1, 1, 1.0),
            out_attn: MultiHeadAttention::new(store, rng, &format!("{name}.out_attn"), d, heads)?,
        })
    }

    pub fn tokens(&self) -> usize {
        self.cfg.tokens(self.input_len)
    }

    fn check_input(&self, tape: &Tape<'_>, x: Var) -> Result<()> {
        if tape.shape(x) != (1, self.input_len) {
            return Err(Error::Shape {
                op: "hae_forward",
                left: tape.shape(x),
                right: (1, self.input_len),
            });
        }
        Ok(())
    }

    /// Token-wise normalised embedding of the raw vector.
    pub fn embed_tokens(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let t = chunk_tokens(tape, x, self.cfg.chunk);
        let e = self.embed.forward(tape, t);
        Ok(self.ln_tok.forward(tape, e))
    }

    pub fn cta_path(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let v = self.ln_vec.forward(tape, x);
        let v = match &self.cfg.wavelet {
            Some(w) => denoise_on_tape(tape, v, w)?,
            None => v,
        };
        let t = chunk_tokens(tape, v, self.cfg.chunk);
        let h = self.lstm.forward(tape, t)?;
        let h = self.ln_seq.forward(tape, h);
        self.cta_attn.forward(tape, h, h)
    }

    /// Channel gate in `(0, 1)`, one value per channel.
    pub fn cna_gate(&self, tape: &mut Tape<'_>, e: Var) -> Var {
        let pooled = tape.mean_rows(e);
        let s = self.squeeze.forward(tape, pooled);
        let s = tape.gelu(s);
        let g = self.expand.forward(tape, s);
        tape.sigmoid(g)
    }

    /// `α · e ⊙ gate(e)` for token embeddings `e`.
    pub fn cna_from_tokens(&self, tape: &mut Tape<'_>, e: Var) -> Var {
        let gate = self.cna_gate(tape, e);
        let gated = tape.mul_row(e, gate);
        let alpha = tape.param(self.alpha);
        tape.scale_by(gated, alpha)
    }

    pub fn cna_path(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let e = self.embed_tokens(tape, x)?;
        Ok(self.cna_from_tokens(tape, e))
    }

    /// Encodes a `1 × input_len` row into `tokens() × d`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let e = self.embed_tokens(tape, x)?;
        let mut sum = e;
        if self.cfg.variant.uses_cta() {
            let cta = self.cta_path(tape, x)?;
            sum = tape.add(sum, cta);
        }
        if self.cfg.variant.uses_cna() {
            let cna = self.cna_from_tokens(tape, e);
            sum = tape.add(sum, cna);
        }
        self.out_attn.forward(tape, sum, sum)
    }
}

#[cfg(test)]
mod tests;
