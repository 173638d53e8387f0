//! Triplet masked autoencoder over the pathology, RNA and CNV/MUT token
//! sequences.
//!
//! Branch `k` masks modality `k` only. Its encoder sees the visible tokens
//! of that modality; its decoder rebuilds the full sequence from the
//! projected latents plus a shared mask token, cross-attends to the other
//! two branches' projected latents, then self-attends. The loss is the
//! masked-position MSE against the (detached) original tokens.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    LayerNorm, Linear, Mat, MultiHeadAttention, ParamId, ParamStore, Tape, TransformerBlock, TransformerStack, Var,
};

pub const MIN_MASK_RATIO: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "P")]
    Pathology,
    #[serde(rename = "R")]
    Rna,
    #[serde(rename = "CM")]
    CnvMut,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Pathology, Branch::Rna, Branch::CnvMut];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Pathology => "P",
            Branch::Rna => "R",
            Branch::CnvMut => "CM",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown modality `{s}`, expected P, R or CM")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub branch: Branch,
    /// Sorted, unique token indices.
    pub masked: Vec<usize>,
    pub n: usize,
    pub ratio: f64,
}

impl MaskSpec {
    /// Explicit mask, e.g. tokens that are genuinely missing.
    pub fn from_indices(branch: Branch, n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&i| i >= n) {
            return Err(Error::invalid(format!("mask index out of range for {n} tokens")));
        }
        let ratio = masked.len() as f64 / n.max(1) as f64;
        Ok(Self { branch, masked, n, ratio })
    }

    pub fn visible(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n - self.masked.len());
        let mut m = self.masked.iter().peekable();
        for i in 0..self.n {
            if m.peek() == Some(&&i) {
                m.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Number of masked tokens: `⌈ratio · n⌉`, capped so one token stays visible.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    // the epsilon keeps products such as 0.85 · 20 from rounding up past 17
    let k = (ratio * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n - 1)
}

pub fn sample_mask<R: Rng + ?Sized>(
    n: usize,
    ratio: f64,
    branch: Branch,
    allow_low_mask: bool,
    rng: &mut R,
) -> Result<MaskSpec> {
    if n < 2 {
        return Err(Error::invalid(format!("masking needs at least 2 tokens, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    if ratio < MIN_MASK_RATIO && !allow_low_mask {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} is below {MIN_MASK_RATIO}; set allow_low_mask to use it"
        )));
    }
    let mut masked = sample(rng, n, mask_count(n, ratio)).into_vec();
    masked.sort_unstable();
    Ok(MaskSpec {
        branch,
        masked,
        n,
        ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimaeConfig {
    pub enabled: bool,
    pub mask_ratio: f64,
    pub allow_low_mask: bool,
    /// Encoder blocks per branch.
    pub depth: usize,
}

impl Default for TrimaeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mask_ratio: 0.85,
            allow_low_mask: false,
            depth: 1,
        }
    }
}

impl TrimaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid(format!("mask ratio must be in (0, 1), got {}", self.mask_ratio)));
        }
        if self.mask_ratio < MIN_MASK_RATIO && !self.allow_low_mask {
            return Err(Error::invalid(format!(
                "mask ratio {} is below {MIN_MASK_RATIO}; set allow_low_mask to use it",
                self.mask_ratio
            )));
        }
        if self.depth == 0 {
            return Err(Error::invalid("masked autoencoder encoder depth must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BranchNet {
    pos_enc: ParamId,
    encoder: TransformerStack,
    proj: Linear,
    mask_token: ParamId,
    pos_dec: ParamId,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross: MultiHeadAttention,
    block: TransformerBlock,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct TriMae {
    pub cfg: TrimaeConfig,
    pub d: usize,
    pub d_dec: usize,
    /// Positional table size per branch.
    pub positions: [usize; 3],
    nets: Vec<BranchNet>,
}

/// How masks are chosen in [`TriMae::forward`].
pub enum Masking<'a, R: Rng + ?Sized> {
    /// Random masks on every branch; the loss is computed.
    Train(&'a mut R),
    /// Given missing positions per branch are reconstructed; no loss.
    Missing(&'a [Vec<usize>; 3]),
}

pub struct TrimaeOutput {
    pub refined: [Var; 3],
    pub loss: Option<Var>,
    pub reconstructions: Option<[Var; 3]>,
    pub specs: Option<[MaskSpec; 3]>,
}

impl TriMae {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &TrimaeConfig,
        d: usize,
        heads: usize,
        positions: [usize; 3],
    ) -> Result<Self> {
        cfg.validate()?;
        let d_dec = d / 2;
        if d_dec == 0 || !d.is_multiple_of(2) || !d_dec.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "decoder width {d}/2 must be positive and divisible by {heads} heads"
            )));
        }
        let mut nets = Vec::with_capacity(3);
        for b in Branch::ALL {
            let base = format!("{name}.{}", b.tag());
            let n_pos = positions[b.index()];
            nets.push(BranchNet {
                pos_enc: store.add_normalish(format!("{base}.pos_enc"), n_pos, d, 0.02, rng),
                encoder: TransformerStack::new(store, rng, &format!("{base}.enc"), cfg.depth, d, heads, 2 * d)?,
                proj: Linear::new(store, rng, &format!("{base}.proj"), d, d_dec),
                mask_token: store.add_normalish(format!("{base}.mask_token"), 1, d_dec, 0.02, rng),
                pos_dec: store.add_normalish(format!("{base}.pos_dec"), n_pos, d_dec, 0.02, rng),
                ln_q: LayerNorm::new(store, &format!("{base}.ln_q"), d_dec),
                ln_kv: LayerNorm::new(store, &format!("{base}.ln_kv"), d_dec),
                cross: MultiHeadAttention::new(store, rng, &format!("{base}.cross"), d_dec, heads)?,
                block: TransformerBlock::new(store, rng, &format!("{base}.dec"), d_dec, heads, 2 * d_dec)?,
                head: Linear::new(store, rng, &format!("{base}.head"), d_dec, d),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            d,
            d_dec,
            positions,
            nets,
        })
    }

    fn check_tokens(&self, tape: &Tape<'_>, branch: Branch, tokens: Var, positions: &[usize]) -> Result<()> {
        let (n, d) = tape.shape(tokens);
        if d != self.d || n != positions.len() {
            return Err(Error::Shape {
                op: "trimae_tokens",
                left: (n, d),
                right: (positions.len(), self.d),
            });
        }
        let limit = self.positions[branch.index()];
        if positions.iter().any(|&p| p >= limit) {
            return Err(Error::invalid(format!(
                "{} token position outside the table of {limit}",
                branch.tag()
            )));
        }
        Ok(())
    }

    /// Runs the branch encoder on the visible tokens only.
    pub fn encode_visible(
        &self,
        tape: &mut Tape<'_>,
        branch: Branch,
        tokens: Var,
        positions: &[usize],
        spec: &MaskSpec,
    ) -> Result<Var> {
        self.check_tokens(tape, branch, tokens, positions)?;
        if spec.n != positions.len() {
            return Err(Error::invalid(format!(
                "mask built for {} tokens, sequence has {}",
                spec.n,
                positions.len()
            )));
        }
        let visible = spec.visible();
        if visible.is_empty() {
            return Err(Error::invalid(format!("every {} token is masked", branch.tag())));
        }
        let net = &self.nets[branch.index()];
        let x = tape.gather_rows(tokens, &visible);
        let vis_pos: Vec<usize> = visible.iter().map(|&i| positions[i]).collect();
        let pos = tape.param(net.pos_enc);
        let pos = tape.gather_rows(pos, &vis_pos);
        let x = tape.add(x, pos);
        net.encoder.forward(tape, x)
    }

    /// Encoder output mapped to the decoder width.
    pub fn project(&self, tape: &mut Tape<'_>, branch: Branch, latent: Var) -> Var {
        self.nets[branch.index()].proj.forward(tape, latent)
    }

    /// Full-length decoder input: projected latents at visible slots, the
    /// mask token elsewhere, plus decoder positions.
    fn scatter(&self, tape: &mut Tape<'_>, branch: Branch, projected: Var, positions: &[usize], spec: &MaskSpec) -> Var {
        let net = &self.nets[branch.index()];
        let n_vis = tape.shape(projected).0;
        let mask = tape.param(net.mask_token);
        let table = tape.concat_rows(&[projected, mask]);
        let mut idx = Vec::with_capacity(spec.n);
        let mut next_visible = 0;
        let mut m = spec.masked.iter().peekable();
        for i in 0..spec.n {
            if m.peek() == Some(&&i) {
                m.next();
                idx.push(n_vis);
            } else {
                idx.push(next_visible);
                next_visible += 1;
            }
        }
        let seq = tape.gather_rows(table, &idx);
        let pos = tape.param(net.pos_dec);
        let pos = tape.gather_rows(pos, positions);
        tape.add(seq, pos)
    }

    /// Decoder of one branch. `context` holds the other branches' projected
    /// latents; `None` skips cross-attention.
    pub fn decode_branch(
        &self,
        tape: &mut Tape<'_>,
        branch: Branch,
        projected: Var,
        positions: &[usize],
        spec: &MaskSpec,
        context: Option<Var>,
    ) -> Result<Var> {
        if tape.shape(projected).0 != spec.n - spec.masked.len() {
            return Err(Error::invalid("latent count does not match the visible token count"));
        }
        let net = &self.nets[branch.index()];
        let mut seq = self.scatter(tape, branch, projected, positions, spec);
        if let Some(ctx) = context {
            let q = net.ln_q.forward(tape, seq);
            let kv = net.ln_kv.forward(tape, ctx);
            let a = net.cross.forward(tape, q, kv)?;
            seq = tape.add(seq, a);
        }
        let seq = net.block.forward(tape, seq)?;
        Ok(net.head.forward(tape, seq))
    }

    /// Encodes all three branches and reconstructs each full sequence.
    pub fn reconstruct(
        &self,
        tape: &mut Tape<'_>,
        tokens: [Var; 3],
        positions: [&[usize]; 3],
        specs: &[MaskSpec; 3],
        which: [bool; 3],
    ) -> Result<[Option<Var>; 3]> {
        let mut projected = [None; 3];
        for b in Branch::ALL {
            let i = b.index();
            let latent = self.encode_visible(tape, b, tokens[i], positions[i], &specs[i])?;
            projected[i] = Some(self.project(tape, b, latent));
        }
        let projected = projected.map(|p| p.expect("every branch encoded"));
        let mut out = [None; 3];
        for b in Branch::ALL {
            let i = b.index();
            if !which[i] {
                continue;
            }
            let others: Vec<Var> = (0..3).filter(|&j| j != i).map(|j| projected[j]).collect();
            let ctx = tape.concat_rows(&others);
            out[i] = Some(self.decode_branch(tape, b, projected[i], positions[i], &specs[i], Some(ctx))?);
        }
        Ok(out)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        tokens: [Var; 3],
        positions: [&[usize]; 3],
        masking: Masking<'_, R>,
    ) -> Result<TrimaeOutput> {
        let passthrough = TrimaeOutput {
            refined: tokens,
            loss: None,
            reconstructions: None,
            specs: None,
        };
        if !self.cfg.enabled {
            return Ok(passthrough);
        }
        for b in Branch::ALL {
            self.check_tokens(tape, b, tokens[b.index()], positions[b.index()])?;
        }
        let (specs, train) = match masking {
            Masking::Train(rng) => {
                let mut specs = Vec::with_capacity(3);
                for b in Branch::ALL {
                    let n = positions[b.index()].len();
                    specs.push(sample_mask(n, self.cfg.mask_ratio, b, self.cfg.allow_low_mask, rng)?);
                }
                (specs, true)
            }
            Masking::Missing(missing) => {
                if missing.iter().all(Vec::is_empty) {
                    return Ok(passthrough);
                }
                let specs = Branch::ALL
                    .iter()
                    .map(|&b| MaskSpec::from_indices(b, positions[b.index()].len(), missing[b.index()].clone()))
                    .collect::<Result<Vec<_>>>()?;
                (specs, false)
            }
        };
        let specs: [MaskSpec; 3] = specs.try_into().expect("three branches");
        let which = [0, 1, 2].map(|i| train || !specs[i].is_empty());
        let recon = self.reconstruct(tape, tokens, positions, &specs, which)?;

        let mut refined = tokens;
        for i in 0..3 {
            if let Some(r) = recon[i] {
                // the decoder learns from the reconstruction loss alone; survival
                // gradients stop at the reconstructed rows during training
                let r = if train { tape.constant(tape.value(r).clone()) } else { r };
                refined[i] = replace_rows(tape, tokens[i], r, &specs[i].masked);
            }
        }
        let loss = if train {
            let recon = recon.map(|r| r.expect("all branches decoded in training"));
            let originals = tokens.map(|t| tape.value(t).clone());
            Some(trimae_loss(tape, recon, [&originals[0], &originals[1], &originals[2]], &specs)?)
        } else {
            None
        };
        let reconstructions = if train {
            Some(recon.map(|r| r.expect("decoded")))
        } else {
            None
        };
        Ok(TrimaeOutput {
            refined,
            loss,
            reconstructions,
            specs: Some(specs),
        })
    }
}

/// Rows of `base` at `rows` replaced by the same rows of `replacement`.
pub fn replace_rows(tape: &mut Tape<'_>, base: Var, replacement: Var, rows: &[usize]) -> Var {
    if rows.is_empty() {
        return base;
    }
    let n = tape.shape(base).0;
    let table = tape.concat_rows(&[base, replacement]);
    let mut idx: Vec<usize> = (0..n).collect();
    for &r in rows {
        idx[r] = n + r;
    }
    tape.gather_rows(table, &idx)
}

/// Masked-position MSE per branch, averaged over the three branches.
/// Targets are constants.
pub fn trimae_loss(tape: &mut Tape<'_>, reconstructed: [Var; 3], originals: [&Mat; 3], specs: &[MaskSpec; 3]) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for i in 0..3 {
        let spec = &specs[i];
        if spec.masked.is_empty() {
            return Err(Error::invalid(format!("{} branch has no masked tokens", spec.branch.tag())));
        }
        if tape.shape(reconstructed[i]) != originals[i].dim() {
            return Err(Error::Shape {
                op: "trimae_loss",
                left: tape.shape(reconstructed[i]),
                right: originals[i].dim(),
            });
        }
        let r = tape.gather_rows(reconstructed[i], &spec.masked);
        let target = originals[i].select(ndarray::Axis(0), &spec.masked);
        let count = target.len() as f64;
        let neg = tape.constant(-target);
        let diff = tape.add(r, neg);
        let sq = tape.mul(diff, diff);
        let s = tape.sum(sq);
        terms.push(tape.scale(s, 1.0 / count));
    }
    let total = tape.concat_cols(&terms);
    let total = tape.sum(total);
    Ok(tape.scale(total, 1.0 / 3.0))
}

/// Plain masked-position MSE between two matrices.
pub fn masked_mse(reconstructed: &Mat, original: &Mat, masked: &[usize]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for &r in masked {
        for (a, b) in reconstructed.row(r).iter().zip(original.row(r)) {
            acc += (a - b) * (a - b);
            count += 1;
        }
    }
    acc / count.max(1) as f64
}
