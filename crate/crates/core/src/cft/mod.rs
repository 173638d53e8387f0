//! Pathology encoder: per-scale graph layers, transformer stacks and
//! cross-fusion between fields of view.
//!
//! Per active scale: `L` GNN layers, a learned positional embedding, then
//! transformer stack 1. Adjacent active scales are fused pairwise in
//! large→medium→small order, each scale runs transformer stack 2, and all
//! active scales are fused jointly. Output tokens are concatenated small,
//! medium, large.

mod fusion;
mod gnn;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Scale, Schema};
use crate::error::{Error, Result};
use crate::numerics::{Mat, ParamId, ParamStore, Tape, TransformerStack, Var};
use crate::wsigraph::ScaleGraph;

pub use fusion::{adaptive_pool_matrix, nearest_upsample_matrix, CrossFusion, TokenConv};
pub use gnn::{aggregator, Aggregation, GnnLayer, Message, UpdateRule};

/// Subset of fields of view in use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Views {
    pub small: bool,
    pub medium: bool,
    pub large: bool,
}

impl Views {
    pub const ALL: Views = Views {
        small: true,
        medium: true,
        large: true,
    };

    pub fn contains(&self, s: Scale) -> bool {
        match s {
            Scale::Small => self.small,
            Scale::Medium => self.medium,
            Scale::Large => self.large,
        }
    }

    /// Active scales in small, medium, large order.
    pub fn scales(&self) -> Vec<Scale> {
        Scale::ALL.into_iter().filter(|&s| self.contains(s)).collect()
    }

    pub fn count(&self) -> usize {
        self.scales().len()
    }

    /// The seven non-empty combinations.
    pub fn all_combinations() -> Vec<Views> {
        (1u8..8)
            .map(|bits| Views {
                small: bits & 1 != 0,
                medium: bits & 2 != 0,
                large: bits & 4 != 0,
            })
            .collect()
    }
}

impl fmt::Display for Views {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letters: Vec<String> = self.scales().iter().map(|s| s.letter().to_string()).collect();
        f.write_str(&letters.join(","))
    }
}

impl FromStr for Views {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut v = Views {
            small: false,
            medium: false,
            large: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let mut chars = part.chars();
            let scale = match (chars.next(), chars.next()) {
                (Some(c), None) => Scale::from_letter(c),
                _ => None,
            }
            .ok_or_else(|| Error::invalid(format!("unknown view `{part}`, expected s, m or l")))?;
            match scale {
                Scale::Small => v.small = true,
                Scale::Medium => v.medium = true,
                Scale::Large => v.large = true,
            }
        }
        if v.count() == 0 {
            return Err(Error::invalid("at least one view is required"));
        }
        Ok(v)
    }
}

impl Serialize for Views {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Views {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CftConfig {
    pub d_model: usize,
    pub gnn_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Transformer blocks per stack.
    pub depth: usize,
    pub fusion_channels: usize,
    pub message: Message,
    pub aggregation: Aggregation,
    pub update: UpdateRule,
    pub views: Views,
}

impl Default for CftConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            gnn_layers: 2,
            heads: 4,
            ffn_dim: 256,
            depth: 1,
            fusion_channels: 32,
            message: Message::Linear,
            aggregation: Aggregation::Mean,
            update: UpdateRule::Learned,
            views: Views::ALL,
        }
    }
}

impl CftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gnn_layers == 0 {
            return Err(Error::invalid("at least one GNN layer is required"));
        }
        if self.d_model == 0 || self.ffn_dim == 0 || self.fusion_channels == 0 || self.depth == 0 {
            return Err(Error::invalid("pathology encoder dimensions must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model dim {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-patient graph data for one scale, ready for the encoder.
#[derive(Clone, Debug)]
pub struct PreparedScale {
    pub scale: Scale,
    pub features: Mat,
    pub aggregator: Arc<Mat>,
    /// Row-major grid cell index of every node.
    pub cells: Vec<usize>,
}

impl PreparedScale {
    pub fn new(graph: &ScaleGraph, schema: &Schema, aggregation: Aggregation) -> Self {
        let cols = schema.grid(graph.scale).cols;
        Self {
            scale: graph.scale,
            features: graph.features.clone(),
            aggregator: aggregator(graph, aggregation),
            cells: graph.coords.iter().map(|&(r, c)| r * cols + c).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct ScaleEncoder {
    scale: Scale,
    gnn: Vec<GnnLayer>,
    pos: ParamId,
    stack1: TransformerStack,
    stack2: TransformerStack,
}

#[derive(Clone, Debug)]
pub struct CftEncoder {
    pub cfg: CftConfig,
    schema: Schema,
    scales: Vec<ScaleEncoder>,
    /// Scheme-1 fusions between adjacent active scales, large to small.
    pairs: Vec<(Scale, Scale, CrossFusion)>,
    joint: Option<CrossFusion>,
}

pub struct CftOutput {
    /// Tokens of every active scale, small first.
    pub tokens: Var,
    /// Global pathology position of every token row.
    pub positions: Vec<usize>,
    pub pooled: Var,
}

impl CftEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &CftConfig, schema: &Schema) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut scales = Vec::new();
        for scale in cfg.views.scales() {
            let base = format!("{name}.{}", scale.name());
            let mut gnn = Vec::with_capacity(cfg.gnn_layers);
            for l in 0..cfg.gnn_layers {
                let d_in = if l == 0 { schema.d_x } else { d };
                gnn.push(GnnLayer::new(
                    store,
                    rng,
                    &format!("{base}.gnn{l}"),
                    d_in,
                    schema.d_x,
                    d,
                    cfg.message,
                    cfg.aggregation,
                    cfg.update,
                )?);
            }
            let pos = store.add_normalish(format!("{base}.pos"), schema.grid(scale).cells(), d, 0.02, rng);
            let stack1 = TransformerStack::new(store, rng, &format!("{base}.enc1"), cfg.depth, d, cfg.heads, cfg.ffn_dim)?;
            let stack2 = TransformerStack::new(store, rng, &format!("{base}.enc2"), cfg.depth, d, cfg.heads, cfg.ffn_dim)?;
            scales.push(ScaleEncoder {
                scale,
                gnn,
                pos,
                stack1,
                stack2,
            });
        }
        let mut order = cfg.views.scales();
        order.reverse();
        let mut pairs = Vec::new();
        for w in order.windows(2) {
            let f = CrossFusion::new(
                store,
                rng,
                &format!("{name}.fuse_{}{}", w[0].letter(), w[1].letter()),
                2,
                d,
                cfg.fusion_channels,
            )?;
            pairs.push((w[0], w[1], f));
        }
        let joint = if order.len() >= 2 {
            Some(CrossFusion::new(store, rng, &format!("{name}.fuse_all"), order.len(), d, cfg.fusion_channels)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            schema: schema.clone(),
            scales,
            pairs,
            joint,
        })
    }

    /// Prepares the active scales of a patient's graphs.
    pub fn prepare(&self, graphs: &[ScaleGraph; 3]) -> Vec<PreparedScale> {
        graphs
            .iter()
            .filter(|g| self.cfg.views.contains(g.scale))
            .map(|g| PreparedScale::new(g, &self.schema, self.cfg.aggregation))
            .collect()
    }

    /// Runs the GNN layers of one scale and adds positional embeddings.
    pub fn embed_scale(&self, tape: &mut Tape<'_>, input: &PreparedScale) -> Result<Var> {
        let enc = self.encoder(input.scale)?;
        let x = tape.constant(input.features.clone());
        let mut h = x;
        for layer in &enc.gnn {
            h = layer.forward(tape, &input.aggregator, h, x)?;
        }
        let pos = tape.param(enc.pos);
        let pos = tape.gather_rows(pos, &input.cells);
        Ok(tape.add(h, pos))
    }

    fn encoder(&self, scale: Scale) -> Result<&ScaleEncoder> {
        self.scales
            .iter()
            .find(|e| e.scale == scale)
            .ok_or_else(|| Error::invalid(format!("{} view is not enabled", scale.name())))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, inputs: &[PreparedScale]) -> Result<CftOutput> {
        let active = self.cfg.views.scales();
        if inputs.len() != active.len() || inputs.iter().zip(&active).any(|(p, s)| p.scale != *s) {
            return Err(Error::invalid(format!(
                "pathology encoder expects views {} in small-to-large order",
                self.cfg.views
            )));
        }
        let slot = |s: Scale| active.iter().position(|&a| a == s).expect("active scale");

        let mut tok: Vec<Var> = Vec::with_capacity(inputs.len());
        for (input, enc) in inputs.iter().zip(&self.scales) {
            let h = self.embed_scale(tape, input)?;
            tok.push(enc.stack1.forward(tape, h)?);
        }
        for (a, b, f) in &self.pairs {
            let (ia, ib) = (slot(*a), slot(*b));
            let out = f.forward(tape, &[tok[ia], tok[ib]])?;
            tok[ia] = out[0];
            tok[ib] = out[1];
        }
        for (t, enc) in tok.iter_mut().zip(&self.scales) {
            *t = enc.stack2.forward(tape, *t)?;
        }
        if let Some(f) = &self.joint {
            // large, medium, small
            let rev: Vec<Var> = tok.iter().rev().copied().collect();
            let out = f.forward(tape, &rev)?;
            for (i, o) in out.into_iter().rev().enumerate() {
                tok[i] = o;
            }
        }
        let tokens = tape.concat_rows(&tok);
        let positions = inputs
            .iter()
            .flat_map(|p| {
                let off = self.schema.position_offset(p.scale);
                p.cells.iter().map(move |&c| off + c)
            })
            .collect();
        let pooled = tape.mean_rows(tokens);
        Ok(CftOutput {
            tokens,
            positions,
            pooled,
        })
    }
}

#[cfg(test)]
mod tests;
