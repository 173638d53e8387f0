use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Linear, Mat, ParamStore, Tape, Var};
use crate::wsigraph::ScaleGraph;

/// Message function `p` applied to each neighbour embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Message {
    Linear,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Sum,
}

/// Update function `u(h_m, F_m, x_m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `GELU(W [h ‖ F ‖ x] + b)`
    Learned,
    /// Returns `h_m` unchanged.
    PassThrough,
    /// Returns the neighbour aggregate `F_m`.
    AggregateOnly,
}

#[derive(Clone, Debug)]
pub struct GnnLayer {
    pub message: Option<Linear>,
    pub update: Option<Linear>,
    pub rule: UpdateRule,
    pub aggregation: Aggregation,
    pub d_in: usize,
    pub d_x: usize,
    pub d_out: usize,
}

impl GnnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_x: usize,
        d_out: usize,
        message: Message,
        aggregation: Aggregation,
        rule: UpdateRule,
    ) -> Result<Self> {
        if rule != UpdateRule::Learned && d_in != d_out {
            return Err(Error::invalid(format!(
                "non-learned GNN update needs equal widths, got {d_in} -> {d_out}"
            )));
        }
        let message = match message {
            Message::Linear => Some(Linear::without_bias(store, rng, &format!("{name}.msg"), d_in, d_in)),
            Message::Identity => None,
        };
        let update = match rule {
            UpdateRule::Learned => Some(Linear::new(
                store,
                rng,
                &format!("{name}.upd"),
                2 * d_in + d_x,
                d_out,
            )),
            _ => None,
        };
        Ok(Self {
            message,
            update,
            rule,
            aggregation,
            d_in,
            d_x,
            d_out,
        })
    }

    /// One round of neighbour aggregation and node update. `aggregator` is the
    /// graph's propagation matrix for the configured aggregation.
    pub fn forward(&self, tape: &mut Tape<'_>, aggregator: &Arc<Mat>, h: Var, x: Var) -> Result<Var> {
        let (n, d) = tape.shape(h);
        let (nx, dx) = tape.shape(x);
        if n != aggregator.nrows() || d != self.d_in {
            return Err(Error::Shape {
                op: "gnn_layer",
                left: (n, d),
                right: (aggregator.nrows(), self.d_in),
            });
        }
        if nx != n || dx != self.d_x {
            return Err(Error::Shape {
                op: "gnn_layer",
                left: (nx, dx),
                right: (n, self.d_x),
            });
        }
        let msg = match &self.message {
            Some(lin) => lin.forward(tape, h),
            None => h,
        };
        let agg = tape.left_mul(aggregator.clone(), msg);
        Ok(match self.rule {
            UpdateRule::PassThrough => h,
            UpdateRule::AggregateOnly => agg,
            UpdateRule::Learned => {
                let cat = tape.concat_cols(&[h, agg, x]);
                let lin = self.update.as_ref().expect("learned update has weights");
                let y = lin.forward(tape, cat);
                tape.gelu(y)
            }
        })
    }
}

/// Propagation matrix of a graph: row-normalised for mean, raw adjacency
/// for sum. Isolated nodes aggregate to zero either way.
pub fn aggregator(graph: &ScaleGraph, aggregation: Aggregation) -> Arc<Mat> {
    Arc::new(match aggregation {
        Aggregation::Mean => graph.mean_aggregator(),
        Aggregation::Sum => graph.adjacency.clone(),
    })
}
