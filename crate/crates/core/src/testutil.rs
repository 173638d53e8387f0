//! Tiny shapes shared by unit tests.

use crate::cft::CftConfig;
use crate::dataio::{GridShape, Schema};
use crate::experiment::RunConfig;
use crate::hae::{HaeConfig, ThresholdRule, WaveletConfig};
use crate::model::ModelConfig;
use crate::trimae::TrimaeConfig;

pub fn micro_schema() -> Schema {
    Schema {
        d_x: 4,
        rna_dim: 8,
        cnv_mut_dim: 8,
        small: GridShape::new(2, 2),
        medium: GridShape::new(2, 2),
        large: GridShape::new(1, 1),
    }
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        cft: CftConfig {
            d_model: 8,
            heads: 2,
            ffn_dim: 6,
            fusion_channels: 3,
            gnn_layers: 1,
            ..Default::default()
        },
        hae: HaeConfig {
            chunk: 4,
            beta: 0.5,
            wavelet: Some(WaveletConfig {
                order: 2,
                levels: 1,
                threshold: ThresholdRule::Fixed(0.05),
            }),
            ..Default::default()
        },
        trimae: TrimaeConfig {
            mask_ratio: 0.5,
            allow_low_mask: true,
            depth: 1,
            ..Default::default()
        },
        dropout: 0.2,
    }
}

pub fn micro_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        model: micro_config(),
        seed,
        ..Default::default()
    };
    cfg.train.batch_size = 4;
    cfg.train.epochs = 2;
    cfg.train.folds = 3;
    cfg
}
