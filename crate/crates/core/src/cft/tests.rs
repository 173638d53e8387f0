use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{generate_cohort, GridShape, SynthConfig};
use crate::numerics::{
    finite_difference_check, gradcheck, loss_and_grads, loss_only, random_readout, Purpose, RngStream,
};
use crate::wsigraph::{build_grid_graph, build_multiscale, full_grid_coords};

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn micro_schema() -> Schema {
    Schema {
        d_x: 4,
        rna_dim: 8,
        cnv_mut_dim: 8,
        small: GridShape::new(2, 2),
        medium: GridShape::new(2, 2),
        large: GridShape::new(1, 1),
    }
}

fn micro_cfg() -> CftConfig {
    CftConfig {
        d_model: 4,
        heads: 2,
        ffn_dim: 6,
        fusion_channels: 3,
        ..Default::default()
    }
}

#[test]
fn gnn_identity_configuration_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let layer = GnnLayer::new(
        &mut store,
        &mut rng,
        "g",
        3,
        3,
        3,
        Message::Identity,
        Aggregation::Mean,
        UpdateRule::PassThrough,
    )
    .unwrap();
    let coords = full_grid_coords(2, 3);
    let x = rand_mat(&mut rng, 6, 3);
    let g = build_grid_graph(x.clone(), coords, Scale::Small).unwrap();
    let agg = aggregator(&g, Aggregation::Mean);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, &agg, xv, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn gnn_two_nodes_swap_under_aggregate_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let layer = GnnLayer::new(
        &mut store,
        &mut rng,
        "g",
        2,
        2,
        2,
        Message::Identity,
        Aggregation::Mean,
        UpdateRule::AggregateOnly,
    )
    .unwrap();
    let x = Mat::eye(2);
    let g = build_grid_graph(x.clone(), vec![(0, 0), (0, 1)], Scale::Small).unwrap();
    let agg = aggregator(&g, Aggregation::Mean);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y = layer.forward(&mut tape, &agg, xv, xv).unwrap();
    assert_eq!(tape.value(y).row(0).to_vec(), vec![0.0, 1.0]);
    assert_eq!(tape.value(y).row(1).to_vec(), vec![1.0, 0.0]);
}

#[test]
fn gnn_two_layers_reach_wide_hidden() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let g = build_grid_graph(rand_mat(&mut rng, 9, 64), full_grid_coords(3, 3), Scale::Large).unwrap();
    let agg = aggregator(&g, Aggregation::Mean);
    let l0 = GnnLayer::new(&mut store, &mut rng, "a", 64, 64, 500, Message::Linear, Aggregation::Mean, UpdateRule::Learned).unwrap();
    let l1 = GnnLayer::new(&mut store, &mut rng, "b", 500, 64, 500, Message::Linear, Aggregation::Mean, UpdateRule::Learned).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(g.features.clone());
    let h = l0.forward(&mut tape, &agg, x, x).unwrap();
    let h = l1.forward(&mut tape, &agg, h, x).unwrap();
    assert_eq!(tape.shape(h), (9, 500));
}

#[test]
fn gnn_zero_input_zero_output_and_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let layer = GnnLayer::new(&mut store, &mut rng, "g", 3, 3, 5, Message::Linear, Aggregation::Mean, UpdateRule::Learned).unwrap();
    let g = build_grid_graph(Mat::zeros((4, 3)), full_grid_coords(2, 2), Scale::Small).unwrap();
    let agg = aggregator(&g, Aggregation::Mean);
    let mut tape = Tape::new(&store);
    let x = tape.constant(Mat::zeros((4, 3)));
    let y = layer.forward(&mut tape, &agg, x, x).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
    let bad = tape.constant(Mat::zeros((3, 3)));
    assert!(layer.forward(&mut tape, &agg, bad, bad).is_err());
    assert!(GnnLayer::new(&mut store, &mut rng, "h", 3, 3, 5, Message::Identity, Aggregation::Mean, UpdateRule::PassThrough).is_err());
}

#[test]
fn gnn_layer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let mut coords = full_grid_coords(3, 3);
    coords.remove(2);
    let g = build_grid_graph(Mat::zeros((8, 3)), coords, Scale::Small).unwrap();
    let agg = aggregator(&g, Aggregation::Mean);
    let l0 = GnnLayer::new(&mut store, &mut rng, "a", 3, 3, 4, Message::Linear, Aggregation::Mean, UpdateRule::Learned).unwrap();
    let l1 = GnnLayer::new(&mut store, &mut rng, "b", 4, 3, 4, Message::Linear, Aggregation::Mean, UpdateRule::Learned).unwrap();
    let x = store.add("x", rand_mat(&mut rng, 8, 3));
    let build = |t: &mut Tape<'_>| {
        let xv = t.param(x);
        let h = l0.forward(t, &agg, xv, xv).unwrap();
        let h = l1.forward(t, &agg, h, xv).unwrap();
        random_readout(t, h, 3)
    };
    let (_, grads) = loss_and_grads(&store, build);
    let r = finite_difference_check(&mut store, &grads, |s| loss_only(s, build), gradcheck::DEFAULT_STEP, None, 0).unwrap();
    assert!(r.passes(gradcheck::DEFAULT_TOLERANCE), "{r:?}");
}

#[test]
fn receptive_field_covers_neighbourhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let schema = Schema {
        d_x: 4,
        ..Default::default()
    };
    let cfg = CftConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
        fusion_channels: 4,
        views: "s".parse().unwrap(),
        ..Default::default()
    };
    let enc = CftEncoder::new(&mut store, &mut rng, "cft", &cfg, &schema).unwrap();
    let coords = full_grid_coords(8, 8);
    let x = rand_mat(&mut rng, 64, 4);
    let target = 3 * 8 + 3;
    let mut x2 = x.clone();
    x2[[target, 0]] += 0.5;
    let run = |feat: Mat| {
        let g = build_grid_graph(feat, coords.clone(), Scale::Small).unwrap();
        let p = PreparedScale::new(&g, &schema, Aggregation::Mean);
        let mut tape = Tape::new(&store);
        let h = enc.embed_scale(&mut tape, &p).unwrap();
        tape.value(h).clone()
    };
    let (a, b) = (run(x), run(x2));
    for (i, &(r, c)) in coords.iter().enumerate() {
        if r.abs_diff(3) <= 1 && c.abs_diff(3) <= 1 {
            assert_ne!(a.row(i), b.row(i), "node ({r},{c}) unchanged");
        }
        // two hops is the reach of two layers
        if r.abs_diff(3) > 2 || c.abs_diff(3) > 2 {
            assert_eq!(a.row(i), b.row(i));
        }
    }
}

#[test]
fn transformer_stack_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (n, d) in [(4, 8), (9, 16)] {
        let mut store = ParamStore::new();
        let stack = TransformerStack::new(&mut store, &mut rng, "t", 1, d, 4, 2 * d).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(rand_mat(&mut rng, n, d));
        let y = stack.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), (n, d));
    }
    let mut store = ParamStore::new();
    let stack = TransformerStack::new(&mut store, &mut rng, "t", 1, 8, 2, 16).unwrap();
    for id in stack.blocks[0].output_projections() {
        store.value_mut(id).fill(0.0);
    }
    let token = rand_mat(&mut rng, 1, 8);
    let mut tape = Tape::new(&store);
    let x = tape.constant(token.clone());
    let y = stack.forward(&mut tape, x).unwrap();
    assert_eq!(tape.value(y), &token);
}

#[test]
fn default_patient_shapes() {
    let schema = Schema::default();
    let cohort = generate_cohort(2, &schema, &SynthConfig::default(), RngStream::new(3, Purpose::Datagen)).unwrap();
    let graphs = build_multiscale(&cohort.patients[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let enc = CftEncoder::new(&mut store, &mut rng, "cft", &CftConfig::default(), &schema).unwrap();
    let mut tape = Tape::new(&store);
    let out = enc.forward(&mut tape, &enc.prepare(&graphs)).unwrap();
    assert_eq!(tape.shape(out.tokens), (116, 64));
    assert_eq!(tape.shape(out.pooled), (1, 64));
    assert_eq!(out.positions, (0..116).collect::<Vec<_>>());
    assert!(tape.value(out.tokens).iter().all(|v| v.is_finite()));
}

#[test]
fn per_patient_independence() {
    let schema = micro_schema();
    let cohort = generate_cohort(3, &schema, &SynthConfig { hole_rate: 0.3, ..Default::default() }, RngStream::new(4, Purpose::Datagen)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let enc = CftEncoder::new(&mut store, &mut rng, "cft", &micro_cfg(), &schema).unwrap();
    let run = |order: &[usize]| -> Vec<Mat> {
        let mut out = vec![Mat::zeros((0, 0)); 3];
        for &i in order {
            let graphs = build_multiscale(&cohort.patients[i]).unwrap();
            let mut tape = Tape::new(&store);
            let o = enc.forward(&mut tape, &enc.prepare(&graphs)).unwrap();
            out[i] = tape.value(o.tokens).clone();
        }
        out
    };
    assert_eq!(run(&[0, 1, 2]), run(&[2, 0, 1]));
}

#[test]
fn full_encoder_gradients_on_micro_patient() {
    let schema = micro_schema();
    let cohort = generate_cohort(2, &schema, &SynthConfig::default(), RngStream::new(5, Purpose::Datagen)).unwrap();
    let graphs = build_multiscale(&cohort.patients[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let enc = CftEncoder::new(&mut store, &mut rng, "cft", &micro_cfg(), &schema).unwrap();
    // move every parameter off its initial symmetric values
    for p in store.iter_mut() {
        p.value.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
    let inputs = enc.prepare(&graphs);
    let build = |t: &mut Tape<'_>| {
        let out = enc.forward(t, &inputs).unwrap();
        let a = random_readout(t, out.tokens, 1);
        let b = random_readout(t, out.pooled, 2);
        t.add(a, b)
    };
    let (_, grads) = loss_and_grads(&store, build);
    let r = finite_difference_check(&mut store, &grads, |s| loss_only(s, build), gradcheck::DEFAULT_STEP, None, 0).unwrap();
    assert!(r.passes(gradcheck::DEFAULT_TOLERANCE), "{r:?}");
}

#[test]
fn every_view_combination_runs() {
    let schema = micro_schema();
    let cohort = generate_cohort(2, &schema, &SynthConfig::default(), RngStream::new(6, Purpose::Datagen)).unwrap();
    let graphs = build_multiscale(&cohort.patients[1]).unwrap();
    let combos = Views::all_combinations();
    assert_eq!(combos.len(), 7);
    for views in combos {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = CftConfig { views, ..micro_cfg() };
        let enc = CftEncoder::new(&mut store, &mut rng, "cft", &cfg, &schema).unwrap();
        let mut tape = Tape::new(&store);
        let out = enc.forward(&mut tape, &enc.prepare(&graphs)).unwrap();
        let n: usize = views.scales().iter().map(|&s| cohort.patients[1].grid(s).len()).sum();
        assert_eq!(tape.shape(out.tokens), (n, 4), "{views}");
        assert_eq!(views.to_string().parse::<Views>().unwrap(), views);
    }
}

#[test]
fn views_parsing() {
    assert_eq!("s,m,l".parse::<Views>().unwrap(), Views::ALL);
    assert_eq!("l, s".parse::<Views>().unwrap().to_string(), "s,l");
    assert!("".parse::<Views>().is_err());
    assert!("x".parse::<Views>().is_err());
    assert!("sm".parse::<Views>().is_err());
    let json = serde_json::to_string(&Views::ALL).unwrap();
    assert_eq!(json, "\"s,m,l\"");
}

#[test]
fn config_validation() {
    assert!(CftConfig { gnn_layers: 0, ..Default::default() }.validate().is_err());
    assert!(CftConfig { heads: 3, ..Default::default() }.validate().is_err());
    CftConfig::default().validate().unwrap();
}
