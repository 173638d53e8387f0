use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_check, gradcheck, loss_and_grads, loss_only, random_readout};

fn row(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((1, n), |_| scale * rng.random_range(-1.0..1.0))
}

fn encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, n: usize, d: usize, cfg: &HaeConfig) -> HaeEncoder {
    HaeEncoder::new(store, rng, "hae", n, d, 2, cfg).unwrap()
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.value.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
}

#[test]
fn default_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let enc = HaeEncoder::new(&mut store, &mut rng, "hae", 256, 64, 4, &HaeConfig::default()).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(row(&mut rng, 256, 1.0));
    let cta = enc.cta_path(&mut tape, x).unwrap();
    assert_eq!(tape.shape(cta), (16, 64));
    let out = enc.forward(&mut tape, x).unwrap();
    assert_eq!(tape.shape(out), (16, 64));
    assert_eq!(squeeze_width(64, 0.25), 16);
    assert_eq!(enc.tokens(), 16);
}

#[test]
fn ragged_tail_is_zero_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Mat::from_shape_fn((1, 20), |(_, j)| j as f64 + 1.0));
    let t = chunk_tokens(&mut tape, x, 16);
    assert_eq!(tape.shape(t), (2, 16));
    assert_eq!(tape.value(t)[[1, 3]], 20.0);
    assert!(tape.value(t).row(1).iter().skip(4).all(|&v| v == 0.0));

    let mut store = ParamStore::new();
    let cfg = HaeConfig {
        wavelet: None,
        ..Default::default()
    };
    let enc = encoder(&mut store, &mut rng, 20, 8, &cfg);
    let mut tape = Tape::new(&store);
    let x = tape.constant(row(&mut rng, 20, 1.0));
    let y = enc.forward(&mut tape, x).unwrap();
    assert_eq!(tape.shape(y), (2, 8));
}

#[test]
fn zero_threshold_matches_pipeline_without_denoising() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let with = HaeConfig {
        wavelet: Some(WaveletConfig {
            threshold: ThresholdRule::Fixed(0.0),
            ..Default::default()
        }),
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let enc = encoder(&mut store, &mut rng, 64, 8, &with);
    let without = HaeEncoder {
        cfg: HaeConfig {
            wavelet: None,
            ..with.clone()
        },
        ..enc.clone()
    };
    let x0 = row(&mut rng, 64, 2.0);
    let mut tape = Tape::new(&store);
    let x = tape.constant(x0);
    let a = enc.cta_path(&mut tape, x).unwrap();
    let b = without.cta_path(&mut tape, x).unwrap();
    let err = (tape.value(a) - tape.value(b)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn alpha_zero_silences_channel_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let enc = encoder(&mut store, &mut rng, 32, 8, &HaeConfig::default());
    store.value_mut(enc.alpha).fill(0.0);
    let mut tape = Tape::new(&store);
    let x = tape.constant(row(&mut rng, 32, 1.0));
    let c = enc.cna_path(&mut tape, x).unwrap();
    assert!(tape.value(c).iter().all(|&v| v == 0.0));
}

#[test]
fn plain_variant_is_attention_over_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cfg = HaeConfig {
        variant: HaeVariant::Plain,
        ..Default::default()
    };
    let enc = encoder(&mut store, &mut rng, 32, 8, &cfg);
    perturb(&mut store, &mut rng);
    let mut tape = Tape::new(&store);
    let x = tape.constant(row(&mut rng, 32, 1.0));
    let y = enc.forward(&mut tape, x).unwrap();
    let e = enc.embed_tokens(&mut tape, x).unwrap();
    let want = enc.out_attn.forward(&mut tape, e, e).unwrap();
    assert_eq!(tape.value(y), tape.value(want));
}

#[test]
fn variants_differ_when_branches_are_live() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let enc = encoder(&mut store, &mut rng, 32, 8, &HaeConfig::default());
    perturb(&mut store, &mut rng);
    let x0 = row(&mut rng, 32, 1.0);
    let outputs: Vec<Mat> = HaeVariant::ALL
        .iter()
        .map(|&variant| {
            let e = HaeEncoder {
                cfg: HaeConfig {
                    variant,
                    ..enc.cfg.clone()
                },
                ..enc.clone()
            };
            let mut tape = Tape::new(&store);
            let x = tape.constant(x0.clone());
            let y = e.forward(&mut tape, x).unwrap();
            tape.value(y).clone()
        })
        .collect();
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            assert_ne!(outputs[i], outputs[j]);
        }
    }
    assert_eq!("no-cna".parse::<HaeVariant>().unwrap(), HaeVariant::NoCna);
    assert!("half".parse::<HaeVariant>().is_err());
}

#[test]
fn rejects_bad_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    for beta in [0.0, 1.5, f64::NAN] {
        let cfg = HaeConfig {
            beta,
            ..Default::default()
        };
        assert!(HaeEncoder::new(&mut store, &mut rng, "a", 32, 8, 2, &cfg).is_err());
    }
    let tiny = HaeConfig {
        beta: 0.1,
        ..Default::default()
    };
    assert!(HaeEncoder::new(&mut store, &mut rng, "b", 32, 8, 2, &tiny).is_err());
    assert!(HaeEncoder::new(&mut store, &mut rng, "c", 2, 8, 2, &HaeConfig::default()).is_err());
    // 18 is not a multiple of 2^2
    assert!(HaeEncoder::new(&mut store, &mut rng, "d", 18, 8, 2, &HaeConfig::default()).is_err());
    let enc = encoder(&mut store, &mut rng, 32, 8, &HaeConfig::default());
    let mut tape = Tape::new(&store);
    let x = tape.constant(Mat::zeros((1, 31)));
    assert!(enc.forward(&mut tape, x).is_err());
}

fn gradient_case(variant: HaeVariant, path: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let cfg = HaeConfig {
        chunk: 4,
        beta: 0.5,
        variant,
        wavelet: Some(WaveletConfig {
            threshold: ThresholdRule::Fixed(0.05),
            ..Default::default()
        }),
    };
    let enc = encoder(&mut store, &mut rng, 16, 4, &cfg);
    perturb(&mut store, &mut rng);
    let x = store.add("x", row(&mut rng, 16, 1.0));
    let build = |t: &mut Tape<'_>| {
        let xv = t.param(x);
        let y = match path {
            "cta" => enc.cta_path(t, xv).unwrap(),
            "cna" => enc.cna_path(t, xv).unwrap(),
            _ => enc.forward(t, xv).unwrap(),
        };
        random_readout(t, y, 6)
    };
    let (_, grads) = loss_and_grads(&store, build);
    let r = finite_difference_check(&mut store, &grads, |s| loss_only(s, build), gradcheck::DEFAULT_STEP, None, 0).unwrap();
    assert!(r.passes(gradcheck::DEFAULT_TOLERANCE), "{path}: {r:?}");
}

#[test]
fn cta_gradients() {
    gradient_case(HaeVariant::Full, "cta");
}

#[test]
fn cna_gradients() {
    gradient_case(HaeVariant::Full, "cna");
}

#[test]
fn full_encoder_gradients() {
    gradient_case(HaeVariant::Full, "full");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn gate_in_open_unit_interval_and_no_nan(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, &mut rng, 32, 8, &HaeConfig::default());
        let mut tape = Tape::new(&store);
        let x = tape.constant(row(&mut rng, 32, scale));
        let e = enc.embed_tokens(&mut tape, x).unwrap();
        let g = enc.cna_gate(&mut tape, e);
        prop_assert!(tape.value(g).iter().all(|&v| v > 0.0 && v < 1.0));
        let y = enc.forward(&mut tape, x).unwrap();
        prop_assert!(tape.value(y).iter().all(|v| v.is_finite()));
    }
}
