//! Cross-fusion of token sequences from several fields of view.
//!
//! Each input `n_i × d` is pooled to the smallest token count, the pooled
//! maps are spliced along the token axis and mixed by two kernel-3
//! convolutions over tokens (`d → c → d`, GELU between). The mixed map is
//! split, upsampled back to each input length, gated by a sigmoid of a fully
//! connected layer over its channel-wise global average, and combined with
//! the input as `w_f[i] · refined_i + w_r[i] · input_i`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Linear, Mat, ParamId, ParamStore, Tape, Var};

/// Adaptive average pooling along rows: `n_out × n_in`, window `j` covers
/// rows `⌊j·n_in/n_out⌋ .. ⌈(j+1)·n_in/n_out⌉`.
pub fn adaptive_pool_matrix(n_in: usize, n_out: usize) -> Mat {
    assert!(n_out >= 1 && n_out <= n_in, "pool {n_in} -> {n_out}");
    let mut p = Mat::zeros((n_out, n_in));
    for j in 0..n_out {
        let start = j * n_in / n_out;
        let end = ((j + 1) * n_in).div_ceil(n_out);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            p[[j, i]] = w;
        }
    }
    p
}

/// Nearest-neighbour upsampling along rows: `n_out × n_in`, row `r` copies
/// input row `⌊r·n_in/n_out⌋`.
pub fn nearest_upsample_matrix(n_in: usize, n_out: usize) -> Mat {
    assert!(n_in >= 1 && n_in <= n_out, "upsample {n_in} -> {n_out}");
    let mut u = Mat::zeros((n_out, n_in));
    for r in 0..n_out {
        u[[r, r * n_in / n_out]] = 1.0;
    }
    u
}

/// Kernel-3, zero-padded convolution over the token axis with channel mixing.
#[derive(Clone, Debug)]
pub struct TokenConv {
    /// `3·d_in × d_out`, taps ordered previous, current, next.
    pub lin: Linear,
}

impl TokenConv {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            lin: Linear::new(store, rng, name, 3 * d_in, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let prev = tape.shift_rows(x, 1);
        let next = tape.shift_rows(x, -1);
        let taps = tape.concat_cols(&[prev, x, next]);
        self.lin.forward(tape, taps)
    }
}

#[derive(Clone, Debug)]
pub struct CrossFusion {
    pub inputs: usize,
    pub d: usize,
    pub conv1: TokenConv,
    pub conv2: TokenConv,
    pub gate: Linear,
    /// `1 × inputs`, weight of the refined term.
    pub w_fused: ParamId,
    /// `1 × inputs`, weight of the residual term.
    pub w_residual: ParamId,
}

impl CrossFusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        inputs: usize,
        d: usize,
        channels: usize,
    ) -> Result<Self> {
        if inputs < 2 {
            return Err(Error::invalid(format!("cross-fusion needs at least 2 inputs, got {inputs}")));
        }
        if d == 0 || channels == 0 {
            return Err(Error::invalid("cross-fusion widths must be positive"));
        }
        Ok(Self {
            inputs,
            d,
            conv1: TokenConv::new(store, rng, &format!("{name}.conv1"), d, channels),
            conv2: TokenConv::new(store, rng, &format!("{name}.conv2"), channels, d),
            gate: Linear::new(store, rng, &format!("{name}.gate"), d, d),
            w_fused: store.add_filled(format!("{name}.w_fused"), 1, inputs, 1.0),
            w_residual: store.add_filled(format!("{name}.w_residual"), 1, inputs, 1.0),
        })
    }

    /// Returns one output per input, each with its input's shape.
    pub fn forward(&self, tape: &mut Tape<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() != self.inputs {
            return Err(Error::invalid(format!(
                "cross-fusion built for {} inputs, got {}",
                self.inputs,
                xs.len()
            )));
        }
        let shapes: Vec<(usize, usize)> = xs.iter().map(|&x| tape.shape(x)).collect();
        for &s in &shapes {
            if s.1 != self.d || s.0 == 0 {
                return Err(Error::Shape {
                    op: "cross_fuse",
                    left: s,
                    right: (shapes[0].0, self.d),
                });
            }
        }
        let n_min = shapes.iter().map(|s| s.0).min().expect("at least two inputs");

        let pooled: Vec<Var> = xs
            .iter()
            .zip(&shapes)
            .map(|(&x, &(n, _))| {
                if n == n_min {
                    x
                } else {
                    tape.left_mul(Arc::new(adaptive_pool_matrix(n, n_min)), x)
                }
            })
            .collect();
        let spliced = tape.concat_rows(&pooled);
        let h = self.conv1.forward(tape, spliced);
        let h = tape.gelu(h);
        let fused = self.conv2.forward(tape, h);

        let avg = tape.mean_rows(fused);
        let g = self.gate.forward(tape, avg);
        let g = tape.sigmoid(g);

        let wf = tape.param(self.w_fused);
        let wr = tape.param(self.w_residual);
        let mut out = Vec::with_capacity(xs.len());
        for (i, (&x, &(n, _))) in xs.iter().zip(&shapes).enumerate() {
            let part = tape.slice_rows(fused, i * n_min, n_min);
            let up = if n == n_min {
                part
            } else {
                tape.left_mul(Arc::new(nearest_upsample_matrix(n_min, n)), part)
            };
            let refined = tape.mul_row(up, g);
            let a = tape.slice_cols(wf, i, 1);
            let b = tape.slice_cols(wr, i, 1);
            let refined = tape.scale_by(refined, a);
            let resid = tape.scale_by(x, b);
            out.push(tape.add(refined, resid));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, loss_and_grads, loss_only, random_readout, finite_difference_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn gelu(v: f64) -> f64 {
        0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
    }

    /// Independent evaluation with explicit loops over tokens and taps.
    fn oracle(store: &ParamStore, f: &CrossFusion, xs: &[Mat]) -> Vec<Mat> {
        let n_min = xs.iter().map(|x| x.nrows()).min().unwrap();
        let d = f.d;
        // adaptive average pooling, window by window
        let mut spliced: Vec<Vec<f64>> = Vec::new();
        for x in xs {
            let n = x.nrows();
            for j in 0..n_min {
                let (lo, hi) = (j * n / n_min, ((j + 1) * n + n_min - 1) / n_min);
                let mut row = vec![0.0; d];
                for i in lo..hi {
                    for c in 0..d {
                        row[c] += x[[i, c]] / (hi - lo) as f64;
                    }
                }
                spliced.push(row);
            }
        }
        let conv = |input: &Vec<Vec<f64>>, lin: &Linear, act: bool| -> Vec<Vec<f64>> {
            let w = store.value(lin.w);
            let b = store.value(lin.b.unwrap());
            let d_in = input[0].len();
            let d_out = w.ncols();
            let n = input.len();
            (0..n)
                .map(|t| {
                    (0..d_out)
                        .map(|o| {
                            let mut acc = b[[0, o]];
                            for (k, off) in [-1isize, 0, 1].iter().enumerate() {
                                let src = t as isize + off;
                                if src < 0 || src >= n as isize {
                                    continue;
                                }
                                for c in 0..d_in {
                                    acc += input[src as usize][c] * w[[k * d_in + c, o]];
                                }
                            }
                            if act {
                                gelu(acc)
                            } else {
                                acc
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let h = conv(&spliced, &f.conv1.lin, true);
        let fused = conv(&h, &f.conv2.lin, false);
        let gw = store.value(f.gate.w);
        let gb = store.value(f.gate.b.unwrap());
        let gate: Vec<f64> = (0..d)
            .map(|o| {
                let mut acc = gb[[0, o]];
                for c in 0..d {
                    let mean = fused.iter().map(|r| r[c]).sum::<f64>() / fused.len() as f64;
                    acc += mean * gw[[c, o]];
                }
                1.0 / (1.0 + (-acc).exp())
            })
            .collect();
        let wf = store.value(f.w_fused);
        let wr = store.value(f.w_residual);
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let n = x.nrows();
                Mat::from_shape_fn((n, d), |(r, c)| {
                    let src = i * n_min + r * n_min / n;
                    wf[[0, i]] * fused[src][c] * gate[c] + wr[[0, i]] * x[[r, c]]
                })
            })
            .collect()
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for p in store.iter_mut() {
            let dim = p.value.dim();
            p.value = rand_mat(rng, dim.0, dim.1);
        }
    }

    #[test]
    fn pooling_and_upsampling_matrices() {
        let p = adaptive_pool_matrix(5, 2);
        assert_eq!(p.row(0).to_vec(), vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
        assert_eq!(p.row(1).to_vec(), vec![0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(adaptive_pool_matrix(4, 4), Mat::eye(4));
        let u = nearest_upsample_matrix(2, 5);
        let src: Vec<usize> = (0..5).map(|r| (0..2).find(|&c| u[[r, c]] == 1.0).unwrap()).collect();
        assert_eq!(src, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn pair_shapes_and_zero_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let f = CrossFusion::new(&mut store, &mut rng, "f", 2, 32, 16).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.constant(rand_mat(&mut rng, 16, 32));
        let b = tape.constant(rand_mat(&mut rng, 16, 32));
        let out = f.forward(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(out[0]), (16, 32));
        assert_eq!(tape.shape(out[1]), (16, 32));

        let mut tape = Tape::new(&store);
        let z1 = tape.constant(Mat::zeros((9, 32)));
        let z2 = tape.constant(Mat::zeros((4, 32)));
        let out = f.forward(&mut tape, &[z1, z2]).unwrap();
        for o in out {
            assert!(tape.value(o).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn triple_shapes_and_zero_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let f = CrossFusion::new(&mut store, &mut rng, "f", 3, 16, 8).unwrap();
        let mut tape = Tape::new(&store);
        let xs: Vec<Var> = (0..3).map(|_| tape.constant(rand_mat(&mut rng, 8, 16))).collect();
        for o in f.forward(&mut tape, &xs).unwrap() {
            assert_eq!(tape.shape(o), (8, 16));
        }
        let zs: Vec<Var> = (0..3).map(|_| tape.constant(Mat::zeros((8, 16)))).collect();
        for o in f.forward(&mut tape, &zs).unwrap() {
            assert!(tape.value(o).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_mismatched_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let f = CrossFusion::new(&mut store, &mut rng, "f", 2, 4, 4).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Mat::zeros((3, 4)));
        let b = tape.constant(Mat::zeros((3, 5)));
        assert!(f.forward(&mut tape, &[a, b]).is_err());
        assert!(f.forward(&mut tape, &[a]).is_err());
        assert!(CrossFusion::new(&mut store, &mut rng, "g", 1, 4, 4).is_err());
    }

    #[test]
    fn matches_straight_line_oracle() {
        for (k, counts) in [(2usize, vec![4usize, 4]), (2, vec![7, 4]), (3, vec![4, 6, 9])] {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64 + counts[0] as u64);
            let mut store = ParamStore::new();
            let f = CrossFusion::new(&mut store, &mut rng, "f", k, 4, 3).unwrap();
            randomize(&mut store, &mut rng);
            let xs: Vec<Mat> = counts.iter().map(|&n| rand_mat(&mut rng, n, 4)).collect();
            let mut tape = Tape::new(&store);
            let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let got = f.forward(&mut tape, &vars).unwrap();
            let want = oracle(&store, &f, &xs);
            for (g, w) in got.iter().zip(&want) {
                let err = (tape.value(*g) - w).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                assert!(err < 1e-12, "counts {counts:?}: {err}");
            }
        }
    }

    #[test]
    fn gradients_pair_and_triple() {
        for counts in [vec![5usize, 3], vec![4, 6, 2]] {
            let mut rng = ChaCha8Rng::seed_from_u64(counts.len() as u64 * 7);
            let mut store = ParamStore::new();
            let f = CrossFusion::new(&mut store, &mut rng, "f", counts.len(), 4, 3).unwrap();
            randomize(&mut store, &mut rng);
            let ids: Vec<ParamId> = counts
                .iter()
                .enumerate()
                .map(|(i, &n)| store.add(format!("x{i}"), rand_mat(&mut rng, n, 4)))
                .collect();
            let build = |t: &mut Tape<'_>| {
                let xs: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
                let outs = f.forward(t, &xs).unwrap();
                let cat = t.concat_rows(&outs);
                random_readout(t, cat, 5)
            };
            let (_, grads) = loss_and_grads(&store, build);
            let r = finite_difference_check(
                &mut store,
                &grads,
                |s| loss_only(s, build),
                gradcheck::DEFAULT_STEP,
                None,
                0,
            )
            .unwrap();
            assert!(r.passes(gradcheck::DEFAULT_TOLERANCE), "{r:?}");
        }
    }
}
