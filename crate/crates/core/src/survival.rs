//! Modality fusion, per-modality risk heads and the Cox partial-likelihood
//! objective.
//!
//! Sign convention: a larger output means a higher hazard.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Dropout, FeedForward, LayerNorm, Mode, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the masked-autoencoder term.
    pub lambda_0: f64,
    /// Cox weights for pathology, RNA and CNV/MUT.
    pub lambda_m: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_0: 5.0,
            lambda_m: [1.0; 3],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.lambda_0).chain(self.lambda_m);
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("loss weights must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

pub fn total_loss(cox: [f64; 3], trimae: f64, w: &LossWeights) -> f64 {
    let mut total = w.lambda_0 * trimae;
    for (c, l) in cox.iter().zip(w.lambda_m) {
        total += l * c;
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskOutput {
    /// Pathology, RNA and CNV/MUT outputs.
    pub o: [f64; 3],
    pub fused_risk: f64,
}

impl RiskOutput {
    pub fn new(o: [f64; 3]) -> Self {
        Self {
            o,
            fused_risk: inference_risk(o),
        }
    }
}

/// Ranking score of a patient: the unweighted mean of the modality outputs.
pub fn inference_risk(o: [f64; 3]) -> f64 {
    (o[0] + o[1] + o[2]) / 3.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoxLoss {
    pub value: f64,
    /// `∂value/∂O`.
    pub grad: Vec<f64>,
    /// Set when no patient in the batch has an event; value and gradient
    /// are then zero.
    pub no_events: bool,
}

/// Negative Cox partial log-likelihood summed over events. Risk sets are
/// `{j : t_j ≥ t_i}`.
pub fn cox_loss(o: &[f64], t: &[f64], delta: &[bool]) -> Result<CoxLoss> {
    let b = o.len();
    if b == 0 {
        return Err(Error::invalid("Cox loss needs at least one patient"));
    }
    if t.len() != b || delta.len() != b {
        return Err(Error::invalid(format!(
            "Cox loss inputs differ in length: {b} outputs, {} times, {} events",
            t.len(),
            delta.len()
        )));
    }
    if let Some(x) = o.iter().find(|x| !x.is_finite()) {
        return Err(Error::Divergence(format!("non-finite model output {x} in Cox loss")));
    }
    if let Some(x) = t.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::invalid(format!("survival times must be positive, got {x}")));
    }
    let mut grad = vec![0.0; b];
    if !delta.iter().any(|&d| d) {
        return Ok(CoxLoss {
            value: 0.0,
            grad,
            no_events: true,
        });
    }
    // shifting every output by the max leaves the loss unchanged
    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = o.iter().map(|x| (x - m).exp()).collect();
    let mut value = 0.0;
    for i in (0..b).filter(|&i| delta[i]) {
        let set: Vec<usize> = (0..b).filter(|&j| t[j] >= t[i]).collect();
        let denom: f64 = set.iter().map(|&j| w[j]).sum();
        value += -o[i] + m + denom.ln();
        grad[i] -= 1.0;
        for &j in &set {
            grad[j] += w[j] / denom;
        }
    }
    Ok(CoxLoss {
        value,
        grad,
        no_events: false,
    })
}

/// Fusion trunk `F = MLP₂(LN(MLP₁(x) + x) + x)` applied token-wise.
#[derive(Clone, Debug)]
pub struct ModalityFusion {
    pub mlp1: FeedForward,
    pub ln: LayerNorm,
    pub mlp2: FeedForward,
    pub d: usize,
}

impl ModalityFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            mlp1: FeedForward::new(store, rng, &format!("{name}.mlp1"), d, 2 * d, d),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            mlp2: FeedForward::new(store, rng, &format!("{name}.mlp2"), d, 2 * d, d),
            d,
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        dropout: Dropout,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (n, d) = tape.shape(x);
        if n == 0 || d != self.d {
            return Err(Error::Shape {
                op: "fuse_modalities",
                left: (n, d),
                right: (n.max(1), self.d),
            });
        }
        let h = self.mlp1.forward_dropout(tape, x, dropout, mode, rng);
        let h = tape.add(h, x);
        let h = self.ln.forward(tape, h);
        let h = tape.add(h, x);
        Ok(self.mlp2.forward_dropout(tape, h, dropout, mode, rng))
    }
}

/// Mean-pools a modality's tokens and maps them to one output.
#[derive(Clone, Debug)]
pub struct RiskHead {
    pub mlp: FeedForward,
    pub d: usize,
}

impl RiskHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            mlp: FeedForward::new(store, rng, name, d, (d / 2).max(1), 1),
            d,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, f_m: Var) -> Result<Var> {
        let (n, d) = tape.shape(f_m);
        if n == 0 || d != self.d {
            return Err(Error::Shape {
                op: "modality_risk",
                left: (n, d),
                right: (n.max(1), self.d),
            });
        }
        let pooled = tape.mean_rows(f_m);
        Ok(self.mlp.forward(tape, pooled))
    }
}

/// Shared fusion trunk followed by three heads, each reading its own
/// modality's rows of the fused tokens.
#[derive(Clone, Debug)]
pub struct SurvivalHead {
    pub fusion: ModalityFusion,
    pub heads: [RiskHead; 3],
    pub dropout: Dropout,
}

impl SurvivalHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, dropout: f64) -> Result<Self> {
        let dropout = Dropout::new(dropout)?;
        let fusion = ModalityFusion::new(store, rng, &format!("{name}.fuse"), d);
        let heads = ["p", "r", "cm"].map(|m| RiskHead::new(store, rng, &format!("{name}.head_{m}"), d));
        Ok(Self { fusion, heads, dropout })
    }

    /// Returns the three `1 × 1` outputs for pathology, RNA and CNV/MUT.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, tokens: [Var; 3], mode: Mode, rng: &mut R) -> Result<[Var; 3]> {
        let counts = tokens.map(|t| tape.shape(t).0);
        if counts.contains(&0) {
            return Err(Error::invalid("every modality needs at least one token"));
        }
        let x = tape.concat_rows(&tokens);
        let f = self.fusion.forward(tape, x, self.dropout, mode, rng)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(3);
        for (head, n) in self.heads.iter().zip(counts) {
            let slice = tape.slice_rows(f, start, n);
            out.push(head.forward(tape, slice)?);
            start += n;
        }
        Ok([out[0], out[1], out[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_function, finite_difference_check, gradcheck, loss_and_grads, loss_only, random_readout, Mat};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-line evaluation of the negative partial log-likelihood,
    /// without stabilisation.
    fn cox_reference(o: &[f64], t: &[f64], delta: &[bool]) -> f64 {
        let mut total = 0.0;
        for i in 0..o.len() {
            if !delta[i] {
                continue;
            }
            let mut s = 0.0;
            for j in 0..o.len() {
                if t[j] >= t[i] {
                    s += o[j].exp();
                }
            }
            total += -o[i] + s.ln();
        }
        total
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cox_examples() {
        let l = cox_loss(&[0.7], &[3.0], &[true]).unwrap();
        assert!(l.value.abs() < 1e-15 && !l.no_events);
        let l = cox_loss(&[0.0, 0.0], &[2.0, 1.0], &[true, true]).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
        let l = cox_loss(&[0.3, -1.0], &[2.0, 1.0], &[false, false]).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.no_events);
        assert_eq!(l.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn cox_rejects_bad_input() {
        assert!(cox_loss(&[], &[], &[]).is_err());
        assert!(cox_loss(&[0.0], &[0.0], &[true]).is_err());
        assert!(cox_loss(&[0.0, 1.0], &[1.0], &[true]).is_err());
        assert!(matches!(cox_loss(&[f64::NAN], &[1.0], &[true]), Err(Error::Divergence(_))));
    }

    #[test]
    fn cox_is_stable_for_large_outputs() {
        let l = cox_loss(&[800.0, 799.0], &[1.0, 2.0], &[true, true]).unwrap();
        let want = -800.0 + 800.0 + (1.0 + (-1f64).exp()).ln();
        assert!((l.value - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss([0.1, 0.2, 0.3], 0.05, &w) - 0.85).abs() < 1e-15);
        let no_mae = LossWeights { lambda_0: 0.0, ..w.clone() };
        assert!((total_loss([0.1, 0.2, 0.3], 0.05, &no_mae) - 0.6).abs() < 1e-15);
        assert_eq!(total_loss([0.0; 3], 0.0, &w), 0.0);
        assert!(LossWeights { lambda_0: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn inference_risk_examples() {
        assert_eq!(inference_risk([1.0, 1.0, 1.0]), 1.0);
        assert_eq!(inference_risk([0.0, 0.0, 3.0]), 1.0);
        assert_eq!(RiskOutput::new([3.0, 0.0, 0.0]).fused_risk, 1.0);
    }

    #[test]
    fn fusion_zero_in_zero_out_with_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let f = ModalityFusion::new(&mut store, &mut rng, "f", 6);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Mat::zeros((5, 6)));
        let y = f.forward(&mut tape, x, Dropout::new(0.0).unwrap(), Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.shape(y), (5, 6));
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let bad = tape.constant(Mat::zeros((5, 4)));
        assert!(f.forward(&mut tape, bad, Dropout::new(0.0).unwrap(), Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn fusion_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let f = ModalityFusion::new(&mut store, &mut rng, "f", 4);
        for p in store.iter_mut() {
            p.value.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
        }
        let x = rand_mat(&mut rng, 3, 4);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let y = f.forward(&mut tape, xv, Dropout::new(0.0).unwrap(), Mode::Eval, &mut rng).unwrap();

        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let mlp = |ff: &FeedForward, input: &Mat| -> Mat {
            let lin = |l: &crate::numerics::Linear, m: &Mat| m.dot(store.value(l.w)) + store.value(l.b.unwrap());
            lin(&ff.fc2, &lin(&ff.fc1, input).mapv(gelu))
        };
        let mut h = mlp(&f.mlp1, &x) + &x;
        let (g, b) = (store.value(f.ln.gamma), store.value(f.ln.beta));
        for mut row in h.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / (var + crate::numerics::layers::LN_EPS).sqrt() * g[[0, k]] + b[[0, k]];
            }
        }
        let want = mlp(&f.mlp2, &(h + &x));
        let err = (tape.value(y) - &want).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn head_is_permutation_invariant_and_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = RiskHead::new(&mut store, &mut rng, "h", 4);
        let x = rand_mat(&mut rng, 5, 4);
        let perm = x.select(ndarray::Axis(0), &[3, 0, 4, 1, 2]);
        let mut tape = Tape::new(&store);
        let a = tape.constant(x);
        let b = tape.constant(perm);
        let oa = head.forward(&mut tape, a).unwrap();
        let ob = head.forward(&mut tape, b).unwrap();
        assert_eq!(tape.shape(oa), (1, 1));
        assert!((tape.scalar(oa) - tape.scalar(ob)).abs() < 1e-14);
        let empty = tape.constant(Mat::zeros((0, 4)));
        assert!(head.forward(&mut tape, empty).is_err());
    }

    #[test]
    fn single_token_identity_head_returns_pooled_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = RiskHead::new(&mut store, &mut rng, "h", 1);
        // gelu is the identity on large positive inputs to within erf's tail
        store.value_mut(head.mlp.fc1.w).fill(1.0);
        store.value_mut(head.mlp.fc1.b.unwrap()).fill(40.0);
        store.value_mut(head.mlp.fc2.w).fill(1.0);
        store.value_mut(head.mlp.fc2.b.unwrap()).fill(-40.0);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Mat::from_elem((1, 1), 0.37));
        let o = head.forward(&mut tape, x).unwrap();
        assert!((tape.scalar(o) - 0.37).abs() < 1e-12);
    }

    #[test]
    fn head_and_fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let sh = SurvivalHead::new(&mut store, &mut rng, "s", 4, 0.2).unwrap();
        let ids: Vec<_> = [3, 2, 2]
            .iter()
            .enumerate()
            .map(|(i, &n)| store.add(format!("x{i}"), rand_mat(&mut rng, n, 4)))
            .collect();
        let build = |t: &mut Tape<'_>| {
            let x = [t.param(ids[0]), t.param(ids[1]), t.param(ids[2])];
            let mut r = ChaCha8Rng::seed_from_u64(11);
            let o = sh.forward(t, x, Mode::Train, &mut r).unwrap();
            let cat = t.concat_cols(&o);
            random_readout(t, cat, 1)
        };
        let (_, grads) = loss_and_grads(&store, build);
        let r = finite_difference_check(&mut store, &grads, |s| loss_only(s, build), gradcheck::DEFAULT_STEP, None, 0).unwrap();
        assert!(r.passes(gradcheck::DEFAULT_TOLERANCE), "{r:?}");
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let sh = SurvivalHead::new(&mut store, &mut rng, "s", 4, 0.5).unwrap();
        let xs: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 3, 4)).collect();
        let run = |mode, seed| {
            let mut tape = Tape::new(&store);
            let x = [0, 1, 2].map(|i| tape.constant(xs[i].clone()));
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let o = sh.forward(&mut tape, x, mode, &mut r).unwrap();
            o.map(|v| tape.scalar(v))
        };
        assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
        assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
    }

    fn cox_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (1usize..=8).prop_flat_map(|b| {
            (
                prop::collection::vec(-5.0f64..5.0, b),
                // few distinct times so ties occur
                prop::collection::vec(1u32..6, b).prop_map(|v| v.into_iter().map(f64::from).collect()),
                prop::collection::vec(any::<bool>(), b),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn cox_matches_reference((o, t, d) in cox_case()) {
            let l = cox_loss(&o, &t, &d).unwrap();
            prop_assert!((l.value - cox_reference(&o, &t, &d)).abs() <= 1e-9);
            prop_assert!(l.value >= -1e-12);
        }

        #[test]
        fn cox_shift_invariant((o, t, d) in cox_case(), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = o.iter().map(|x| x + c).collect();
            let a = cox_loss(&o, &t, &d).unwrap();
            let b = cox_loss(&shifted, &t, &d).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0));
        }

        #[test]
        fn cox_gradient_matches_differences((o, t, d) in cox_case()) {
            let l = cox_loss(&o, &t, &d).unwrap();
            let r = check_function(&o, &l.grad, |x| cox_loss(x, &t, &d).unwrap().value, 1e-5).unwrap();
            prop_assert!(r.passes(1e-6), "{:?}", r);
        }

        #[test]
        fn total_loss_is_linear(c in prop::array::uniform3(-3.0f64..3.0), m in -3.0f64..3.0, k in 0.0f64..4.0) {
            let w = LossWeights::default();
            let scaled = total_loss(c.map(|x| k * x), k * m, &w);
            prop_assert!((scaled - k * total_loss(c, m, &w)).abs() < 1e-12);
        }
    }
}
