//! Periodic orthonormal Daubechies wavelet transform and soft-threshold
//! denoising.
//!
//! Analysis at one level: `a[k] = Σ h[n] x[(2k+n) mod N]` and
//! `d[k] = Σ g[n] x[(2k+n) mod N]` with `g[n] = (−1)^n h[L−1−n]`. The
//! multi-level map is orthogonal, so synthesis is its transpose.

#![allow(clippy::excessive_precision)]

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomBackward, Mat, Tape, Var};

// Scaling filters, sum √2, unit norm. Digits as tabulated.
const DB1: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
const DB2: [f64; 4] = [
    0.48296291314453414337,
    0.83651630373780790558,
    0.22414386804201338103,
    -0.12940952255126038117,
];
const DB3: [f64; 6] = [
    0.332670552950082616,
    0.80689150931109257649,
    0.4598775021184915701,
    -0.1350110200102545887,
    -0.085441273882026661693,
    0.035226291885709536603,
];
const DB4: [f64; 8] = [
    0.23037781330889650086,
    0.71484657055291564709,
    0.63088076792985890788,
    -0.027983769416859854211,
    -0.18703481171909308408,
    0.030841381835560763627,
    0.032883011666885199735,
    -0.010597401785069032105,
];
const DB5: [f64; 10] = [
    0.16010239797419291448,
    0.60382926979718967054,
    0.72430852843777292773,
    0.13842814590132073151,
    -0.24229488706638203186,
    -0.032244869584638374648,
    0.077571493840045713523,
    -0.0062414902127982742742,
    -0.012580751999081999469,
    0.003335725285473771278,
];
const DB6: [f64; 12] = [
    0.11154074335010946362,
    0.49462389039845308568,
    0.75113390802109535068,
    0.31525035170919762909,
    -0.22626469396543982008,
    -0.12976686756726193556,
    0.097501605587323049102,
    0.027522865530305728626,
    -0.031582039317486029565,
    0.00055384220116149613925,
    0.0047772575109455106396,
    -0.0010773010853084795649,
];
const DB7: [f64; 14] = [
    0.07785205408500917902,
    0.39653931948191730654,
    0.72913209084623511992,
    0.46978228740519312247,
    -0.14390600392856497541,
    -0.22403618499387498264,
    0.071309219266830264751,
    0.080612609151083071913,
    -0.03802993693501441358,
    -0.016574541630666880654,
    0.012550998556099840613,
    0.00042957797292136652113,
    -0.0018016407040474909153,
    0.00035371379997452024845,
];
const DB8: [f64; 16] = [
    0.054415842243104009955,
    0.31287159091429997066,
    0.67563073629728980681,
    0.58535468365420671277,
    -0.015829105256349305667,
    -0.28401554296154692652,
    0.00047248457391328277036,
    0.12874742662047845886,
    -0.01736930100180754617,
    -0.044088253930794751507,
    0.013981027917398281649,
    0.0087460940474057767164,
    -0.0048703529934515743104,
    -0.0003917403733769470463,
    0.00067544940645056936637,
    -0.00011747678412476953373,
];

const FILTERS: [&[f64]; 8] = [&DB1, &DB2, &DB3, &DB4, &DB5, &DB6, &DB7, &DB8];

/// Orthonormal quadrature-mirror filter pair of the Daubechies family.
#[derive(Clone, Debug, PartialEq)]
pub struct Wavelet {
    order: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Wavelet {
    /// `dbN` for `N` in `1..=8`; the filter pair is verified on construction.
    pub fn daubechies(order: usize) -> Result<Self> {
        if !(1..=FILTERS.len()).contains(&order) {
            return Err(Error::invalid(format!(
                "Daubechies order must be in 1..={}, got {order}",
                FILTERS.len()
            )));
        }
        let lo = FILTERS[order - 1].to_vec();
        let l = lo.len();
        let hi = (0..l)
            .map(|n| if n.is_multiple_of(2) { lo[l - 1 - n] } else { -lo[l - 1 - n] })
            .collect();
        let w = Self { order, lo, hi };
        w.check_orthonormal(1e-12)?;
        Ok(w)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lo
    }

    pub fn highpass(&self) -> &[f64] {
        &self.hi
    }

    /// Double-shift orthonormality of both filters and their mutual
    /// orthogonality.
    pub fn check_orthonormal(&self, tol: f64) -> Result<()> {
        let l = self.lo.len() as isize;
        let corr = |a: &[f64], b: &[f64], shift: isize| -> f64 {
            (0..l)
                .filter_map(|n| {
                    let m = n + shift;
                    (0..l).contains(&m).then(|| a[n as usize] * b[m as usize])
                })
                .sum()
        };
        for k in (-(l / 2)..=(l / 2)).map(|k| 2 * k) {
            let delta = if k == 0 { 1.0 } else { 0.0 };
            let checks = [
                corr(&self.lo, &self.lo, k) - delta,
                corr(&self.hi, &self.hi, k) - delta,
                corr(&self.lo, &self.hi, k),
            ];
            if checks.iter().any(|c| c.abs() > tol) {
                return Err(Error::invalid(format!(
                    "db{} filters are not orthonormal at shift {k}",
                    self.order
                )));
            }
        }
        Ok(())
    }

    fn analyze_level(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let half = n / 2;
        let mut a = vec![0.0; half];
        let mut d = vec![0.0; half];
        for k in 0..half {
            for (t, (&lo, &hi)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = x[(2 * k + t) % n];
                a[k] += lo * v;
                d[k] += hi * v;
            }
        }
        (a, d)
    }

    fn synthesize_level(&self, a: &[f64], d: &[f64]) -> Vec<f64> {
        let n = 2 * a.len();
        let mut x = vec![0.0; n];
        for k in 0..a.len() {
            for (t, (&lo, &hi)) in self.lo.iter().zip(&self.hi).enumerate() {
                x[(2 * k + t) % n] += lo * a[k] + hi * d[k];
            }
        }
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `σ̂ √(2 ln N)` with `σ̂ = median(|finest details|) / 0.6745`.
    Universal,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveletConfig {
    pub order: usize,
    pub levels: usize,
    pub threshold: ThresholdRule,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        Self {
            order: 2,
            levels: 2,
            threshold: ThresholdRule::Universal,
        }
    }
}

impl WaveletConfig {
    pub fn validate(&self) -> Result<()> {
        Wavelet::daubechies(self.order)?;
        if self.levels == 0 {
            return Err(Error::invalid("wavelet levels must be at least 1"));
        }
        if let ThresholdRule::Fixed(l) = self.threshold {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!("threshold must be finite and non-negative, got {l}")));
            }
        }
        Ok(())
    }

    /// Signal lengths must be a multiple of `2^levels`.
    pub fn check_length(&self, n: usize) -> Result<()> {
        let block = 1usize << self.levels;
        if n < block || !n.is_multiple_of(block) {
            return Err(Error::invalid(format!(
                "signal length {n} does not support {} decomposition levels (needs a positive multiple of {block})",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Multi-level coefficients; `details[0]` is the finest level.
#[derive(Clone, Debug, PartialEq)]
pub struct DwtCoeffs {
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
}

impl DwtCoeffs {
    pub fn len(&self) -> usize {
        self.approx.len() + self.details.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn energy(&self) -> f64 {
        self.approx.iter().chain(self.details.iter().flatten()).map(|c| c * c).sum()
    }
}

pub fn dwt_forward(signal: &[f64], wavelet: &Wavelet, levels: usize) -> Result<DwtCoeffs> {
    WaveletConfig {
        order: wavelet.order,
        levels,
        threshold: ThresholdRule::Fixed(0.0),
    }
    .check_length(signal.len())?;
    let mut approx = signal.to_vec();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = wavelet.analyze_level(&approx);
        details.push(d);
        approx = a;
    }
    Ok(DwtCoeffs { approx, details })
}

pub fn dwt_inverse(coeffs: &DwtCoeffs, wavelet: &Wavelet) -> Vec<f64> {
    let mut x = coeffs.approx.clone();
    for d in coeffs.details.iter().rev() {
        x = wavelet.synthesize_level(&x, d);
    }
    x
}

fn soft(v: f64, lambda: f64) -> f64 {
    v.signum() * (v.abs() - lambda).max(0.0)
}

/// `sign(x) · max(|x| − λ, 0)` elementwise.
pub fn soft_threshold(coeffs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("threshold must be non-negative, got {lambda}")));
    }
    Ok(coeffs.iter().map(|&c| soft(c, lambda)).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn universal_threshold(coeffs: &DwtCoeffs, n: usize) -> f64 {
    let finest: Vec<f64> = coeffs.details[0].iter().map(|d| d.abs()).collect();
    let sigma = median(finest) / 0.6745;
    sigma * (2.0 * (n as f64).ln()).sqrt()
}

fn threshold_for(cfg: &WaveletConfig, coeffs: &DwtCoeffs, n: usize) -> f64 {
    match cfg.threshold {
        ThresholdRule::Universal => universal_threshold(coeffs, n),
        ThresholdRule::Fixed(l) => l,
    }
}

/// Analysis, soft-thresholding of every detail level, synthesis.
pub fn dwt_denoise(signal: &[f64], cfg: &WaveletConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let w = Wavelet::daubechies(cfg.order)?;
    let mut c = dwt_forward(signal, &w, cfg.levels)?;
    let lambda = threshold_for(cfg, &c, signal.len());
    for d in &mut c.details {
        *d = soft_threshold(d, lambda)?;
    }
    Ok(dwt_inverse(&c, &w))
}

/// Backward of the denoiser: synthesis ∘ diag(pass) ∘ analysis, where
/// `pass` is 1 for coefficients that survived the threshold and 0 at or
/// inside it. The threshold itself is held constant.
struct DenoiseBackward {
    wavelet: Wavelet,
    levels: usize,
    pass: Vec<Vec<bool>>,
}

impl CustomBackward for DenoiseBackward {
    fn backward(&self, grad_out: &Mat) -> Mat {
        let g: Vec<f64> = grad_out.iter().copied().collect();
        let mut c = dwt_forward(&g, &self.wavelet, self.levels).expect("length checked in forward");
        for (d, keep) in c.details.iter_mut().zip(&self.pass) {
            for (v, &k) in d.iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
        let x = dwt_inverse(&c, &self.wavelet);
        Mat::from_shape_vec(grad_out.dim(), x).expect("shape preserved")
    }
}

/// Differentiable denoising of a `1 × N` row.
pub fn denoise_on_tape(tape: &mut Tape<'_>, x: Var, cfg: &WaveletConfig) -> Result<Var> {
    let (r, n) = tape.shape(x);
    if r != 1 {
        return Err(Error::invalid(format!("wavelet denoising expects a row vector, got {r} rows")));
    }
    cfg.validate()?;
    let w = Wavelet::daubechies(cfg.order)?;
    let signal: Vec<f64> = tape.value(x).iter().copied().collect();
    let mut c = dwt_forward(&signal, &w, cfg.levels)?;
    let lambda = threshold_for(cfg, &c, n);
    let mut pass = Vec::with_capacity(cfg.levels);
    for d in &mut c.details {
        pass.push(d.iter().map(|v| v.abs() > lambda).collect());
        *d = soft_threshold(d, lambda)?;
    }
    let y = Mat::from_shape_vec((1, n), dwt_inverse(&c, &w)).expect("length preserved");
    Ok(tape.custom(
        x,
        y,
        Box::new(DenoiseBackward {
            wavelet: w,
            levels: cfg.levels,
            pass,
        }),
    ))
}
