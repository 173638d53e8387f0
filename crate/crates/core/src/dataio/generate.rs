use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Cohort, PatchGrid, PatientRecord, Scale, Schema};
use crate::error::{Error, Result};
use crate::numerics::{Mat, RngStream};

/// Knobs of the synthetic cohort.
///
/// Survival follows an exponential proportional-hazards model with rate
/// `hazard_scale · exp(risk_strength · z)`, `z ~ N(0, 1)`, so
/// `risk_strength · z` is the true log relative hazard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Baseline hazard per day.
    pub hazard_scale: f64,
    /// Expected fraction of censored patients, in `[0, 1)`.
    pub censoring_rate: f64,
    pub risk_strength: f64,
    /// Amplitude of the risk signal planted in the pathology sub-block.
    pub pathology_signal: f64,
    pub pathology_noise: f64,
    pub rna_noise: f64,
    /// Log-odds shift of the CNV/MUT spike rate per unit of `z`.
    pub cnv_effect: f64,
    /// Probability that a grid cell is absent (background).
    pub hole_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            hazard_scale: 1.0 / 365.0,
            censoring_rate: 0.3,
            risk_strength: 2.0,
            pathology_signal: 1.0,
            pathology_noise: 0.5,
            rna_noise: 0.5,
            cnv_effect: 1.0,
            hole_rate: 0.0,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct ScalePattern {
    base: Mat,
    direction: Vec<f64>,
    block_rows: std::ops::Range<usize>,
    block_cols: std::ops::Range<usize>,
}

/// Contiguous central block covering about half of each axis.
fn central_block(len: usize) -> std::ops::Range<usize> {
    let start = len / 4;
    let width = (len / 2).max(1);
    start..(start + width).min(len)
}

/// Expected censoring fraction for uniform censoring on `[0, t_max]` given
/// exponential event rates: mean of `(1 − e^{−λ t_max}) / (λ t_max)`.
fn expected_censoring(rates: &[f64], t_max: f64) -> f64 {
    rates
        .iter()
        .map(|&l| {
            let x = l * t_max;
            if x < 1e-8 {
                1.0 - x / 2.0
            } else {
                -(-x).exp_m1() / x
            }
        })
        .sum::<f64>()
        / rates.len() as f64
}

fn solve_censoring_horizon(rates: &[f64], target: f64) -> f64 {
    // expected_censoring decreases monotonically from 1 to 0 in t_max
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_censoring(rates, mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Generates a synthetic cohort with a known latent hazard.
pub fn generate_cohort(
    n: usize,
    schema: &Schema,
    cfg: &SynthConfig,
    stream: RngStream,
) -> Result<Cohort> {
    if n < 2 {
        return Err(Error::invalid(format!("cohort needs at least 2 patients, got {n}")));
    }
    if !(0.0..1.0).contains(&cfg.censoring_rate) {
        return Err(Error::invalid(format!(
            "censoring rate must be in [0, 1), got {}",
            cfg.censoring_rate
        )));
    }
    if !(cfg.hazard_scale > 0.0) {
        return Err(Error::invalid("hazard scale must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.hole_rate) {
        return Err(Error::invalid("hole rate must be in [0, 1)"));
    }
    schema.validate()?;
    if schema.d_x < 4 || schema.rna_dim < 4 || schema.cnv_mut_dim < 4 {
        return Err(Error::invalid("feature dimensions must be at least 4"));
    }

    let mut shared = stream.substream(0);
    let patterns: Vec<ScalePattern> = Scale::ALL
        .iter()
        .map(|&s| {
            let g = schema.grid(s);
            ScalePattern {
                base: Mat::from_shape_fn((g.cells(), schema.d_x), |_| normal(&mut shared)),
                direction: (0..schema.d_x).map(|_| normal(&mut shared)).collect(),
                block_rows: central_block(g.rows),
                block_cols: central_block(g.cols),
            }
        })
        .collect();
    let rna_loading: Vec<f64> = (0..schema.rna_dim).map(|_| normal(&mut shared)).collect();
    let cnv_logit: Vec<f64> = (0..schema.cnv_mut_dim)
        .map(|_| (0.15f64 / 0.85).ln() + 0.5 * normal(&mut shared))
        .collect();

    let width = (n - 1).to_string().len().max(4);
    let mut patients = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let mut rates = Vec::with_capacity(n);
    let mut event_times = Vec::with_capacity(n);
    let mut censor_draws = Vec::with_capacity(n);

    for i in 0..n {
        let mut rng = stream.substream(i as u64 + 1);
        let z = normal(&mut rng);

        let mut grids = Vec::with_capacity(3);
        for (k, &scale) in Scale::ALL.iter().enumerate() {
            let g = schema.grid(scale);
            let pat = &patterns[k];
            let mut coords = Vec::with_capacity(g.cells());
            let mut rows = Vec::with_capacity(g.cells() * schema.d_x);
            for r in 0..g.rows {
                for c in 0..g.cols {
                    let absent = cfg.hole_rate > 0.0 && rng.random::<f64>() < cfg.hole_rate;
                    let in_block = pat.block_rows.contains(&r) && pat.block_cols.contains(&c);
                    // draw noise regardless of presence to keep streams aligned
                    let noise: Vec<f64> = (0..schema.d_x).map(|_| normal(&mut rng)).collect();
                    if absent {
                        continue;
                    }
                    coords.push((r, c));
                    let cell = r * g.cols + c;
                    for j in 0..schema.d_x {
                        let mut v = pat.base[[cell, j]] + cfg.pathology_noise * noise[j];
                        if in_block {
                            v += cfg.pathology_signal * z * pat.direction[j];
                        }
                        rows.push(v);
                    }
                }
            }
            if coords.is_empty() {
                // keep at least the first block cell
                let (r, c) = (pat.block_rows.start, pat.block_cols.start);
                let cell = r * g.cols + c;
                coords.push((r, c));
                for j in 0..schema.d_x {
                    rows.push(pat.base[[cell, j]] + cfg.pathology_signal * z * pat.direction[j]);
                }
            }
            let features = Mat::from_shape_vec((coords.len(), schema.d_x), rows)
                .expect("grid rows match coordinates");
            grids.push(PatchGrid { coords, features });
        }

        let rna = rna_loading
            .iter()
            .map(|a| a * z + cfg.rna_noise * normal(&mut rng))
            .collect();
        let cnv_mut = cnv_logit
            .iter()
            .map(|b| {
                let p = logistic(b + cfg.cnv_effect * z);
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();

        let rate = cfg.hazard_scale * (cfg.risk_strength * z).exp();
        let t = Exp::new(rate)
            .map_err(|e| Error::invalid(format!("bad hazard rate {rate}: {e}")))?
            .sample(&mut rng);
        rates.push(rate);
        event_times.push(t.max(f64::MIN_POSITIVE));
        censor_draws.push(rng.random::<f64>());
        latent.push(cfg.risk_strength * z);

        let mut grids = grids.into_iter();
        patients.push(PatientRecord {
            id: format!("pt{i:0width$}"),
            small: grids.next().expect("small grid"),
            medium: grids.next().expect("medium grid"),
            large: grids.next().expect("large grid"),
            rna,
            cnv_mut,
            time: 0.0,
            event: true,
        });
    }

    let horizon = if cfg.censoring_rate > 0.0 {
        Some(solve_censoring_horizon(&rates, cfg.censoring_rate))
    } else {
        None
    };
    for (i, p) in patients.iter_mut().enumerate() {
        let t = event_times[i];
        match horizon {
            Some(h) => {
                let c = censor_draws[i] * h;
                // ties resolve as death
                if t <= c {
                    p.time = t;
                    p.event = true;
                } else {
                    p.time = c.max(f64::MIN_POSITIVE);
                    p.event = false;
                }
            }
            None => {
                p.time = t;
                p.event = true;
            }
        }
    }

    let cohort = Cohort {
        schema: schema.clone(),
        patients,
        latent_risk: Some(latent),
    };
    cohort.validate()?;
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Purpose;

    fn stream(seed: u64) -> RngStream {
        RngStream::new(seed, Purpose::Datagen)
    }

    #[test]
    fn no_censoring_means_all_events() {
        let cfg = SynthConfig {
            censoring_rate: 0.0,
            ..Default::default()
        };
        let c = generate_cohort(50, &Schema::default(), &cfg, stream(1)).unwrap();
        assert!(c.patients.iter().all(|p| p.event));
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig::default();
        let a = generate_cohort(20, &Schema::default(), &cfg, stream(7)).unwrap();
        let b = generate_cohort(20, &Schema::default(), &cfg, stream(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(20, &Schema::default(), &cfg, stream(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn censoring_rate_is_close_to_target() {
        let cfg = SynthConfig {
            censoring_rate: 0.3,
            ..Default::default()
        };
        let c = generate_cohort(2000, &small_schema(), &cfg, stream(3)).unwrap();
        let frac = c.patients.iter().filter(|p| !p.event).count() as f64 / 2000.0;
        assert!((frac - 0.3).abs() < 0.04, "censored fraction {frac}");
    }

    #[test]
    fn horizon_solver_hits_target() {
        let rates = [0.5, 1.0, 2.0, 4.0];
        for target in [0.05, 0.3, 0.8] {
            let h = solve_censoring_horizon(&rates, target);
            assert!((expected_censoring(&rates, h) - target).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = Schema::default();
        let cfg = SynthConfig::default();
        assert!(generate_cohort(1, &s, &cfg, stream(1)).is_err());
        let bad = SynthConfig {
            censoring_rate: 1.0,
            ..Default::default()
        };
        assert!(generate_cohort(10, &s, &bad, stream(1)).is_err());
    }

    #[test]
    fn holes_leave_valid_grids() {
        let cfg = SynthConfig {
            hole_rate: 0.3,
            ..Default::default()
        };
        let c = generate_cohort(10, &Schema::default(), &cfg, stream(5)).unwrap();
        assert!(c.patients.iter().any(|p| p.small.len() < 64));
        c.validate().unwrap();
    }

    fn small_schema() -> Schema {
        Schema {
            d_x: 4,
            rna_dim: 8,
            cnv_mut_dim: 8,
            small: super::super::GridShape::new(2, 2),
            medium: super::super::GridShape::new(2, 2),
            large: super::super::GridShape::new(1, 1),
        }
    }
}
