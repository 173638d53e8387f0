//! Concordance index, Kaplan-Meier curves, median-risk stratification and
//! the two-sample log-rank test.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::special::chi_square_sf;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub value: f64,
    pub comparable: u64,
    /// Concordant pairs count 2, risk ties 1.
    pub half_units: u64,
}

fn check_lengths(risk: &[f64], t: &[f64], delta: &[bool]) -> Result<()> {
    if risk.len() != t.len() || t.len() != delta.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} risks, {} times, {} events",
            risk.len(),
            t.len(),
            delta.len()
        )));
    }
    if let Some(x) = risk.iter().chain(t).find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite value {x} in survival evaluation")));
    }
    Ok(())
}

/// Harrell's C-index. A pair is comparable when the earlier time is an
/// event and the times differ; it is concordant when the earlier patient
/// has the higher risk, and counts one half on a risk tie.
pub fn concordance(risk: &[f64], t: &[f64], delta: &[bool]) -> Result<Concordance> {
    check_lengths(risk, t, delta)?;
    let n = risk.len();
    let mut comparable = 0u64;
    let mut half_units = 0u64;
    for i in 0..n {
        if !delta[i] {
            continue;
        }
        for j in 0..n {
            if t[i] < t[j] {
                comparable += 1;
                if risk[i] > risk[j] {
                    half_units += 2;
                } else if risk[i] == risk[j] {
                    half_units += 1;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedCIndex);
    }
    Ok(Concordance {
        value: half_units as f64 / (2 * comparable) as f64,
        comparable,
        half_units,
    })
}

pub fn c_index(risk: &[f64], t: &[f64], delta: &[bool]) -> Result<f64> {
    concordance(risk, t, delta).map(|c| c.value)
}

/// Product-limit estimate at the distinct event times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub n: usize,
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `S(x)`: right-continuous step function, 1 before the first event.
    pub fn survival_at(&self, x: f64) -> f64 {
        match self.times.iter().rposition(|&t| t <= x) {
            Some(k) => self.survival[k],
            None => 1.0,
        }
    }
}

pub fn km_curve(t: &[f64], delta: &[bool]) -> Result<KmCurve> {
    if t.is_empty() {
        return Err(Error::invalid("Kaplan-Meier needs at least one subject"));
    }
    if t.len() != delta.len() {
        return Err(Error::invalid("Kaplan-Meier times and events differ in length"));
    }
    if let Some(x) = t.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite time {x}")));
    }
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
    let mut curve = KmCurve {
        n: t.len(),
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut s = 1.0;
    let mut remaining = t.len();
    let mut k = 0;
    while k < order.len() {
        let time = t[order[k]];
        let mut deaths = 0;
        let mut leaving = 0;
        while k < order.len() && t[order[k]] == time {
            deaths += usize::from(delta[order[k]]);
            leaving += 1;
            k += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / remaining as f64;
            curve.times.push(time);
            curve.survival.push(s);
            curve.at_risk.push(remaining);
            curve.events.push(deaths);
        }
        remaining -= leaving;
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianSplit {
    pub median: f64,
    pub low: Vec<usize>,
    pub high: Vec<usize>,
    /// One group is empty.
    pub degenerate: bool,
}

/// Risks strictly above the median go high; ties at the median go low.
pub fn median_risk_split(risk: &[f64]) -> Result<MedianSplit> {
    if risk.len() < 2 {
        return Err(Error::invalid(format!("median split needs at least 2 risks, got {}", risk.len())));
    }
    if let Some(x) = risk.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite risk {x}")));
    }
    let mut sorted = risk.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let (high, low): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| risk[i] > median);
    let degenerate = high.is_empty() || low.is_empty();
    Ok(MedianSplit {
        median,
        low,
        high,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample log-rank test, chi-square with one degree of freedom.
pub fn log_rank_test(a: (&[f64], &[bool]), b: (&[f64], &[bool])) -> Result<LogRank> {
    if a.0.is_empty() || b.0.is_empty() {
        return Err(Error::UndefinedLogRank("both groups must be non-empty".into()));
    }
    if a.0.len() != a.1.len() || b.0.len() != b.1.len() {
        return Err(Error::invalid("log-rank times and events differ in length"));
    }
    let mut pooled: Vec<(f64, bool, bool)> = Vec::with_capacity(a.0.len() + b.0.len());
    pooled.extend(a.0.iter().zip(a.1).map(|(&t, &d)| (t, d, true)));
    pooled.extend(b.0.iter().zip(b.1).map(|(&t, &d)| (t, d, false)));
    if let Some(x) = pooled.iter().find(|p| !p.0.is_finite()) {
        return Err(Error::invalid(format!("non-finite time {}", x.0)));
    }
    if !pooled.iter().any(|p| p.1) {
        return Err(Error::UndefinedLogRank("no events in either group".into()));
    }
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut n = pooled.len() as f64;
    let mut n1 = a.0.len() as f64;
    let (mut observed_minus_expected, mut variance) = (0.0, 0.0);
    let mut k = 0;
    while k < pooled.len() {
        let time = pooled[k].0;
        let (mut d, mut d1, mut leave, mut leave1) = (0.0, 0.0, 0.0, 0.0);
        while k < pooled.len() && pooled[k].0 == time {
            let (_, event, in_a) = pooled[k];
            if event {
                d += 1.0;
                if in_a {
                    d1 += 1.0;
                }
            }
            leave += 1.0;
            if in_a {
                leave1 += 1.0;
            }
            k += 1;
        }
        if d > 0.0 {
            observed_minus_expected += d1 - d * n1 / n;
            if n > 1.0 {
                variance += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n1 -= leave1;
    }
    if variance <= 0.0 {
        return Err(Error::UndefinedLogRank("zero variance under the null".into()));
    }
    let statistic = observed_minus_expected * observed_minus_expected / variance;
    Ok(LogRank {
        statistic,
        p_value: chi_square_sf(statistic, 1.0),
    })
}

/// Writes curves as `time,survival,at_risk,group`, each starting at
/// `(0, 1, n)`.
pub fn write_km_csv<W: Write>(out: &mut W, curves: &[(&str, &KmCurve)]) -> std::io::Result<()> {
    writeln!(out, "time,survival,at_risk,group")?;
    for (group, curve) in curves {
        writeln!(out, "0,1,{},{group}", curve.n)?;
        for k in 0..curve.times.len() {
            writeln!(out, "{},{},{},{group}", curve.times[k], curve.survival[k], curve.at_risk[k])?;
        }
    }
    Ok(())
}

pub fn save_km_csv(path: &Path, curves: &[(&str, &KmCurve)]) -> Result<()> {
    let mut buf = Vec::new();
    write_km_csv(&mut buf, curves).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
