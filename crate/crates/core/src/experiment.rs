//! Cross-validated training, held-out evaluation and run artifacts.
//!
//! Every random choice is drawn from a stream keyed by the run seed, the
//! purpose and the fold, so a report is a pure function of
//! `(config, cohort)`. Folds are independent and may run in parallel.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataio::{kfold_split, Cohort, Schema};
use crate::error::{Error, Result};
use crate::eval::{c_index, log_rank_test, median_risk_split, LogRank, MedianSplit};
use crate::model::{Foresee, ModelConfig, Pass, PreparedPatient};
use crate::numerics::{Adam, AdamConfig, Mat, ParamStore, Purpose, RngStream, Tape, Var};
use crate::survival::{cox_loss, LossWeights, RiskOutput};
use crate::trimae::{masked_mse, sample_mask, Branch, MaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64-wide model that trains on a laptop CPU in minutes.
    Desk,
    /// 500-wide model, batch 50, 50 epochs.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::invalid(format!("unknown preset `{s}`, expected desk or paper"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 50,
            epochs: 50,
            folds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        match preset {
            Preset::Desk => {
                // 64-wide model; small batches give the decoder enough steps
                // in 12 epochs
                train.batch_size = 8;
                train.epochs = 12;
                train.optimizer.lr = 1e-3;
            }
            Preset::Paper => {
                model.cft.d_model = 500;
                // 5 heads keep the 250-wide decoder evenly split
                model.cft.heads = 5;
                model.cft.ffn_dim = 1000;
                model.cft.fusion_channels = 250;
            }
        }
        Self {
            model,
            train,
            loss: LossWeights::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        if t.folds < 2 {
            return Err(Error::invalid(format!("cross-validation needs at least 2 folds, got {}", t.folds)));
        }
        let o = &t.optimizer;
        let rates = [o.lr, o.weight_decay, o.beta1, o.beta2, o.eps];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) || o.lr == 0.0 || o.beta1 >= 1.0 || o.beta2 >= 1.0 {
            return Err(Error::invalid("optimizer settings out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean of the batch objectives.
    pub total: f64,
    pub cox: [f64; 3],
    pub trimae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub id: String,
    pub risk: f64,
    pub time: f64,
    pub event: bool,
}

pub fn risk_csv(rows: &[RiskRow]) -> String {
    let mut s = String::from("id,risk,time,event\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.id, r.risk, r.time, u8::from(r.event)).expect("string write");
    }
    s
}

pub fn parse_risk_csv(text: &str, source: &Path) -> Result<Vec<RiskRow>> {
    let mut lines = text.lines();
    let bad = |line: usize, why: &str| Error::Schema(format!("{}: line {line}: {why}", source.display()));
    if lines.next().map(str::trim) != Some("id,risk,time,event") {
        return Err(bad(1, "expected header `id,risk,time,event`"));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 4 {
            return Err(bad(k + 2, "expected 4 fields"));
        }
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        rows.push(RiskRow {
            id: f[0].to_string(),
            risk: num(f[1]).ok_or_else(|| bad(k + 2, "bad risk"))?,
            time: num(f[2]).ok_or_else(|| bad(k + 2, "bad time"))?,
            event: match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(k + 2, "event must be 0 or 1")),
            },
        });
    }
    Ok(rows)
}

/// A model with its parameters.
pub struct Trained {
    pub model: Foresee,
    pub store: ParamStore,
    pub losses: Vec<EpochLoss>,
}

struct BatchResult {
    total: f64,
    cox: [f64; 3],
    trimae: f64,
}

/// One optimiser step on `batch`. Each patient gets its own tape; the Cox
/// terms couple patients only through their scalar outputs, so their exact
/// derivatives seed the per-patient backward passes.
fn train_batch(
    model: &Foresee,
    store: &mut ParamStore,
    adam: &mut Adam,
    batch: &[&PreparedPatient],
    weights: &LossWeights,
    streams: &mut dyn FnMut(usize) -> (rand_chacha::ChaCha8Rng, rand_chacha::ChaCha8Rng),
) -> Result<BatchResult> {
    let b = batch.len() as f64;
    let grads = {
        let mut passes = Vec::with_capacity(batch.len());
        for (i, p) in batch.iter().enumerate() {
            let (mut dropout, mut masking) = streams(i);
            let mut tape = Tape::new(store);
            let pass = model.forward(
                &mut tape,
                p,
                Pass::Train {
                    dropout: &mut dropout,
                    masking: &mut masking,
                },
            )?;
            passes.push((tape, pass));
        }
        let t: Vec<f64> = batch.iter().map(|p| p.time).collect();
        let d: Vec<bool> = batch.iter().map(|p| p.event).collect();
        let mut cox = [0.0; 3];
        let mut cox_grads = Vec::with_capacity(3);
        for m in 0..3 {
            let o: Vec<f64> = passes.iter().map(|(tape, pass)| tape.scalar(pass.outputs[m])).collect();
            let c = cox_loss(&o, &t, &d)?;
            cox[m] = c.value;
            cox_grads.push(c.grad);
        }
        let mut trimae = 0.0;
        let mut buf = store.grad_buffer();
        for (i, (tape, pass)) in passes.iter().enumerate() {
            let mut seeds: Vec<(Var, Mat)> = (0..3)
                .map(|m| (pass.outputs[m], Mat::from_elem((1, 1), weights.lambda_m[m] * cox_grads[m][i])))
                .collect();
            if let Some(l) = pass.trimae_loss {
                trimae += tape.scalar(l) / b;
                seeds.push((l, Mat::from_elem((1, 1), weights.lambda_0 / b)));
            }
            let g = tape.backward(&seeds);
            tape.accumulate_param_grads(&g, &mut buf);
        }
        let total = crate::survival::total_loss(cox, trimae, weights);
        if !total.is_finite() {
            return Err(Error::Divergence(format!("non-finite batch loss {total}")));
        }
        (buf, BatchResult { total, cox, trimae })
    };
    store.set_grads(&grads.0);
    adam.step(store)?;
    Ok(grads.1)
}

/// Trains a fresh model on `train` patients.
pub fn train_model(cfg: &RunConfig, schema: &Schema, records: &[crate::dataio::PatientRecord], fold: usize) -> Result<Trained> {
    cfg.validate()?;
    let init = RngStream::new(cfg.seed, Purpose::Init).child(fold as u64);
    let (model, mut store) = Foresee::new(&cfg.model, schema, &init)?;
    let train = model.prepare_all(records)?;
    if train.is_empty() {
        return Err(Error::invalid("no training patients"));
    }
    let mut adam = Adam::new(cfg.train.optimizer.clone(), &store);
    let shuffle = RngStream::new(cfg.seed, Purpose::Shuffle).child(fold as u64);
    let dropout = RngStream::new(cfg.seed, Purpose::Dropout).child(fold as u64);
    let masking = RngStream::new(cfg.seed, Purpose::Masking).child(fold as u64);
    let n = train.len();
    let mut losses = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle.substream(epoch as u64));
        let mut acc = EpochLoss {
            epoch,
            total: 0.0,
            cox: [0.0; 3],
            trimae: 0.0,
        };
        let mut batches = 0;
        for (k, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch: Vec<&PreparedPatient> = chunk.iter().map(|&i| &train[i]).collect();
            let base = (epoch * n + k * cfg.train.batch_size) as u64;
            let mut streams = |i: usize| (dropout.substream(base + i as u64), masking.substream(base + i as u64));
            let r = train_batch(&model, &mut store, &mut adam, &batch, &cfg.loss, &mut streams).map_err(|e| match e {
                Error::Divergence(why) => Error::Divergence(format!(
                    "fold {fold}, epoch {epoch}: {why}; last good epoch {}",
                    epoch.checked_sub(1).map_or("none".to_string(), |e| e.to_string())
                )),
                other => other,
            })?;
            acc.total += r.total;
            acc.trimae += r.trimae;
            for m in 0..3 {
                acc.cox[m] += r.cox[m];
            }
            batches += 1;
        }
        let scale = 1.0 / batches as f64;
        acc.total *= scale;
        acc.trimae *= scale;
        acc.cox.iter_mut().for_each(|c| *c *= scale);
        log::debug!("fold {fold} epoch {epoch}: loss {:.4}", acc.total);
        losses.push(acc);
    }
    Ok(Trained { model, store, losses })
}

/// Picks `round(frac · n)` tokens of `branch` to delete, keeping at least
/// one.
pub fn deletion_indices<R: Rng + ?Sized>(counts: [usize; 3], branch: Branch, frac: f64, rng: &mut R) -> Result<[Vec<usize>; 3]> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::invalid(format!("deletion fraction must be in [0, 1), got {frac}")));
    }
    let n = counts[branch.index()];
    let k = ((frac * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    out[branch.index()] = idx;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deletion {
    pub modality: Branch,
    pub fraction: f64,
}

/// Held-out risks, with optional token deletion drawn from `seed`.
pub fn predict_all(
    model: &Foresee,
    store: &ParamStore,
    patients: &[PreparedPatient],
    deletion: Option<Deletion>,
    seed: u64,
) -> Result<Vec<RiskOutput>> {
    let stream = RngStream::new(seed, Purpose::Deletion);
    patients
        .iter()
        .enumerate()
        .map(|(i, p)| match deletion {
            None => model.predict(store, p, None),
            Some(d) => {
                let missing = deletion_indices(model.token_counts(p), d.modality, d.fraction, &mut stream.substream(i as u64))?;
                model.predict(store, p, Some(&missing))
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionStats {
    /// Masked-position MSE of the autoencoder, averaged over branches.
    pub model_mse: f64,
    /// Same positions filled with the training mean of each position.
    pub baseline_mse: f64,
}

/// Reconstruction error on `test` patients under freshly drawn masks,
/// against per-(modality, position) mean imputation fitted on `train`.
pub fn reconstruction_stats(
    model: &Foresee,
    store: &ParamStore,
    train: &[PreparedPatient],
    test: &[PreparedPatient],
    seed: u64,
) -> Result<Option<ReconstructionStats>> {
    if !model.trimae.cfg.enabled || test.is_empty() || train.is_empty() {
        return Ok(None);
    }
    let d = model.cfg.d_model();
    let mut sums: Vec<Mat> = model.trimae.positions.iter().map(|&n| Mat::zeros((n, d))).collect();
    let mut counts: Vec<Vec<usize>> = model.trimae.positions.iter().map(|&n| vec![0; n]).collect();
    for p in train {
        let mut tape = Tape::new(store);
        let enc = model.encode(&mut tape, p)?;
        for b in 0..3 {
            let tok = tape.value(enc.tokens[b]);
            for (row, &pos) in enc.positions[b].iter().enumerate() {
                let mut s = sums[b].row_mut(pos);
                s += &tok.row(row);
                counts[b][pos] += 1;
            }
        }
    }
    let means: Vec<Mat> = (0..3)
        .map(|b| {
            let total: usize = counts[b].iter().sum();
            let global = sums[b].sum_axis(ndarray::Axis(0)) / total.max(1) as f64;
            let mut m = sums[b].clone();
            for (pos, &c) in counts[b].iter().enumerate() {
                if c == 0 {
                    m.row_mut(pos).assign(&global);
                } else {
                    m.row_mut(pos).mapv_inplace(|v| v / c as f64);
                }
            }
            m
        })
        .collect();

    let stream = RngStream::new(seed, Purpose::Masking).child(u64::MAX);
    let cfg = &model.trimae.cfg;
    let (mut model_mse, mut baseline_mse) = (0.0, 0.0);
    for (i, p) in test.iter().enumerate() {
        let mut rng = stream.substream(i as u64);
        let mut tape = Tape::new(store);
        let enc = model.encode(&mut tape, p)?;
        let specs: Vec<MaskSpec> = Branch::ALL
            .iter()
            .map(|&b| sample_mask(enc.positions[b.index()].len(), cfg.mask_ratio, b, cfg.allow_low_mask, &mut rng))
            .collect::<Result<_>>()?;
        let specs: [MaskSpec; 3] = specs.try_into().expect("three branches");
        let pos = [&enc.positions[0][..], &enc.positions[1][..], &enc.positions[2][..]];
        let recon = model.trimae.reconstruct(&mut tape, enc.tokens, pos, &specs, [true; 3])?;
        for b in 0..3 {
            let original = tape.value(enc.tokens[b]);
            let r = tape.value(recon[b].expect("decoded"));
            model_mse += masked_mse(r, original, &specs[b].masked) / 3.0;
            let imputed = means[b].select(ndarray::Axis(0), &enc.positions[b]);
            baseline_mse += masked_mse(&imputed, original, &specs[b].masked) / 3.0;
        }
    }
    let n = test.len() as f64;
    Ok(Some(ReconstructionStats {
        model_mse: model_mse / n,
        baseline_mse: baseline_mse / n,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub c_index: Option<f64>,
    /// C-index of the generator's true risk on the same held-out patients.
    pub oracle_c_index: Option<f64>,
    pub skipped: Option<String>,
    pub reconstruction: Option<ReconstructionStats>,
    pub losses: Vec<EpochLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankSummary {
    pub n_low: usize,
    pub n_high: usize,
    pub median: Option<f64>,
    pub result: Option<LogRank>,
    pub note: Option<String>,
}

pub fn stratify(rows: &[RiskRow]) -> Result<(MedianSplit, LogRankSummary)> {
    let risk: Vec<f64> = rows.iter().map(|r| r.risk).collect();
    let split = median_risk_split(&risk)?;
    let mut summary = LogRankSummary {
        n_low: split.low.len(),
        n_high: split.high.len(),
        median: Some(split.median),
        result: None,
        note: None,
    };
    if split.degenerate {
        summary.note = Some("degenerate median split: all risks on one side".into());
        return Ok((split, summary));
    }
    let group = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) { (idx.iter().map(|&i| rows[i].time).collect(), idx.iter().map(|&i| rows[i].event).collect()) };
    let (lt, ld) = group(&split.low);
    let (ht, hd) = group(&split.high);
    match log_rank_test((&lt, &ld), (&ht, &hd)) {
        Ok(r) => summary.result = Some(r),
        Err(Error::UndefinedLogRank(why)) => summary.note = Some(why),
        Err(e) => return Err(e),
    }
    Ok((split, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config: RunConfig,
    pub n_patients: usize,
    pub folds: Vec<FoldReport>,
    pub c_index_mean: Option<f64>,
    /// Population standard deviation over evaluated folds.
    pub c_index_std: Option<f64>,
    pub oracle_c_index_mean: Option<f64>,
    /// Median split of the pooled held-out risks.
    pub log_rank: LogRankSummary,
    pub reconstruction: Option<ReconstructionStats>,
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub struct FoldOutcome {
    pub report: FoldReport,
    pub held_out: Vec<String>,
    pub risks: Vec<RiskRow>,
    pub trained: Option<Trained>,
}

pub struct CvOutcome {
    pub report: MetricsReport,
    pub folds: Vec<FoldOutcome>,
    pub wall_seconds: f64,
}

fn run_fold(cfg: &RunConfig, cohort: &Cohort, fold: usize, train_idx: &[usize], test_idx: &[usize]) -> Result<FoldOutcome> {
    let train = cohort.subset(train_idx);
    let test = cohort.subset(test_idx);
    let held_out: Vec<String> = test.patients.iter().map(|p| p.id.clone()).collect();
    let oracle = test
        .latent_risk
        .as_ref()
        .and_then(|z| c_index(z, &test.times(), &test.events()).ok());
    let mut report = FoldReport {
        fold,
        n_train: train.len(),
        n_test: test.len(),
        c_index: None,
        oracle_c_index: oracle,
        skipped: None,
        reconstruction: None,
        losses: Vec::new(),
    };
    if !train.patients.iter().any(|p| p.event) {
        log::warn!("fold {fold}: no events among training patients, skipping");
        report.skipped = Some("no events among training patients".into());
        return Ok(FoldOutcome {
            report,
            held_out,
            risks: Vec::new(),
            trained: None,
        });
    }
    let trained = train_model(cfg, &cohort.schema, &train.patients, fold)?;
    let test_prepared = trained.model.prepare_all(&test.patients)?;
    let outputs = predict_all(&trained.model, &trained.store, &test_prepared, None, cfg.seed)?;
    let risks: Vec<RiskRow> = test
        .patients
        .iter()
        .zip(&outputs)
        .map(|(p, o)| RiskRow {
            id: p.id.clone(),
            risk: o.fused_risk,
            time: p.time,
            event: p.event,
        })
        .collect();
    let r: Vec<f64> = risks.iter().map(|r| r.risk).collect();
    match c_index(&r, &test.times(), &test.events()) {
        Ok(c) => report.c_index = Some(c),
        Err(Error::UndefinedCIndex) => {
            log::warn!("fold {fold}: no comparable held-out pairs");
            report.skipped = Some("no comparable held-out pairs".into());
        }
        Err(e) => return Err(e),
    }
    let train_prepared = trained.model.prepare_all(&train.patients)?;
    report.reconstruction = reconstruction_stats(&trained.model, &trained.store, &train_prepared, &test_prepared, cfg.seed)?;
    report.losses = trained.losses.clone();
    Ok(FoldOutcome {
        report,
        held_out,
        risks,
        trained: Some(trained),
    })
}

/// k-fold cross-validation of `cfg` on `cohort`.
pub fn cross_validate(cfg: &RunConfig, cohort: &Cohort) -> Result<CvOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    cohort.validate()?;
    let split = kfold_split(cohort.len(), cfg.train.folds, &RngStream::new(cfg.seed, Purpose::Folds))?;
    let folds: Vec<FoldOutcome> = (0..split.k())
        .into_par_iter()
        .map(|f| run_fold(cfg, cohort, f, &split.train(f), split.test(f)))
        .collect::<Result<_>>()?;

    let cs: Vec<f64> = folds.iter().filter_map(|f| f.report.c_index).collect();
    let oracle: Vec<f64> = folds.iter().filter_map(|f| f.report.oracle_c_index).collect();
    let pooled: Vec<RiskRow> = folds.iter().flat_map(|f| f.risks.iter().cloned()).collect();
    let log_rank = if pooled.len() >= 2 {
        stratify(&pooled)?.1
    } else {
        LogRankSummary {
            n_low: 0,
            n_high: 0,
            median: None,
            result: None,
            note: Some("fewer than two held-out risks".into()),
        }
    };
    let recon: Vec<ReconstructionStats> = folds.iter().filter_map(|f| f.report.reconstruction).collect();
    let reconstruction = (!recon.is_empty()).then(|| ReconstructionStats {
        model_mse: recon.iter().map(|r| r.model_mse).sum::<f64>() / recon.len() as f64,
        baseline_mse: recon.iter().map(|r| r.baseline_mse).sum::<f64>() / recon.len() as f64,
    });
    let report = MetricsReport {
        seed: cfg.seed,
        config: cfg.clone(),
        n_patients: cohort.len(),
        c_index_mean: mean_std(&cs).map(|m| m.0),
        c_index_std: mean_std(&cs).map(|m| m.1),
        oracle_c_index_mean: mean_std(&oracle).map(|m| m.0),
        folds: folds.iter().map(|f| f.report.clone()).collect(),
        log_rank,
        reconstruction,
    };
    Ok(CvOutcome {
        report,
        folds,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schema: Schema,
    pub seed: u64,
    pub fold: usize,
    pub held_out: Vec<String>,
}

pub fn report_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `timing.json`, `risks_fold<k>.csv` and
/// `fold<k>.ckpt` under `out`. Returns the written paths.
pub fn write_outputs(out: &Path, outcome: &CvOutcome) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let report = out.join("report.json");
    write_file(&report, report_json(&outcome.report)?)?;
    written.push(report);
    // wall time lives apart so the report stays byte-identical across runs
    let timing = out.join("timing.json");
    write_file(&timing, report_json(&serde_json::json!({ "wall_seconds": outcome.wall_seconds }))?)?;
    written.push(timing);
    for f in &outcome.folds {
        let k = f.report.fold;
        let risks = out.join(format!("risks_fold{k}.csv"));
        write_file(&risks, risk_csv(&f.risks))?;
        written.push(risks);
        if let Some(t) = &f.trained {
            let meta = CheckpointMeta {
                model: t.model.cfg.clone(),
                schema: t.model.schema.clone(),
                seed: outcome.report.seed,
                fold: k,
                held_out: f.held_out.clone(),
            };
            let ckpt = out.join(format!("fold{k}.ckpt"));
            checkpoint::save(&ckpt, &meta, &t.store)?;
            written.push(ckpt);
        }
    }
    Ok(written)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Foresee, ParamStore)> {
    let (meta, tensors): (CheckpointMeta, _) = checkpoint::load(path)?;
    let (model, mut store) = Foresee::new(&meta.model, &meta.schema, &RngStream::new(meta.seed, Purpose::Init))?;
    checkpoint::load_into(&mut store, tensors)?;
    Ok((meta, model, store))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: usize,
    pub seed: u64,
    pub n_patients: usize,
    pub deletion: Option<Deletion>,
    pub trimae_enabled: bool,
    pub c_index: Option<f64>,
    pub log_rank: LogRankSummary,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub deletion: Option<Deletion>,
    /// Zero-fill deleted tokens instead of reconstructing them.
    pub no_trimae: bool,
    /// Score every cohort patient instead of the checkpoint's held-out fold.
    pub all_patients: bool,
}

/// Scores a checkpoint on its held-out patients from `cohort`.
pub fn evaluate_checkpoint(path: &Path, cohort: &Cohort, opts: &EvalOptions) -> Result<(EvalReport, Vec<RiskRow>)> {
    let (meta, mut model, store) = load_checkpoint(path)?;
    if meta.schema != cohort.schema {
        return Err(Error::Schema(format!(
            "checkpoint schema {:?} does not match cohort schema {:?}",
            meta.schema, cohort.schema
        )));
    }
    if opts.no_trimae {
        model.trimae.cfg.enabled = false;
    }
    let records: Vec<&crate::dataio::PatientRecord> = if opts.all_patients {
        cohort.patients.iter().collect()
    } else {
        let mut recs = Vec::with_capacity(meta.held_out.len());
        for id in &meta.held_out {
            let rec = cohort.patients.iter().find(|p| &p.id == id).ok_or_else(|| {
                Error::Schema(format!("held-out patient `{id}` from the checkpoint is not in the cohort"))
            })?;
            recs.push(rec);
        }
        recs
    };
    let prepared: Vec<PreparedPatient> = records.iter().map(|r| model.prepare(r)).collect::<Result<_>>()?;
    let outputs = predict_all(&model, &store, &prepared, opts.deletion, meta.seed)?;
    let rows: Vec<RiskRow> = prepared
        .iter()
        .zip(&outputs)
        .map(|(p, o)| RiskRow {
            id: p.id.clone(),
            risk: o.fused_risk,
            time: p.time,
            event: p.event,
        })
        .collect();
    let r: Vec<f64> = rows.iter().map(|r| r.risk).collect();
    let t: Vec<f64> = rows.iter().map(|r| r.time).collect();
    let d: Vec<bool> = rows.iter().map(|r| r.event).collect();
    let c = match c_index(&r, &t, &d) {
        Ok(c) => Some(c),
        Err(Error::UndefinedCIndex) => None,
        Err(e) => return Err(e),
    };
    let log_rank = if rows.len() >= 2 {
        stratify(&rows)?.1
    } else {
        LogRankSummary {
            n_low: rows.len(),
            n_high: 0,
            median: None,
            result: None,
            note: Some("fewer than two patients".into()),
        }
    };
    Ok((
        EvalReport {
            fold: meta.fold,
            seed: meta.seed,
            n_patients: rows.len(),
            deletion: opts.deletion,
            trimae_enabled: model.trimae.cfg.enabled,
            c_index: c,
            log_rank,
        },
        rows,
    ))
}
