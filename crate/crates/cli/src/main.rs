//! `foresee` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure (I/O, divergence).

mod config;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foresee::cft::Views;
use foresee::dataio::{generate_cohort, read_cohort, read_survival, write_cohort, Schema, SynthConfig};
use foresee::eval::{km_curve, save_km_csv};
use foresee::experiment::{
    cross_validate, evaluate_checkpoint, parse_risk_csv, report_json, risk_csv, stratify, write_outputs, Deletion,
    EvalOptions, Preset, RiskRow,
};
use foresee::hae::HaeVariant;
use foresee::numerics::{Purpose, RngStream};
use foresee::trimae::Branch;
use foresee::Error;

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "foresee", version, about = "Multimodal survival prediction on patch graphs and omics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort with a known latent hazard.
    Generate(GenerateArgs),
    /// Cross-validate a model and write the report, risks and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint, optionally deleting tokens of one modality.
    Eval(EvalArgs),
    /// Kaplan-Meier curves and log-rank test of a median risk split.
    Km(KmArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Expected censored fraction.
    #[arg(long)]
    censoring: Option<f64>,
    /// Probability that a grid cell holds no patch.
    #[arg(long)]
    hole_rate: Option<f64>,
    /// Scale of the true log relative hazard.
    #[arg(long)]
    risk_strength: Option<f64>,
    /// JSON file with the cohort schema (dimensions and grid shapes).
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// Pathology views, e.g. `s`, `s,m` or `s,m,l`.
    #[arg(long, value_parser = parse_views)]
    views: Option<Views>,
    /// full, no_cta, no_cna or plain.
    #[arg(long, value_parser = parse_variant)]
    hae_variant: Option<HaeVariant>,
    #[arg(long)]
    no_trimae: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Accept mask ratios below 0.8.
    #[arg(long)]
    allow_low_mask: bool,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    /// Omics values per token.
    #[arg(long)]
    chunk: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Modality whose tokens are deleted: P, R or CM.
    #[arg(long, value_parser = parse_branch)]
    drop_modality: Option<Branch>,
    #[arg(long, requires = "drop_modality")]
    drop_frac: Option<f64>,
    /// Zero-fill deleted tokens instead of reconstructing them.
    #[arg(long)]
    no_trimae: bool,
    /// Score every patient, not only the checkpoint's held-out fold.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct KmArgs {
    /// Risk CSV (`id,risk,time,event`); repeat to pool folds.
    #[arg(long, required = true)]
    risks: Vec<PathBuf>,
    /// Survival CSV (`id,time,event`).
    #[arg(long)]
    survival: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_views(s: &str) -> Result<Views, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<HaeVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_branch(s: &str) -> Result<Branch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn env_seed() -> Option<String> {
    std::env::var(config::SEED_ENV).ok()
}

fn create_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let seed = config::resolve_seed(a.seed, None, env_seed().as_deref())?;
    let schema: Schema = match &a.schema {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read schema {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad schema {}: {e}", p.display())))?
        }
        None => Schema::default(),
    };
    schema.validate()?;
    let mut synth = SynthConfig::default();
    if let Some(c) = a.censoring {
        synth.censoring_rate = c;
    }
    if let Some(h) = a.hole_rate {
        if !(0.0..1.0).contains(&h) {
            return Err(CliError::Usage(format!("hole rate must be in [0, 1), got {h}")));
        }
        synth.hole_rate = h;
    }
    if let Some(k) = a.risk_strength {
        if !k.is_finite() {
            return Err(CliError::Usage("risk strength must be finite".into()));
        }
        synth.risk_strength = k;
    }
    let cohort = generate_cohort(a.n, &schema, &synth, RngStream::new(seed, Purpose::Datagen))?;
    write_cohort(&cohort, &a.out)?;
    let censored = cohort.patients.iter().filter(|p| !p.event).count();
    out!("wrote {} patients to {}", cohort.len(), a.out.display());
    out!(
        "schema: d_x {} | rna {} | cnv/mut {} | grids s {}x{} m {}x{} l {}x{}",
        schema.d_x,
        schema.rna_dim,
        schema.cnv_mut_dim,
        schema.small.rows,
        schema.small.cols,
        schema.medium.rows,
        schema.medium.cols,
        schema.large.rows,
        schema.large.cols
    );
    out!(
        "censored: {censored} ({:.3}) | seed {seed}",
        censored as f64 / cohort.len() as f64
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let (mut cfg, file_seed) = config::load(a.preset, a.config.as_deref())?;
    cfg.seed = config::resolve_seed(a.seed, file_seed.then_some(cfg.seed), env_seed().as_deref())?;
    let m = &mut cfg.model;
    if let Some(v) = a.views {
        m.cft.views = v;
    }
    if let Some(v) = a.hae_variant {
        m.hae.variant = v;
    }
    if a.no_trimae {
        m.trimae.enabled = false;
    }
    if let Some(d) = a.dropout {
        m.dropout = d;
    }
    if let Some(r) = a.mask_ratio {
        m.trimae.mask_ratio = r;
    }
    if a.allow_low_mask {
        m.trimae.allow_low_mask = true;
    }
    if let Some(d) = a.d_model {
        m.cft.d_model = d;
    }
    if let Some(c) = a.chunk {
        m.hae.chunk = c;
    }
    let t = &mut cfg.train;
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(l) = a.lr {
        t.optimizer.lr = l;
    }
    if let Some(w) = a.weight_decay {
        t.optimizer.weight_decay = w;
    }
    if let Some(f) = a.folds {
        t.folds = f;
    }
    cfg.validate()?;

    let cohort = read_cohort(&a.cohort)?;
    log::info!("training on {} patients, {} folds, seed {}", cohort.len(), cfg.train.folds, cfg.seed);
    let outcome = cross_validate(&cfg, &cohort)?;
    write_outputs(&a.out, &outcome)?;

    let r = &outcome.report;
    for f in &r.folds {
        match (f.c_index, &f.skipped) {
            (Some(c), _) => out!("fold {}: C-index {c:.4} (n_test {})", f.fold, f.n_test),
            (None, why) => out!("fold {}: skipped ({})", f.fold, why.as_deref().unwrap_or("no score")),
        }
    }
    if let (Some(m), Some(s)) = (r.c_index_mean, r.c_index_std) {
        out!("C-index {m:.4} ± {s:.4}");
    }
    if let Some(o) = r.oracle_c_index_mean {
        out!("oracle C-index {o:.4}");
    }
    match (&r.log_rank.result, &r.log_rank.note) {
        (Some(lr), _) => out!("log-rank p {:.3e} (chi2 {:.3})", lr.p_value, lr.statistic),
        (None, Some(n)) => out!("log-rank: {n}"),
        (None, None) => {}
    }
    out!("wall time {:.1}s | report {}", outcome.wall_seconds, a.out.join("report.json").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let deletion = match (a.drop_modality, a.drop_frac) {
        (Some(m), f) => {
            let fraction = f.unwrap_or(0.5);
            if !(0.0..1.0).contains(&fraction) {
                return Err(CliError::Usage(format!("--drop-frac must be in [0, 1), got {fraction}")));
            }
            Some(Deletion { modality: m, fraction })
        }
        (None, _) => None,
    };
    let cohort = read_cohort(&a.cohort)?;
    let opts = EvalOptions {
        deletion,
        no_trimae: a.no_trimae,
        all_patients: a.all,
    };
    let (report, rows) = evaluate_checkpoint(&a.checkpoint, &cohort, &opts)?;
    create_out(&a.out)?;
    write(&a.out.join("eval_report.json"), report_json(&report)?)?;
    write(&a.out.join("risks_eval.csv"), risk_csv(&rows))?;
    match report.c_index {
        Some(c) => out!("C-index {c:.4} on {} patients", report.n_patients),
        None => out!("C-index undefined on {} patients", report.n_patients),
    }
    if let Some(lr) = &report.log_rank.result {
        out!("log-rank p {:.3e}", lr.p_value);
    }
    Ok(())
}

fn cmd_km(a: KmArgs) -> CliResult<()> {
    let mut survival = HashMap::new();
    for row in read_survival(&a.survival)? {
        if survival.insert(row.id.clone(), (row.time, row.event)).is_some() {
            return Err(CliError::Usage(format!("duplicate id `{}` in {}", row.id, a.survival.display())));
        }
    }
    let mut rows: Vec<RiskRow> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for path in &a.risks {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        for r in parse_risk_csv(&text, path)? {
            let &(time, event) = survival.get(&r.id).ok_or_else(|| {
                CliError::Usage(format!("id `{}` from {} is not in {}", r.id, path.display(), a.survival.display()))
            })?;
            if !seen.insert(r.id.clone()) {
                return Err(CliError::Usage(format!("id `{}` appears in more than one risk row", r.id)));
            }
            rows.push(RiskRow { time, event, ..r });
        }
    }
    if rows.len() < 2 {
        return Err(CliError::Usage("need at least two risk rows".into()));
    }
    let (split, summary) = stratify(&rows)?;
    create_out(&a.out)?;
    if split.degenerate {
        log::warn!("degenerate median split: all {} risks fall in one group, no log-rank test", rows.len());
    } else {
        for (name, idx) in [("low", &split.low), ("high", &split.high)] {
            let t: Vec<f64> = idx.iter().map(|&i| rows[i].time).collect();
            let d: Vec<bool> = idx.iter().map(|&i| rows[i].event).collect();
            let curve = km_curve(&t, &d)?;
            save_km_csv(&a.out.join(format!("km_{name}.csv")), &[(name, &curve)])?;
        }
    }
    write(&a.out.join("km.json"), report_json(&summary)?)?;
    out!("low {} | high {}", summary.n_low, summary.n_high);
    match (&summary.result, &summary.note) {
        (Some(lr), _) => out!("log-rank p {:.6e}", lr.p_value),
        (None, Some(n)) => out!("no log-rank test: {n}"),
        (None, None) => {}
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Km(a) => cmd_km(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
