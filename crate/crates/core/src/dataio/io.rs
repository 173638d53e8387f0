//! Cohort directory format.
//!
//! ```text
//! manifest.json            schema, patient ids and file names, optional latent risks
//! P_<id>_{s,m,l}.csv       header `row,col,f0..`, one line per grid node
//! R_<id>.csv, CM_<id>.csv  one line of reals
//! survival.csv             header `id,time,event`
//! ```
//!
//! Reals are written in shortest round-trip form, so a write/read cycle is
//! bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, PatchGrid, PatientRecord, Scale, Schema};
use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const MANIFEST: &str = "manifest.json";
pub const SURVIVAL: &str = "survival.csv";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    pub small: String,
    pub medium: String,
    pub large: String,
    pub rna: String,
    pub cnv_mut: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub schema: Schema,
    pub survival: String,
    pub patients: Vec<ManifestPatient>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_risk: Option<Vec<f64>>,
}

fn join_reals(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v}").expect("write to string");
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn grid_csv(grid: &PatchGrid) -> String {
    let d = grid.features.ncols();
    let mut out = String::from("row,col");
    for j in 0..d {
        write!(out, ",f{j}").expect("write to string");
    }
    out.push('\n');
    for (k, &(r, c)) in grid.coords.iter().enumerate() {
        write!(out, "{r},{c},").expect("write to string");
        join_reals(&mut out, grid.features.row(k).iter().copied());
        out.push('\n');
    }
    out
}

/// Writes `cohort` into `dir` (created if missing) and returns the manifest.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<Manifest> {
    cohort.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut entries = Vec::with_capacity(cohort.len());
    let mut survival = String::from("id,time,event\n");
    for p in &cohort.patients {
        let entry = ManifestPatient {
            id: p.id.clone(),
            small: format!("P_{}_s.csv", p.id),
            medium: format!("P_{}_m.csv", p.id),
            large: format!("P_{}_l.csv", p.id),
            rna: format!("R_{}.csv", p.id),
            cnv_mut: format!("CM_{}.csv", p.id),
        };
        write_file(&dir.join(&entry.small), &grid_csv(&p.small))?;
        write_file(&dir.join(&entry.medium), &grid_csv(&p.medium))?;
        write_file(&dir.join(&entry.large), &grid_csv(&p.large))?;
        let mut line = String::new();
        join_reals(&mut line, p.rna.iter().copied());
        line.push('\n');
        write_file(&dir.join(&entry.rna), &line)?;
        let mut line = String::new();
        join_reals(&mut line, p.cnv_mut.iter().copied());
        line.push('\n');
        write_file(&dir.join(&entry.cnv_mut), &line)?;
        writeln!(survival, "{},{},{}", p.id, p.time, u8::from(p.event)).expect("write to string");
        entries.push(entry);
    }
    write_file(&dir.join(SURVIVAL), &survival)?;

    let manifest = Manifest {
        version: FORMAT_VERSION,
        schema: cohort.schema.clone(),
        survival: SURVIVAL.to_string(),
        patients: entries,
        latent_risk: cohort.latent_risk.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST), &(json + "\n"))?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn invalid(patient: &str, field: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        patient: patient.into(),
        field: field.into(),
        reason: reason.into(),
    }
}

fn parse_real(s: &str, patient: &str, field: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| invalid(patient, field, format!("cannot parse `{}` as a real", s.trim())))?;
    if !v.is_finite() {
        return Err(invalid(patient, field, format!("non-finite value `{}`", s.trim())));
    }
    Ok(v)
}

fn parse_vector(path: &Path, patient: &str, field: &str) -> Result<Vec<f64>> {
    let text = read_file(path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| invalid(patient, field, "file is empty"))?;
    line.split(',').map(|s| parse_real(s, patient, field)).collect()
}

fn parse_grid(path: &Path, patient: &str, field: &str, d_x: usize) -> Result<PatchGrid> {
    let text = read_file(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| invalid(patient, field, "file is empty"))?;
    let cols = header.split(',').count();
    if cols != d_x + 2 {
        return Err(invalid(
            patient,
            field,
            format!("header has {} feature columns, schema d_x is {d_x}", cols.saturating_sub(2)),
        ));
    }
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d_x + 2 {
            return Err(invalid(
                patient,
                field,
                format!("row {} has {} columns, expected {}", ln + 1, fields.len(), d_x + 2),
            ));
        }
        let coord = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| invalid(patient, field, format!("bad grid coordinate `{}`", s.trim())))
        };
        coords.push((coord(fields[0])?, coord(fields[1])?));
        for f in &fields[2..] {
            values.push(parse_real(f, patient, field)?);
        }
    }
    let features = Mat::from_shape_vec((coords.len(), d_x), values)
        .map_err(|e| invalid(patient, field, e.to_string()))?;
    Ok(PatchGrid { coords, features })
}

/// Reads and validates a cohort directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRow {
    pub id: String,
    pub time: f64,
    pub event: bool,
}

/// Parses an `id,time,event` file, in file order.
pub fn read_survival(path: &Path) -> Result<Vec<SurvivalRow>> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h.trim()) != Some("id,time,event") {
        return Err(Error::Schema(format!("{}: expected header `id,time,event`", path.display())));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Schema(format!(
                "{}: line {} has {} fields, expected 3",
                path.display(),
                ln + 1,
                f.len()
            )));
        }
        let id = f[0].trim().to_string();
        let time = parse_real(f[1], &id, "time")?;
        let event = match f[2].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(invalid(&id, "event", format!("must be 0 or 1, got `{other}`")));
            }
        };
        rows.push(SurvivalRow { id, time, event });
    }
    Ok(rows)
}

pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&read_file(&manifest_path)?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported cohort format version {}",
            manifest.version
        )));
    }
    manifest.schema.validate()?;
    if manifest.patients.is_empty() {
        return Err(Error::Schema("manifest lists no patients".into()));
    }

    let mut survival = std::collections::HashMap::new();
    for row in read_survival(&dir.join(&manifest.survival))? {
        if survival.insert(row.id.clone(), (row.time, row.event)).is_some() {
            return Err(invalid(&row.id, "id", "duplicate survival row"));
        }
    }

    let schema = manifest.schema.clone();
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for entry in &manifest.patients {
        let id = entry.id.as_str();
        let (time, event) = *survival
            .get(id)
            .ok_or_else(|| invalid(id, "survival", "no row in survival file"))?;
        let grid = |scale: Scale, file: &str| {
            parse_grid(
                &dir.join(file),
                id,
                &format!("pathology_{}", scale.name()),
                schema.d_x,
            )
        };
        let patient = PatientRecord {
            id: id.to_string(),
            small: grid(Scale::Small, &entry.small)?,
            medium: grid(Scale::Medium, &entry.medium)?,
            large: grid(Scale::Large, &entry.large)?,
            rna: parse_vector(&dir.join(&entry.rna), id, "rna")?,
            cnv_mut: parse_vector(&dir.join(&entry.cnv_mut), id, "cnv_mut")?,
            time,
            event,
        };
        patient.validate(&schema)?;
        patients.push(patient);
    }

    let cohort = Cohort {
        schema,
        patients,
        latent_risk: manifest.latent_risk,
    };
    cohort.validate()?;
    Ok(cohort)
}
