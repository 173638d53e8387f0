//! Patient records, synthetic cohort generation, the on-disk cohort format
//! and cross-validation splits.

mod folds;
mod generate;
mod io;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

pub use folds::{kfold_split, FoldSplit};
pub use generate::{generate_cohort, SynthConfig};
pub use io::{read_cohort, read_survival, write_cohort, Manifest, ManifestPatient, SurvivalRow};

/// Rows × columns of one field-of-view patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub d_x: usize,
    pub rna_dim: usize,
    pub cnv_mut_dim: usize,
    pub small: GridShape,
    pub medium: GridShape,
    pub large: GridShape,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            d_x: 64,
            rna_dim: 256,
            cnv_mut_dim: 128,
            small: GridShape::new(8, 8),
            medium: GridShape::new(6, 6),
            large: GridShape::new(4, 4),
        }
    }
}

impl Schema {
    pub fn grid(&self, scale: Scale) -> GridShape {
        match scale {
            Scale::Small => self.small,
            Scale::Medium => self.medium,
            Scale::Large => self.large,
        }
    }

    /// Offset of a scale's cells in the global pathology position index
    /// (small, then medium, then large).
    pub fn position_offset(&self, scale: Scale) -> usize {
        match scale {
            Scale::Small => 0,
            Scale::Medium => self.small.cells(),
            Scale::Large => self.small.cells() + self.medium.cells(),
        }
    }

    pub fn total_cells(&self) -> usize {
        self.small.cells() + self.medium.cells() + self.large.cells()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.rna_dim == 0 || self.cnv_mut_dim == 0 {
            return Err(Error::Schema("dimensions must be positive".into()));
        }
        for s in Scale::ALL {
            let g = self.grid(s);
            if g.rows == 0 || g.cols == 0 {
                return Err(Error::Schema(format!("{} grid is empty", s.name())));
            }
        }
        Ok(())
    }
}

/// Field of view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Small,
    Medium,
    Large,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Small, Scale::Medium, Scale::Large];

    pub fn name(self) -> &'static str {
        match self {
            Scale::Small => "small",
            Scale::Medium => "medium",
            Scale::Large => "large",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Scale::Small => 's',
            Scale::Medium => 'm',
            Scale::Large => 'l',
        }
    }

    pub fn from_letter(c: char) -> Option<Scale> {
        match c {
            's' => Some(Scale::Small),
            'm' => Some(Scale::Medium),
            'l' => Some(Scale::Large),
            _ => None,
        }
    }
}

/// Patch features of one field of view: one row per present grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub coords: Vec<(usize, usize)>,
    pub features: Mat,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub small: PatchGrid,
    pub medium: PatchGrid,
    pub large: PatchGrid,
    pub rna: Vec<f64>,
    pub cnv_mut: Vec<f64>,
    /// Days until death or censoring.
    pub time: f64,
    /// `true` when death was observed.
    pub event: bool,
}

impl PatientRecord {
    pub fn grid(&self, scale: Scale) -> &PatchGrid {
        match scale {
            Scale::Small => &self.small,
            Scale::Medium => &self.medium,
            Scale::Large => &self.large,
        }
    }

    fn fail(&self, field: &str, reason: impl Into<String>) -> Error {
        Error::Validation {
            patient: self.id.clone(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if !(self.time.is_finite() && self.time > 0.0) {
            return Err(self.fail("time", format!("must be positive and finite, got {}", self.time)));
        }
        for scale in Scale::ALL {
            let grid = self.grid(scale);
            let field = format!("pathology_{}", scale.name());
            let shape = schema.grid(scale);
            if grid.is_empty() {
                return Err(self.fail(&field, "grid has no patches"));
            }
            if grid.features.nrows() != grid.coords.len() {
                return Err(self.fail(
                    &field,
                    format!(
                        "{} feature rows for {} coordinates",
                        grid.features.nrows(),
                        grid.coords.len()
                    ),
                ));
            }
            if grid.features.ncols() != schema.d_x {
                return Err(self.fail(
                    &field,
                    format!("feature length {} != d_x {}", grid.features.ncols(), schema.d_x),
                ));
            }
            let mut seen = HashSet::with_capacity(grid.coords.len());
            for &(r, c) in &grid.coords {
                if r >= shape.rows || c >= shape.cols {
                    return Err(self.fail(
                        &field,
                        format!("coordinate ({r},{c}) outside {}x{} grid", shape.rows, shape.cols),
                    ));
                }
                if !seen.insert((r, c)) {
                    return Err(self.fail(&field, format!("duplicate coordinate ({r},{c})")));
                }
            }
            if grid.features.iter().any(|v| !v.is_finite()) {
                return Err(self.fail(&field, "non-finite feature value"));
            }
        }
        if self.rna.len() != schema.rna_dim {
            return Err(self.fail(
                "rna",
                format!("length {} != schema {}", self.rna.len(), schema.rna_dim),
            ));
        }
        if self.rna.iter().any(|v| !v.is_finite()) {
            return Err(self.fail("rna", "non-finite value"));
        }
        if self.cnv_mut.len() != schema.cnv_mut_dim {
            return Err(self.fail(
                "cnv_mut",
                format!("length {} != schema {}", self.cnv_mut.len(), schema.cnv_mut_dim),
            ));
        }
        if self.cnv_mut.iter().any(|v| !v.is_finite()) {
            return Err(self.fail("cnv_mut", "non-finite value"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub schema: Schema,
    pub patients: Vec<PatientRecord>,
    /// True log relative hazard per patient; only known for synthetic cohorts.
    pub latent_risk: Option<Vec<f64>>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.patients.iter().map(|p| p.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.patients.iter().map(|p| p.event).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.patients.is_empty() {
            return Err(Error::Schema("cohort has no patients".into()));
        }
        let mut ids = HashSet::with_capacity(self.patients.len());
        for p in &self.patients {
            if p.id.is_empty() || p.id.contains(['/', '\\', ',']) {
                return Err(Error::Validation {
                    patient: p.id.clone(),
                    field: "id".into(),
                    reason: "ids must be non-empty and contain no path separators or commas".into(),
                });
            }
            if !ids.insert(p.id.as_str()) {
                return Err(Error::Validation {
                    patient: p.id.clone(),
                    field: "id".into(),
                    reason: "duplicate patient id".into(),
                });
            }
            p.validate(&self.schema)?;
        }
        if let Some(z) = &self.latent_risk {
            if z.len() != self.patients.len() {
                return Err(Error::Schema(format!(
                    "{} latent risks for {} patients",
                    z.len(),
                    self.patients.len()
                )));
            }
        }
        Ok(())
    }

    /// Sub-cohort with the given patient positions, in that order.
    pub fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort {
            schema: self.schema.clone(),
            patients: idx.iter().map(|&i| self.patients[i].clone()).collect(),
            latent_risk: self
                .latent_risk
                .as_ref()
                .map(|z| idx.iter().map(|&i| z[i]).collect()),
        }
    }
}
