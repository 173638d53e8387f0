//! Per-patient model: pathology encoder and two molecular encoders feed the
//! masked autoencoder, whose refined tokens go through the fusion trunk and
//! the three survival heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cft::{CftConfig, CftEncoder, PreparedScale};
use crate::dataio::{PatientRecord, Schema};
use crate::error::{Error, Result};
use crate::hae::{HaeConfig, HaeEncoder};
use crate::numerics::{LayerNorm, Mat, Mode, ParamStore, RngStream, Tape, Var};
use crate::survival::{RiskOutput, SurvivalHead};
use crate::trimae::{replace_rows, Branch, Masking, TriMae, TrimaeConfig};
use crate::wsigraph::build_multiscale;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub cft: CftConfig,
    pub hae: HaeConfig,
    pub trimae: TrimaeConfig,
    /// Dropout on the hidden layers of the fusion trunk.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cft: CftConfig::default(),
            hae: HaeConfig::default(),
            trimae: TrimaeConfig::default(),
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.cft.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.cft.validate()?;
        self.hae.validate(self.cft.d_model)?;
        self.trimae.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        let half = self.cft.d_model / 2;
        if !self.cft.d_model.is_multiple_of(2) || !half.is_multiple_of(self.cft.heads) {
            return Err(Error::invalid(format!(
                "decoder width {} must be divisible by {} heads",
                half, self.cft.heads
            )));
        }
        Ok(())
    }
}

/// A patient with graphs built and inputs laid out for the model.
#[derive(Clone, Debug)]
pub struct PreparedPatient {
    pub id: String,
    pub scales: Vec<PreparedScale>,
    pub rna: Mat,
    pub cnv_mut: Mat,
    pub time: f64,
    pub event: bool,
}

/// How a forward pass treats randomness and missing tokens.
pub enum Pass<'a> {
    Train {
        dropout: &'a mut ChaCha8Rng,
        masking: &'a mut ChaCha8Rng,
    },
    /// Deterministic. Tokens listed in `missing` (pathology, RNA, CNV/MUT)
    /// are reconstructed when the autoencoder is enabled and zero-filled
    /// otherwise.
    Eval { missing: Option<&'a [Vec<usize>; 3]> },
}

pub struct Encoded {
    pub tokens: [Var; 3],
    pub positions: [Vec<usize>; 3],
}

pub struct PatientPass {
    /// `1 × 1` outputs for pathology, RNA and CNV/MUT.
    pub outputs: [Var; 3],
    pub trimae_loss: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Foresee {
    pub cfg: ModelConfig,
    pub schema: Schema,
    pub cft: CftEncoder,
    pub rna: HaeEncoder,
    pub cnv_mut: HaeEncoder,
    pub trimae: TriMae,
    pub head: SurvivalHead,
    /// Final norm of each encoder, so autoencoder targets keep a fixed scale.
    pub out_norm: [LayerNorm; 3],
}

impl Foresee {
    pub fn new(cfg: &ModelConfig, schema: &Schema, init: &RngStream) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        schema.validate()?;
        let mut rng = init.rng();
        let mut store = ParamStore::new();
        let d = cfg.d_model();
        let heads = cfg.cft.heads;
        let cft = CftEncoder::new(&mut store, &mut rng, "cft", &cfg.cft, schema)?;
        let rna = HaeEncoder::new(&mut store, &mut rng, "hae_r", schema.rna_dim, d, heads, &cfg.hae)?;
        let cnv_mut = HaeEncoder::new(&mut store, &mut rng, "hae_cm", schema.cnv_mut_dim, d, heads, &cfg.hae)?;
        let positions = [schema.total_cells(), rna.tokens(), cnv_mut.tokens()];
        let trimae = TriMae::new(&mut store, &mut rng, "trimae", &cfg.trimae, d, heads, positions)?;
        let head = SurvivalHead::new(&mut store, &mut rng, "surv", d, cfg.dropout)?;
        let out_norm = Branch::ALL.map(|b| LayerNorm::new(&mut store, &format!("out_norm.{}", b.tag()), d));
        Ok((
            Self {
                cfg: cfg.clone(),
                schema: schema.clone(),
                cft,
                rna,
                cnv_mut,
                trimae,
                head,
                out_norm,
            },
            store,
        ))
    }

    pub fn prepare(&self, rec: &PatientRecord) -> Result<PreparedPatient> {
        rec.validate(&self.schema)?;
        let graphs = build_multiscale(rec)?;
        Ok(PreparedPatient {
            id: rec.id.clone(),
            scales: self.cft.prepare(&graphs),
            rna: Mat::from_shape_vec((1, rec.rna.len()), rec.rna.clone()).expect("row vector"),
            cnv_mut: Mat::from_shape_vec((1, rec.cnv_mut.len()), rec.cnv_mut.clone()).expect("row vector"),
            time: rec.time,
            event: rec.event,
        })
    }

    pub fn prepare_all(&self, recs: &[PatientRecord]) -> Result<Vec<PreparedPatient>> {
        recs.iter().map(|r| self.prepare(r)).collect()
    }

    /// Token counts per modality for a prepared patient.
    pub fn token_counts(&self, p: &PreparedPatient) -> [usize; 3] {
        [
            p.scales.iter().map(|s| s.cells.len()).sum(),
            self.rna.tokens(),
            self.cnv_mut.tokens(),
        ]
    }

    /// Encoder tokens before refinement, with their positions.
    pub fn encode(&self, tape: &mut Tape<'_>, p: &PreparedPatient) -> Result<Encoded> {
        let path = self.cft.forward(tape, &p.scales)?;
        let r = tape.constant(p.rna.clone());
        let r = self.rna.forward(tape, r)?;
        let c = tape.constant(p.cnv_mut.clone());
        let c = self.cnv_mut.forward(tape, c)?;
        let positions = [path.positions, (0..self.rna.tokens()).collect(), (0..self.cnv_mut.tokens()).collect()];
        let tokens = [path.tokens, r, c];
        Ok(Encoded {
            tokens: std::array::from_fn(|i| self.out_norm[i].forward(tape, tokens[i])),
            positions,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &PreparedPatient, pass: Pass<'_>) -> Result<PatientPass> {
        let enc = self.encode(tape, p)?;
        let pos = [&enc.positions[0][..], &enc.positions[1][..], &enc.positions[2][..]];
        match pass {
            Pass::Train { dropout, masking } => {
                let out = self.trimae.forward(tape, enc.tokens, pos, Masking::Train(masking))?;
                let outputs = self.head.forward(tape, out.refined, Mode::Train, dropout)?;
                Ok(PatientPass {
                    outputs,
                    trimae_loss: out.loss,
                })
            }
            Pass::Eval { missing } => {
                let refined = match missing {
                    None => enc.tokens,
                    Some(m) if self.trimae.cfg.enabled => {
                        self.trimae
                            .forward::<ChaCha8Rng>(tape, enc.tokens, pos, Masking::Missing(m))?
                            .refined
                    }
                    Some(m) => {
                        let mut t = enc.tokens;
                        for i in 0..3 {
                            let zeros = tape.constant(Mat::zeros(tape.shape(t[i])));
                            t[i] = replace_rows(tape, t[i], zeros, &m[i]);
                        }
                        t
                    }
                };
                // dropout is inactive in eval mode, so this stream is never drawn from
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let outputs = self.head.forward(tape, refined, Mode::Eval, &mut unused)?;
                Ok(PatientPass {
                    outputs,
                    trimae_loss: None,
                })
            }
        }
    }

    pub fn predict(&self, store: &ParamStore, p: &PreparedPatient, missing: Option<&[Vec<usize>; 3]>) -> Result<RiskOutput> {
        let mut tape = Tape::new(store);
        let pass = self.forward(&mut tape, p, Pass::Eval { missing })?;
        let o = pass.outputs.map(|v| tape.scalar(v));
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite output for patient `{}`", p.id)));
        }
        Ok(RiskOutput::new(o))
    }
}
