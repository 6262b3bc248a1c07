//! Flat JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dlnsde::dynamics::{StepperKind, StepperParams};
use dlnsde::model::{aligned_balanced_network, build_teacher, init_network, InitSpec, Network, Teacher};
use dlnsde::modes::{BalancedTheory, ItoVariant};
use dlnsde::numerics::RngStream;

use crate::LabError;

/// What `figures-data` does with a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Sweep,
    Ensemble,
    Stationary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lr,
    Batch,
    Dt,
    Width,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown sweep axis {s:?} (lr, batch, dt, width)"))
    }
}

/// Teacher singular vectors: Haar-random from `teacher_seed`, or the
/// standard basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherBasis {
    Random,
    Canonical,
}

/// Every key is required; every random choice has its own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub command: Command,

    /// Full width ladder `d_0, d_1, …, d_L`.
    pub dims: Vec<usize>,
    pub singular_values: Vec<f64>,
    pub sigma_q: f64,
    pub teacher_basis: TeacherBasis,
    pub teacher_seed: u64,

    pub gamma: f64,
    pub balanced: bool,
    /// When set, start from the exactly balanced network aligned with the
    /// teacher at these mode amplitudes instead of a random init.
    pub aligned_amplitudes: Option<Vec<f64>>,
    pub init_seed: u64,

    pub stepper: StepperKind,
    pub eta: f64,
    pub batch_size: usize,
    pub dt: f64,
    pub sigma_iso: f64,
    pub refresh_interval: u64,
    pub dataset_size: Option<usize>,
    pub brownian_substeps: u32,
    pub ito_variant: ItoVariant,
    pub run_seed: u64,

    pub horizon: f64,
    pub record_every: u64,
    pub n_traj: usize,

    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<f64>,

    pub stationary_grid: usize,
    pub histogram_bins: Option<usize>,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: width 12, depth 4, values (1.0, 0.7, 0.4),
    /// γ = 3, η = 0.005, b = 1, Δt = 1e-4, online SGD.
    fn default() -> Self {
        Self {
            name: "default".into(),
            command: Command::Train,
            dims: vec![12; 5],
            singular_values: vec![1.0, 0.7, 0.4],
            sigma_q: 0.0,
            teacher_basis: TeacherBasis::Random,
            teacher_seed: 1,
            gamma: 3.0,
            balanced: false,
            aligned_amplitudes: None,
            init_seed: 2,
            stepper: StepperKind::OnlineSgd,
            eta: 0.005,
            batch_size: 1,
            dt: 1e-4,
            sigma_iso: 1.0,
            refresh_interval: 1,
            dataset_size: None,
            brownian_substeps: 1,
            ito_variant: ItoVariant::SquaredNoise,
            run_seed: 3,
            horizon: 100.0,
            record_every: 100,
            n_traj: 1,
            sweep_axis: None,
            sweep_values: Vec::new(),
            stationary_grid: 20_000,
            histogram_bins: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, LabError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            LabError::Config(msg) => LabError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn depth(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |msg: String| Err(LabError::Config(msg));
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return bad("dims needs at least two positive widths".into());
        }
        if self.singular_values.is_empty() {
            return bad("singular_values is empty".into());
        }
        let narrowest = *self.dims.iter().min().expect("non-empty");
        if self.singular_values.len() > narrowest {
            return bad(format!(
                "{} singular values exceed the narrowest width {narrowest}",
                self.singular_values.len()
            ));
        }
        if !(self.sigma_q >= 0.0) {
            return bad(format!("sigma_q must be >= 0, got {}", self.sigma_q));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return bad(format!("horizon must be >= 0, got {}", self.horizon));
        }
        if self.record_every == 0 {
            return bad("record_every must be >= 1".into());
        }
        if self.n_traj == 0 {
            return bad("n_traj must be >= 1".into());
        }
        if self.stationary_grid < 100 {
            return bad("stationary_grid must be >= 100".into());
        }
        if let Some(a) = &self.aligned_amplitudes {
            if a.len() != self.singular_values.len() {
                return bad("aligned_amplitudes needs one entry per singular value".into());
            }
        }
        if self.sweep_axis.is_some() {
            check_sweep_values(&self.sweep_values)?;
        }
        self.stepper_params().validate().map_err(|e| LabError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn stepper_params(&self) -> StepperParams {
        StepperParams {
            kind: self.stepper,
            eta: self.eta,
            batch_size: self.batch_size,
            dt: self.dt,
            sigma_iso: self.sigma_iso,
            refresh_interval: self.refresh_interval,
            dataset_size: self.dataset_size,
            brownian_substeps: self.brownian_substeps,
            ito_variant: self.ito_variant,
        }
    }

    pub fn init_spec(&self) -> InitSpec {
        InitSpec {
            gamma: self.gamma,
            balanced: self.balanced,
            seed: self.init_seed,
        }
    }

    pub fn teacher(&self) -> Result<Teacher, LabError> {
        let (d_in, d_out) = (self.dims[0], *self.dims.last().expect("validated"));
        Ok(match self.teacher_basis {
            TeacherBasis::Random => build_teacher(
                d_out,
                d_in,
                &self.singular_values,
                self.sigma_q,
                &mut RngStream::new(self.teacher_seed, 0),
            )?,
            TeacherBasis::Canonical => Teacher::canonical(d_out, d_in, &self.singular_values, self.sigma_q)?,
        })
    }

    pub fn initial_network(&self, teacher: &Teacher) -> Result<Network, LabError> {
        let mut rng = RngStream::new(self.init_seed, 0);
        Ok(match &self.aligned_amplitudes {
            Some(w) => aligned_balanced_network(teacher, &self.dims[1..self.dims.len() - 1], w, &mut rng)?,
            None => init_network(&self.dims, &self.init_spec(), &mut rng)?,
        })
    }

    /// Per-mode balanced aligned theory at this config's `β`.
    pub fn theory(&self, alpha: usize) -> Result<BalancedTheory, LabError> {
        let s = *self
            .singular_values
            .get(alpha)
            .ok_or_else(|| LabError::Config(format!("no mode {alpha}")))?;
        let th = BalancedTheory::new(s, self.depth(), self.stepper_params().beta(), self.sigma_q)?;
        Ok(th.with_ito(self.ito_variant))
    }

    /// Copy with one axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self, LabError> {
        let mut out = self.clone();
        match axis {
            SweepAxis::Lr => out.eta = value,
            SweepAxis::Dt => out.dt = value,
            SweepAxis::Batch | SweepAxis::Width => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(LabError::Config(format!("{axis:?} values must be positive integers, got {value}")));
                }
                if axis == SweepAxis::Batch {
                    out.batch_size = value as usize;
                } else {
                    let n = out.dims.len();
                    for d in &mut out.dims[1..n - 1] {
                        *d = value as usize;
                    }
                }
            }
        }
        out.sweep_axis = None;
        out.sweep_values.clear();
        out.command = Command::Train;
        out.validate()?;
        Ok(out)
    }
}

pub fn check_sweep_values(values: &[f64]) -> Result<(), LabError> {
    if values.len() < 3 {
        return Err(LabError::Config(format!(
            "a sweep needs at least 3 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(LabError::Config("sweep values must be positive".into()));
    }
    Ok(())
}
