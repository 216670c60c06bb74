//! Experiment configuration files (JSON).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ouu::fem::{Mesh, PdeData};
use ouu::field::FieldSpec;
use ouu::optimizer::{Instance, Schedule};
use ouu::problem::{ControlBox, ControlPoint, Mode, QoiSpec};
use ouu::profile::Profile;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub instance: Option<InstanceConfig>,
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Bound on `|ψ̂|` for buffered runs.
    #[serde(default = "default_feasibility_tol")]
    pub feasibility_tol: f64,
    #[serde(default)]
    pub reference: Option<ReferenceConfig>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub solve: Option<SolveConfig>,
    #[serde(default)]
    pub sample_field: Option<SampleFieldConfig>,
    #[serde(default)]
    pub risk: Option<RiskConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
    #[serde(default)]
    pub epi: Option<EpiConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_feasibility_tol() -> f64 {
    1e-3
}

fn default_threads() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub train: u64,
    pub reference: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            train: 0,
            reference: 1,
        }
    }
}

/// Physical units are nondimensional: lengths in domain units, temperatures
/// relative to a reference, conductivity and Robin coefficients per unit
/// length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    /// Number of control cells `n`.
    pub n: usize,
    /// State elements per control cell.
    #[serde(default = "default_refinement")]
    pub state_refinement: usize,
    #[serde(default = "default_domain")]
    pub domain: (f64, f64),
    pub field: FieldSpec,
    pub pde: PdeData,
    pub qoi: QoiSpec,
    pub bounds: ControlBox,
    pub theta_reg: f64,
    pub mode: Mode,
    #[serde(default)]
    pub start: StartConfig,
}

fn default_refinement() -> usize {
    4
}

fn default_domain() -> (f64, f64) {
    (0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    #[serde(default)]
    pub z: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub nu: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    /// Control, projected onto the control cells.
    pub control: Profile,
    #[serde(default)]
    pub sample_index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFieldConfig {
    #[serde(default = "default_field_cells")]
    pub cells: usize,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_field_cells() -> usize {
    200
}

fn default_count() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// CSV with a `value` column and optional `weight` column, relative to
    /// the config file. Replaces `values` and `weights` when loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values_csv: Option<PathBuf>,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub fem_levels: Vec<usize>,
    pub fem_min_rate: f64,
    pub field_samples: usize,
    pub field_levels: Vec<usize>,
    pub field_min_rate: f64,
    pub field: FieldSpec,
    pub smax_betas: Vec<f64>,
    pub smax_range: f64,
    pub smax_step: f64,
    pub oracle_laws: usize,
    pub oracle_max_size: usize,
    pub oracle_tol: f64,
    pub duality_laws: usize,
    pub duality_alphas: usize,
    pub closed_case_tol: f64,
    pub embedding_trials: usize,
    pub embedding_tol: f64,
    pub gradient_instances: usize,
    pub gradient_tol: f64,
    pub integrability_fields: Vec<FieldSpec>,
    pub integrability_pairs: Vec<(f64, f64)>,
    pub integrability_samples: usize,
    /// Standard errors allowed between the lognormal oracle and the probe.
    pub integrability_z: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let unit = (0.0, 1.0);
        let pi = std::f64::consts::PI;
        Self {
            seed: 7,
            fem_levels: vec![16, 32, 64, 128, 256],
            fem_min_rate: 1.9,
            field_samples: 20,
            field_levels: vec![16, 32, 64, 128, 256],
            field_min_rate: 1.0,
            field: FieldSpec {
                domain: unit,
                mean: Profile::constant(0.0),
                modes: vec![Profile::sine(0.5, pi), Profile::sine(0.25, 2.0 * pi)],
                bound_cells: ouu::field::DEFAULT_BOUND_CELLS,
            },
            smax_betas: vec![1.0, 0.1, 0.01],
            smax_range: 100.0,
            smax_step: 1e-2,
            oracle_laws: 1000,
            oracle_max_size: 200,
            oracle_tol: 1e-10,
            duality_laws: 200,
            duality_alphas: 25,
            closed_case_tol: 1e-9,
            embedding_trials: 100,
            embedding_tol: 1e-14,
            gradient_instances: 50,
            gradient_tol: 1e-6,
            integrability_fields: vec![
                FieldSpec {
                    domain: unit,
                    mean: Profile::constant(0.1),
                    modes: vec![Profile::constant(0.5)],
                    bound_cells: ouu::field::DEFAULT_BOUND_CELLS,
                },
                FieldSpec {
                    domain: unit,
                    mean: Profile::constant(0.0),
                    modes: vec![
                        Profile::sine(0.5, pi),
                        Profile::indicator(unit, 0.0, 0.5, 0.3),
                    ],
                    bound_cells: ouu::field::DEFAULT_BOUND_CELLS,
                },
            ],
            integrability_pairs: vec![(0.0, 0.0), (1.0, 0.0), (0.0, 3.0), (1.0, 3.0)],
            integrability_samples: 100_000,
            integrability_z: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpiConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub nus: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn core(e: ouu::Error) -> CliError {
    CliError::from(e)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| config_error(format!("parse error: {e}")))?;
        if let Some(r) = cfg.risk.as_mut() {
            if let Some(csv) = r.values_csv.take() {
                let csv = path.parent().unwrap_or(Path::new(".")).join(csv);
                (r.values, r.weights) = read_values_csv(&csv)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_error(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section present before any compute starts.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.threads == 0 {
            return Err(config_error("threads must be at least 1"));
        }
        if !(self.feasibility_tol.is_finite() && self.feasibility_tol > 0.0) {
            return Err(config_error("feasibility_tol must be positive"));
        }
        if let Some(inst) = &self.instance {
            inst.validate()?;
        }
        if let Some(s) = &self.schedule {
            s.validate().map_err(core)?;
        }
        if let Some(r) = &self.reference {
            if r.nu < 2 {
                return Err(config_error("reference.nu must be at least 2"));
            }
            if self.seeds.reference == self.seeds.train {
                return Err(config_error("seeds.reference must differ from seeds.train"));
            }
        }
        if let Some(s) = &self.solve {
            s.control.validate().map_err(core)?;
        }
        if let Some(s) = &self.sample_field {
            if s.cells == 0 || s.count == 0 {
                return Err(config_error("sample_field.cells and count must be positive"));
            }
        }
        if let Some(r) = &self.risk {
            if r.values_csv.is_some() {
                return Err(config_error("risk.values_csv is only resolved when loading from a file"));
            }
            if r.values.is_empty() || r.alphas.is_empty() {
                return Err(config_error("risk.values and risk.alphas must be nonempty"));
            }
            if r.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
                return Err(config_error("risk.alphas must lie in (0, 1)"));
            }
            self.risk_rv()?;
        }
        if let Some(v) = &self.verify {
            v.validate()?;
        }
        if let Some(e) = &self.epi {
            if !(e.epsilon > 0.0 && e.delta > 0.0) {
                return Err(config_error("epi.epsilon and epi.delta must be positive"));
            }
            if e.nus.is_empty() || e.seeds.is_empty() {
                return Err(config_error("epi.nus and epi.seeds must be nonempty"));
            }
            if e.nus.iter().any(|v| !(*v >= 1.0)) || e.nus.windows(2).any(|w| w[1] < w[0]) {
                return Err(config_error("epi.nus must be >= 1 and nondecreasing"));
            }
        }
        Ok(())
    }

    pub fn risk_rv(&self) -> Result<ouu::risk::DiscreteRv, CliError> {
        let r = self.risk.as_ref().ok_or_else(|| config_error("config has no risk section"))?;
        match &r.weights {
            Some(w) => ouu::risk::DiscreteRv::new(r.values.clone(), w.clone()),
            None => ouu::risk::DiscreteRv::uniform(r.values.clone()),
        }
        .map_err(core)
    }

    pub fn instance(&self) -> Result<&InstanceConfig, CliError> {
        self.instance.as_ref().ok_or_else(|| config_error("config has no instance section"))
    }

    /// SHA-256 of the canonical config, ignoring the output location and
    /// thread count, which do not affect results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.threads = 1;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl VerifyConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.fem_levels.len() < 3 || self.field_levels.len() < 3 {
            return Err(config_error("rate studies need at least three levels"));
        }
        if self.smax_betas.iter().any(|b| !(*b > 0.0)) || !(self.smax_step > 0.0) {
            return Err(config_error("smax betas and step must be positive"));
        }
        if self.oracle_max_size == 0 || self.duality_alphas < 2 {
            return Err(config_error("oracle sizes must be positive and duality_alphas >= 2"));
        }
        if self.integrability_pairs.iter().any(|&(p, q)| !(0.0..=1.0).contains(&p) || q < 0.0) {
            return Err(config_error("integrability pairs need 0 <= p <= 1 and q >= 0"));
        }
        if self.integrability_samples < 2 {
            return Err(config_error("integrability_samples must be at least 2"));
        }
        self.field.validate().map_err(core)?;
        for f in &self.integrability_fields {
            f.validate().map_err(core)?;
        }
        Ok(())
    }
}

impl InstanceConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n == 0 || self.state_refinement == 0 {
            return Err(config_error("instance.n and state_refinement must be positive"));
        }
        if self.field.domain != self.domain {
            return Err(config_error("field domain must equal the instance domain"));
        }
        if !(self.theta_reg.is_finite() && self.theta_reg >= 0.0) {
            return Err(config_error("theta_reg must be finite and nonnegative"));
        }
        self.field.validate().map_err(core)?;
        self.pde.validate(self.domain).map_err(core)?;
        self.qoi.validate(self.domain).map_err(core)?;
        self.bounds.validate().map_err(core)?;
        let s = self.start;
        if !(s.z.is_finite() && s.gamma.is_finite() && s.sigma.is_finite()) {
            return Err(config_error("start values must be finite"));
        }
        Ok(())
    }

    pub fn control_mesh(&self) -> Result<Arc<Mesh>, CliError> {
        Ok(Arc::new(Mesh::uniform(self.n, self.domain).map_err(core)?))
    }

    pub fn state_mesh(&self) -> Result<Arc<Mesh>, CliError> {
        Ok(Arc::new(
            Mesh::uniform(self.n * self.state_refinement, self.domain).map_err(core)?,
        ))
    }

    pub fn build(&self, seed: u64, threads: usize) -> Result<Instance, CliError> {
        let s = self.start;
        Ok(Instance {
            field: Arc::new(self.field.clone()),
            seed,
            state_mesh: self.state_mesh()?,
            control_mesh: self.control_mesh()?,
            pde: self.pde.clone(),
            qoi: self.qoi.clone(),
            bounds: self.bounds,
            theta_reg: self.theta_reg,
            mode: self.mode,
            start: ControlPoint::new(vec![s.z; self.n], s.gamma, s.sigma, self.bounds),
            threads,
        })
    }
}

/// Values and optional weights from a CSV with a header row.
fn read_values_csv(path: &Path) -> Result<(Vec<f64>, Option<Vec<f64>>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let columns: Vec<&str> = lines.next().unwrap_or_default().split(',').map(str::trim).collect();
    let value_col = columns.iter().position(|c| *c == "value");
    let weight_col = columns.iter().position(|c| *c == "weight");
    let Some(value_col) = value_col else {
        return Err(config_error(format!("{} has no value column", path.display())));
    };
    let (mut values, mut weights) = (Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<f64, CliError> {
            cells
                .get(i)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| config_error(format!("{} row {}: bad number", path.display(), k + 1)))
        };
        values.push(num(value_col)?);
        if let Some(w) = weight_col {
            weights.push(num(w)?);
        }
    }
    Ok((values, weight_col.map(|_| weights)))
}
