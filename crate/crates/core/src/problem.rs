//! Sample-average approximating objectives.
//!
//! Two instantiations share one evaluator:
//!
//! - expectation mode: `θ‖T_n z‖² + (1/ν) Σ_j g1(s^ν(ξ_j, z))`
//! - buffered mode: the above plus `y·w2 + θ_pen·w2²` with
//!   `w2 = (1/ν) Σ_j [σ + γ + smax(ĝ2(s^ν(ξ_j, z)) − γ; β)/(1−α)]`,
//!   the augmented Lagrangian of the slack-reformulated buffered-probability
//!   constraint.
//!
//! Quantities of interest are the tracking discrepancy
//! `g1(u) = ∫ (u − s_d)²` and the average shortfall
//! `ĝ2(u) = s_t − ∫_{D_t} u`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{mass_matrix, region_weights, ControlLoad, Mesh, P1State, PdeData, StateSystem};
use crate::field::FieldSample;
use crate::profile::Profile;
use crate::risk::{smax, smax_grad, SmaxParam};
use crate::tridiag::SymTridiagonal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoiSpec {
    /// Desired temperature `s_d`, interpolated to P1 on the state mesh.
    pub target: Profile,
    /// Subinterval `D_t` over which the state is averaged.
    pub region: (f64, f64),
    /// Threshold temperature `s_t`.
    pub threshold: f64,
    /// Reliability level of the buffered constraint.
    pub alpha: f64,
}

impl QoiSpec {
    pub fn validate(&self, domain: (f64, f64)) -> Result<()> {
        self.target.validate()?;
        let (lo, hi) = self.region;
        if !(lo < hi && lo >= domain.0 && hi <= domain.1) {
            return Err(Error::invalid(format!(
                "region ({lo}, {hi}) must be a nonempty subinterval of ({}, {})",
                domain.0, domain.1
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `g1(u) = ∫ (u − I_h s_d)²`, exact for the P1 difference.
pub fn qoi_g1(u: &P1State, qoi: &QoiSpec) -> f64 {
    let target = P1State::interpolate(Arc::clone(u.mesh()), |x| qoi.target.eval(x));
    u.l2_distance(&target).powi(2)
}

/// `ĝ2(u) = s_t − ∫_{D_t} u`, exact.
pub fn qoi_g2_raw(u: &P1State, qoi: &QoiSpec) -> f64 {
    qoi.threshold - u.integral(qoi.region.0, qoi.region.1)
}

/// `σ + γ + smax(ĝ2 − γ; β)/(1−α)`.
pub fn g2_buffered_smooth(g2_raw: f64, gamma: f64, sigma: f64, alpha: f64, beta: SmaxParam) -> f64 {
    sigma + gamma + smax(g2_raw - gamma, beta) / (1.0 - alpha)
}

/// `σ + γ + max{0, ĝ2 − γ}/(1−α)`.
pub fn g2_buffered_exact(g2_raw: f64, gamma: f64, sigma: f64, alpha: f64) -> f64 {
    sigma + gamma + (g2_raw - gamma).max(0.0) / (1.0 - alpha)
}

/// Admissible control values `z̲ ≤ z(x) ≤ z̄`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBox {
    pub lower: f64,
    pub upper: f64,
}

impl ControlBox {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_finite() && self.upper.is_finite() && self.lower <= self.upper {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "control bounds [{}, {}] must be finite and ordered",
                self.lower, self.upper
            )))
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

/// Control coefficients plus the superquantile auxiliary `γ` and slack `σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub z: Vec<f64>,
    pub gamma: f64,
    pub sigma: f64,
    pub bounds: ControlBox,
}

impl ControlPoint {
    pub fn new(z: Vec<f64>, gamma: f64, sigma: f64, bounds: ControlBox) -> Self {
        Self {
            z,
            gamma,
            sigma,
            bounds,
        }
    }

    pub fn constant(n: usize, value: f64, bounds: ControlBox) -> Self {
        Self::new(vec![value; n], 0.0, 0.0, bounds)
    }

    pub fn is_feasible(&self) -> bool {
        self.sigma >= 0.0
            && self.gamma.is_finite()
            && self.z.iter().all(|&v| self.bounds.contains(v))
    }

    /// Optimization variables: `z` in expectation mode, `(z, γ, σ)` in
    /// buffered mode.
    pub fn to_vector(&self, mode: Mode) -> Vec<f64> {
        let mut x = self.z.clone();
        if mode == Mode::Buffered {
            x.push(self.gamma);
            x.push(self.sigma);
        }
        x
    }

    pub fn with_vector(&self, mode: Mode, x: &[f64]) -> Self {
        let n = self.z.len();
        let mut cp = self.clone();
        cp.z.copy_from_slice(&x[..n]);
        if mode == Mode::Buffered {
            cp.gamma = x[n];
            cp.sigma = x[n + 1];
        }
        cp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Expectation,
    Buffered,
}

/// Multiplier `y`, penalty `θ_pen` and smoothing `β` of the augmented
/// Lagrangian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlParams {
    pub multiplier: f64,
    pub penalty: f64,
    pub smoothing: SmaxParam,
}

impl AlParams {
    pub fn new(multiplier: f64, penalty: f64, smoothing: f64) -> Result<Self> {
        if !(penalty.is_finite() && penalty > 0.0) {
            return Err(Error::invalid(format!("penalty must be positive, got {penalty}")));
        }
        if !multiplier.is_finite() {
            return Err(Error::invalid("multiplier must be finite"));
        }
        Ok(Self {
            multiplier,
            penalty,
            smoothing: SmaxParam::new(smoothing)?,
        })
    }

    /// Uniform smoothing error bound `2β/(1−α)` of the smoothed residual.
    pub fn smoothing_budget(&self, alpha: f64) -> f64 {
        2.0 * self.smoothing.beta() / (1.0 - alpha)
    }
}

/// Everything defining one approximating objective `φ_n^ν`.
#[derive(Clone, Debug)]
pub struct SaaSpec {
    pub samples: Vec<FieldSample>,
    pub state_mesh: Arc<Mesh>,
    pub control_mesh: Arc<Mesh>,
    pub pde: PdeData,
    pub qoi: QoiSpec,
    pub theta_reg: f64,
    pub mode: Mode,
    pub al: AlParams,
}

impl SaaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid("the sample must contain at least one field"));
        }
        if !(self.theta_reg.is_finite() && self.theta_reg >= 0.0) {
            return Err(Error::invalid("theta_reg must be finite and nonnegative"));
        }
        let domain = self.state_mesh.domain();
        self.pde.validate(domain)?;
        self.qoi.validate(domain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Gradient {
    pub z: Vec<f64>,
    pub gamma: f64,
    pub sigma: f64,
}

impl Gradient {
    pub fn to_vector(&self, mode: Mode) -> Vec<f64> {
        let mut g = self.z.clone();
        if mode == Mode::Buffered {
            g.push(self.gamma);
            g.push(self.sigma);
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `φ_n^ν` at the point; `+∞` outside the admissible set.
    pub value: f64,
    /// `θ‖T_n z‖²`.
    pub cost: f64,
    pub mean_g1: f64,
    /// Smoothed constraint residual `w2` (zero in expectation mode).
    pub residual: f64,
    pub gradient: Option<Gradient>,
}

/// Per-sample quantities of interest at a control.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutputs {
    pub g1: Vec<f64>,
    pub g2_raw: Vec<f64>,
}

/// Assembled approximating problem. Each sample's Galerkin matrix is
/// factored once at construction and reused for every state and adjoint
/// solve.
#[derive(Debug)]
pub struct SaaProblem {
    state_mesh: Arc<Mesh>,
    control_mesh: Arc<Mesh>,
    pde: PdeData,
    qoi: QoiSpec,
    theta_reg: f64,
    mode: Mode,
    al: AlParams,
    systems: Vec<StateSystem>,
    load: ControlLoad,
    mass: SymTridiagonal,
    target: Vec<f64>,
    region: Vec<f64>,
    pool: Option<rayon::ThreadPool>,
}

struct SampleState {
    u: Vec<f64>,
    g1: f64,
    g2_raw: f64,
}

impl SaaProblem {
    pub fn new(spec: &SaaSpec) -> Result<Self> {
        spec.validate()?;
        let load = ControlLoad::assemble(&spec.state_mesh, &spec.control_mesh, &spec.pde.c1)?;
        let target = spec
            .state_mesh
            .nodes()
            .iter()
            .map(|&x| spec.qoi.target.eval(x))
            .collect();
        let mut problem = Self {
            state_mesh: Arc::clone(&spec.state_mesh),
            control_mesh: Arc::clone(&spec.control_mesh),
            pde: spec.pde.clone(),
            qoi: spec.qoi.clone(),
            theta_reg: spec.theta_reg,
            mode: spec.mode,
            al: spec.al,
            systems: Vec::new(),
            load,
            mass: mass_matrix(&spec.state_mesh),
            target,
            region: region_weights(&spec.state_mesh, spec.qoi.region.0, spec.qoi.region.1),
            pool: None,
        };
        problem.extend_samples(&spec.samples)?;
        Ok(problem)
    }

    /// Fans per-sample work out over `threads` workers. Reductions stay in
    /// sample order, so results do not depend on the thread count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(self)
    }

    /// Appends samples, assembling and factoring their systems.
    pub fn extend_samples(&mut self, samples: &[FieldSample]) -> Result<()> {
        let offset = self.systems.len();
        let mesh = &self.state_mesh;
        let pde = &self.pde;
        let build = |(j, xi): (usize, &FieldSample)| {
            StateSystem::assemble(Arc::clone(mesh), xi, pde).map_err(|e| e.at_sample(offset + j))
        };
        let new: Result<Vec<StateSystem>> = match &self.pool {
            Some(pool) => pool.install(|| samples.par_iter().enumerate().map(build).collect()),
            None => samples.iter().enumerate().map(build).collect(),
        };
        self.systems.extend(new?);
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.systems.len()
    }

    pub fn n_controls(&self) -> usize {
        self.control_mesh.n_elements()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn al(&self) -> AlParams {
        self.al
    }

    pub fn set_al(&mut self, al: AlParams) {
        self.al = al;
    }

    pub fn qoi(&self) -> &QoiSpec {
        &self.qoi
    }

    pub fn theta_reg(&self) -> f64 {
        self.theta_reg
    }

    pub fn control_mesh(&self) -> &Arc<Mesh> {
        &self.control_mesh
    }

    pub fn state_mesh(&self) -> &Arc<Mesh> {
        &self.state_mesh
    }

    /// `θ‖T_n z‖²`.
    pub fn cost(&self, z: &[f64]) -> f64 {
        self.theta_reg
            * z.iter()
                .enumerate()
                .map(|(k, v)| v * v * self.control_mesh.element_len(k))
                .sum::<f64>()
    }

    fn map_samples<T: Send>(&self, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match &self.pool {
            Some(pool) => pool.install(|| (0..self.systems.len()).into_par_iter().map(&f).collect()),
            None => (0..self.systems.len()).map(f).collect(),
        }
    }

    fn solve_samples(&self, z: &[f64]) -> Result<Vec<SampleState>> {
        if z.len() != self.n_controls() {
            return Err(Error::invalid(format!(
                "control has {} coefficients, the problem has {}",
                z.len(),
                self.n_controls()
            )));
        }
        let mut bz = vec![0.0; self.state_mesh.n_nodes()];
        self.load.apply_add(z, &mut bz);
        let states = self.map_samples(|j| {
            let u = self.systems[j].solve_with_load(&bz);
            let e: Vec<f64> = u.iter().zip(&self.target).map(|(a, b)| a - b).collect();
            let g1 = self.mass.bilinear(&e, &e);
            let g2_raw =
                self.qoi.threshold - u.iter().zip(&self.region).map(|(a, b)| a * b).sum::<f64>();
            SampleState { u, g1, g2_raw }
        });
        if let Some(j) = states
            .iter()
            .position(|s| !(s.g1.is_finite() && s.g2_raw.is_finite()))
        {
            return Err(Error::numerical("state solve produced nonfinite values").at_sample(j));
        }
        Ok(states)
    }

    /// Per-sample `g1` and `ĝ2` at `z`, in sample order.
    pub fn sample_outputs(&self, z: &[f64]) -> Result<SampleOutputs> {
        let states = self.solve_samples(z)?;
        Ok(SampleOutputs {
            g1: states.iter().map(|s| s.g1).collect(),
            g2_raw: states.iter().map(|s| s.g2_raw).collect(),
        })
    }

    /// The state `s^ν(ξ_j, z)` for sample `j`.
    pub fn state(&self, j: usize, z: &[f64]) -> P1State {
        let mut bz = vec![0.0; self.state_mesh.n_nodes()];
        self.load.apply_add(z, &mut bz);
        P1State::new(Arc::clone(&self.state_mesh), self.systems[j].solve_with_load(&bz))
            .expect("state length matches mesh")
    }

    pub fn value(&self, cp: &ControlPoint) -> Result<f64> {
        Ok(self.evaluate(cp, false)?.value)
    }

    /// Objective value and, on request, its gradient with respect to
    /// `(z, γ, σ)`. Points outside the admissible set evaluate to `+∞`
    /// without a gradient.
    pub fn evaluate(&self, cp: &ControlPoint, with_gradient: bool) -> Result<Evaluation> {
        if !cp.is_feasible() {
            return Ok(Evaluation {
                value: f64::INFINITY,
                cost: f64::INFINITY,
                mean_g1: f64::NAN,
                residual: f64::NAN,
                gradient: None,
            });
        }
        let states = self.solve_samples(&cp.z)?;
        let nu = states.len() as f64;
        let alpha = self.qoi.alpha;
        let beta = self.al.smoothing;

        let cost = self.cost(&cp.z);
        let mean_g1 = states.iter().map(|s| s.g1).sum::<f64>() / nu;
        let (residual, al_term) = match self.mode {
            Mode::Expectation => (0.0, 0.0),
            Mode::Buffered => {
                let w2 = states
                    .iter()
                    .map(|s| g2_buffered_smooth(s.g2_raw, cp.gamma, cp.sigma, alpha, beta))
                    .sum::<f64>()
                    / nu;
                (w2, self.al.multiplier * w2 + self.al.penalty * w2 * w2)
            }
        };
        let value = cost + mean_g1 + al_term;

        let gradient = with_gradient.then(|| {
            // dφ/dw2
            let dw2 = self.al.multiplier + 2.0 * self.al.penalty * residual;
            let slopes: Vec<f64> = match self.mode {
                Mode::Expectation => vec![0.0; states.len()],
                Mode::Buffered => states
                    .iter()
                    .map(|s| smax_grad(s.g2_raw - cp.gamma, beta))
                    .collect(),
            };
            let adjoints = self.map_samples(|j| {
                let s = &states[j];
                let e: Vec<f64> = s.u.iter().zip(&self.target).map(|(a, b)| a - b).collect();
                let me = self.mass.mul_vec(&e);
                // ∂g1/∂u = 2 M e, ∂ĝ2/∂u = −region
                let c2 = dw2 * slopes[j] / (1.0 - alpha);
                let dual: Vec<f64> = me
                    .iter()
                    .zip(&self.region)
                    .map(|(m, r)| (2.0 * m - c2 * r) / nu)
                    .collect();
                self.systems[j].solve_adjoint(&dual).into_values()
            });
            let mut p_sum = vec![0.0; self.state_mesh.n_nodes()];
            for p in &adjoints {
                p_sum.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            let mut gz = self.load.apply_transpose(&p_sum);
            for (k, g) in gz.iter_mut().enumerate() {
                *g += 2.0 * self.theta_reg * self.control_mesh.element_len(k) * cp.z[k];
            }
            let (gamma, sigma) = match self.mode {
                Mode::Expectation => (0.0, 0.0),
                Mode::Buffered => {
                    let mean_slope = slopes.iter().sum::<f64>() / nu;
                    (dw2 * (1.0 - mean_slope / (1.0 - alpha)), dw2)
                }
            };
            Gradient { z: gz, gamma, sigma }
        });

        Ok(Evaluation {
            value,
            cost,
            mean_g1,
            residual,
            gradient,
        })
    }

    /// Sample estimate of `ψ = E[σ + γ + max{0, ĝ2 − γ}/(1−α)]`, with `smax`
    /// in place of the max when `smooth` is set.
    pub fn residual(&self, cp: &ControlPoint, smooth: bool) -> Result<f64> {
        if self.mode != Mode::Buffered {
            return Err(Error::invalid("the constraint residual is defined in buffered mode only"));
        }
        let out = self.sample_outputs(&cp.z)?;
        Ok(residual_from_outputs(&out.g2_raw, cp, self.qoi.alpha, smooth.then_some(self.al.smoothing)))
    }

    /// Metric weights for gradient steps: `1/|K_i|` on control coefficients
    /// (the L2 Riesz map of piecewise constants) and 1 on `γ`, `σ`.
    pub fn metric(&self) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.n_controls())
            .map(|k| 1.0 / self.control_mesh.element_len(k))
            .collect();
        if self.mode == Mode::Buffered {
            w.extend([1.0, 1.0]);
        }
        w
    }
}

pub fn residual_from_outputs(
    g2_raw: &[f64],
    cp: &ControlPoint,
    alpha: f64,
    smoothing: Option<SmaxParam>,
) -> f64 {
    let nu = g2_raw.len() as f64;
    g2_raw
        .iter()
        .map(|&g| match smoothing {
            Some(beta) => g2_buffered_smooth(g, cp.gamma, cp.sigma, alpha, beta),
            None => g2_buffered_exact(g, cp.gamma, cp.sigma, alpha),
        })
        .sum::<f64>()
        / nu
}

pub fn saa_value(cp: &ControlPoint, spec: &SaaSpec) -> Result<f64> {
    SaaProblem::new(spec)?.value(cp)
}

pub fn saa_gradient(cp: &ControlPoint, spec: &SaaSpec) -> Result<Gradient> {
    let eval = SaaProblem::new(spec)?.evaluate(cp, true)?;
    eval.gradient.ok_or_else(|| {
        Error::invalid("the gradient is only defined at admissible points (finite value)")
    })
}

pub fn feasibility_residual(cp: &ControlPoint, spec: &SaaSpec, smooth: bool) -> Result<f64> {
    SaaProblem::new(spec)?.residual(cp, smooth)
}
