//! Projected-gradient inner solver and the staged outer approximation loop.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{Mesh, PdeData};
use crate::field::{sample_batch, FieldSpec, MonteCarloEstimate};
use crate::problem::{
    residual_from_outputs, AlParams, ControlBox, ControlPoint, Mode, QoiSpec, SaaProblem, SaaSpec,
};

/// Default bound on `|y|`.
pub const DEFAULT_Y_MAX: f64 = 1e6;

/// Value at a point plus a scalar diagnostic carried into traces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampled {
    pub value: f64,
    pub residual: f64,
}

/// A differentiable objective on a closed convex set with cheap projection.
pub trait SmoothObjective {
    fn dim(&self) -> usize;

    /// Value at `x`; fills `grad` when given. May return `+∞` off the
    /// admissible set.
    fn evaluate(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<Sampled>;

    fn project(&self, x: &mut [f64]);

    /// Diagonal `D` of the step metric: steps are `x − t·D·g`.
    fn metric(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerOptions {
    /// Stop when `‖x − P(x − D g)‖_{D⁻¹} ≤ tolerance·(1 + |f|)`.
    pub tolerance: f64,
    pub max_iters: usize,
    pub max_backtracks: usize,
    pub armijo: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iters: 500,
            max_backtracks: 50,
            armijo: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub value: f64,
    pub residual: f64,
    pub pg_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub pg_norm: f64,
    pub converged: bool,
    /// Set when no step satisfied the sufficient-decrease test; `x` is then
    /// the best iterate found.
    pub line_search_failed: bool,
    pub trace: Vec<TraceRow>,
}

fn projected_gradient_norm<F: SmoothObjective + ?Sized>(
    f: &F,
    x: &[f64],
    g: &[f64],
    metric: &[f64],
) -> f64 {
    let mut y: Vec<f64> = x
        .iter()
        .zip(g)
        .zip(metric)
        .map(|((xi, gi), d)| xi - d * gi)
        .collect();
    f.project(&mut y);
    x.iter()
        .zip(&y)
        .zip(metric)
        .map(|((xi, yi), d)| (xi - yi).powi(2) / d)
        .sum::<f64>()
        .sqrt()
}

/// Projected gradient descent with Armijo backtracking and
/// Barzilai–Borwein initial steps in the metric `D`.
pub fn projected_gradient<F: SmoothObjective + ?Sized>(
    f: &F,
    start: &[f64],
    opts: &InnerOptions,
) -> Result<InnerResult> {
    if start.len() != f.dim() {
        return Err(Error::invalid(format!(
            "start has length {}, objective dimension is {}",
            start.len(),
            f.dim()
        )));
    }
    if !(opts.tolerance >= 0.0 && opts.armijo > 0.0 && opts.armijo < 1.0) {
        return Err(Error::invalid("inner tolerance must be >= 0 and armijo in (0, 1)"));
    }
    let metric = f.metric();
    let n = f.dim();
    let mut x = start.to_vec();
    f.project(&mut x);
    let mut g = vec![0.0; n];
    let mut cur = f.evaluate(&x, Some(&mut g))?;
    if !cur.value.is_finite() {
        return Err(Error::invalid("objective is not finite at the projected start"));
    }

    let mut trace = Vec::new();
    let mut step = 1.0;
    let mut iterations = 0;
    let mut line_search_failed = false;
    let mut pg = projected_gradient_norm(f, &x, &g, &metric);
    let mut converged = pg <= opts.tolerance * (1.0 + cur.value.abs());
    trace.push(TraceRow {
        iteration: 0,
        value: cur.value,
        residual: cur.residual,
        pg_norm: pg,
    });

    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    while !converged && iterations < opts.max_iters {
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            for i in 0..n {
                trial[i] = x[i] - step * metric[i] * g[i];
            }
            f.project(&mut trial);
            let slope: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
            if slope >= 0.0 {
                break;
            }
            let s = f.evaluate(&trial, Some(&mut g_new))?;
            if s.value.is_finite() && s.value <= cur.value + opts.armijo * slope {
                accepted = Some(s);
                break;
            }
            step *= 0.5;
        }
        let Some(s) = accepted else {
            line_search_failed = true;
            break;
        };
        iterations += 1;

        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let d = trial[i] - x[i];
            ss += d * d / metric[i];
            sy += d * (g_new[i] - g[i]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-12, 1e12)
        } else {
            (step * 2.0).min(1e12)
        };
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_new);
        cur = s;
        pg = projected_gradient_norm(f, &x, &g, &metric);
        converged = pg <= opts.tolerance * (1.0 + cur.value.abs());
        trace.push(TraceRow {
            iteration: iterations,
            value: cur.value,
            residual: cur.residual,
            pg_norm: pg,
        });
    }

    Ok(InnerResult {
        x,
        value: cur.value,
        residual: cur.residual,
        iterations,
        pg_norm: pg,
        converged,
        line_search_failed,
        trace,
    })
}

/// Componentwise clamp of `z` to the box and `σ` to `[0, ∞)`.
pub fn project_box(point: &ControlPoint) -> ControlPoint {
    let mut p = point.clone();
    for v in &mut p.z {
        *v = p.bounds.clamp(*v);
    }
    p.sigma = p.sigma.max(0.0);
    p
}

/// `φ_n^ν` over the packed variables of a fixed-mode problem.
pub struct SaaObjective<'a> {
    problem: &'a SaaProblem,
    template: ControlPoint,
}

impl<'a> SaaObjective<'a> {
    pub fn new(problem: &'a SaaProblem, template: ControlPoint) -> Result<Self> {
        if template.z.len() != problem.n_controls() {
            return Err(Error::invalid(format!(
                "control has {} coefficients, the problem has {}",
                template.z.len(),
                problem.n_controls()
            )));
        }
        template.bounds.validate()?;
        Ok(Self { problem, template })
    }

    pub fn point(&self, x: &[f64]) -> ControlPoint {
        self.template.with_vector(self.problem.mode(), x)
    }
}

impl SmoothObjective for SaaObjective<'_> {
    fn dim(&self) -> usize {
        self.problem.n_controls()
            + match self.problem.mode() {
                Mode::Expectation => 0,
                Mode::Buffered => 2,
            }
    }

    fn evaluate(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<Sampled> {
        let eval = self.problem.evaluate(&self.point(x), grad.is_some())?;
        if let (Some(out), Some(g)) = (grad, eval.gradient) {
            out.copy_from_slice(&g.to_vector(self.problem.mode()));
        }
        Ok(Sampled {
            value: eval.value,
            residual: eval.residual,
        })
    }

    fn project(&self, x: &mut [f64]) {
        let n = self.problem.n_controls();
        for v in &mut x[..n] {
            *v = self.template.bounds.clamp(*v);
        }
        if self.problem.mode() == Mode::Buffered {
            x[n + 1] = x[n + 1].max(0.0);
        }
    }

    fn metric(&self) -> Vec<f64> {
        self.problem.metric()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerOutcome {
    pub point: ControlPoint,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub pg_norm: f64,
    pub converged: bool,
    pub line_search_failed: bool,
    pub trace: Vec<TraceRow>,
}

/// Approximately minimizes `φ_n^ν` from `start` (projected first).
pub fn inner_solve(
    start: &ControlPoint,
    problem: &SaaProblem,
    delta: f64,
    max_iters: usize,
) -> Result<InnerOutcome> {
    let opts = InnerOptions {
        tolerance: delta,
        max_iters,
        ..InnerOptions::default()
    };
    let start = project_box(start);
    let objective = SaaObjective::new(problem, start.clone())?;
    let r = projected_gradient(&objective, &start.to_vector(problem.mode()), &opts)?;
    Ok(InnerOutcome {
        point: objective.point(&r.x),
        value: r.value,
        residual: r.residual,
        iterations: r.iterations,
        pg_norm: r.pg_norm,
        converged: r.converged,
        line_search_failed: r.line_search_failed,
        trace: r.trace,
    })
}

/// `clamp(y + 2θ·residual, ±y_max)`.
pub fn multiplier_update(y: f64, theta_pen: f64, residual: f64, y_max: f64) -> f64 {
    (y + 2.0 * theta_pen * residual).clamp(-y_max, y_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub nu: usize,
    pub beta: f64,
    pub theta_pen: f64,
    pub delta: f64,
    pub max_inner_iters: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierRule {
    FixedZero,
    AugmentedLagrangian,
}

fn default_y_max() -> f64 {
    DEFAULT_Y_MAX
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub stages: Vec<Stage>,
    pub multiplier_rule: MultiplierRule,
    #[serde(default)]
    pub initial_multiplier: f64,
    #[serde(default = "default_y_max")]
    pub y_max: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("schedule has no stages"));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.nu == 0 {
                return Err(Error::invalid(format!("stage {k}: nu must be positive")));
            }
            if !(s.beta.is_finite() && s.beta > 0.0) {
                return Err(Error::invalid(format!("stage {k}: beta must be positive")));
            }
            if !(s.theta_pen.is_finite() && s.theta_pen > 0.0) {
                return Err(Error::invalid(format!("stage {k}: theta_pen must be positive")));
            }
            if !(s.delta.is_finite() && s.delta >= 0.0) {
                return Err(Error::invalid(format!("stage {k}: delta must be >= 0")));
            }
        }
        for (k, w) in self.stages.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let bad = if b.nu < a.nu {
                Some("nu decreases")
            } else if b.beta > a.beta {
                Some("beta increases")
            } else if b.theta_pen < a.theta_pen {
                Some("theta_pen decreases")
            } else if b.delta > a.delta {
                Some("delta increases")
            } else {
                None
            };
            if let Some(what) = bad {
                return Err(Error::invalid(format!("schedule {what} at stage {}", k + 1)));
            }
        }
        if !(self.y_max.is_finite() && self.y_max > 0.0) {
            return Err(Error::invalid("y_max must be positive"));
        }
        if !(self.initial_multiplier.abs() <= self.y_max) {
            return Err(Error::invalid("initial multiplier exceeds y_max"));
        }
        Ok(())
    }

    pub fn delta_limit(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.delta)
    }
}

/// Problem data for one optimization run; samples are drawn from `field`
/// with `seed`, sample `j` being stream `j`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub field: Arc<FieldSpec>,
    pub seed: u64,
    pub state_mesh: Arc<Mesh>,
    pub control_mesh: Arc<Mesh>,
    pub pde: PdeData,
    pub qoi: QoiSpec,
    pub bounds: ControlBox,
    pub theta_reg: f64,
    pub mode: Mode,
    pub start: ControlPoint,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub nu: usize,
    pub beta: f64,
    pub theta_pen: f64,
    pub delta: f64,
    /// Multiplier used during the stage.
    pub y: f64,
    /// Recorded `φ_n^ν(z̄_n^ν)`.
    pub value: f64,
    pub residual_smooth: f64,
    pub residual_nonsmooth: f64,
    /// `2β/(1−α)`.
    pub smoothing_budget: f64,
    pub inner_iters: usize,
    pub pg_norm: f64,
    pub converged: bool,
    pub line_search_failed: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapCertificate {
    pub mode: Mode,
    pub stages: Vec<StageRecord>,
    pub final_point: ControlPoint,
    pub final_multiplier: f64,
    pub delta_limit: f64,
    /// Inner stopping is a stationarity test standing in for δ-argmin
    /// membership, which cannot be observed.
    pub stationarity_surrogate: bool,
}

impl GapCertificate {
    pub fn last_completed(&self) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.failure.is_none())
    }
}

#[derive(Clone, Debug)]
pub struct OuterRun {
    pub certificate: GapCertificate,
    pub traces: Vec<Vec<TraceRow>>,
    /// Wall time per stage; kept out of the certificate so that it stays
    /// reproducible.
    pub stage_seconds: Vec<f64>,
}

/// Staged approximation loop: each stage extends the sample, updates the
/// smoothing, penalty and multiplier, and warm-starts from the previous
/// iterate.
pub fn outer_loop(instance: &Instance, schedule: &Schedule) -> Result<OuterRun> {
    schedule.validate()?;
    instance.bounds.validate()?;
    let alpha = instance.qoi.alpha;
    let mut y = match schedule.multiplier_rule {
        MultiplierRule::FixedZero => 0.0,
        MultiplierRule::AugmentedLagrangian => schedule.initial_multiplier,
    };
    let mut problem: Option<SaaProblem> = None;

    let mut point = project_box(&instance.start);
    point.bounds = instance.bounds;
    let mut stages = Vec::with_capacity(schedule.stages.len());
    let mut traces = Vec::new();
    let mut stage_seconds = Vec::new();
    for (k, stage) in schedule.stages.iter().enumerate() {
        let clock = Instant::now();
        let mut record = StageRecord {
            stage: k,
            nu: stage.nu,
            beta: stage.beta,
            theta_pen: stage.theta_pen,
            delta: stage.delta,
            y,
            value: f64::NAN,
            residual_smooth: f64::NAN,
            residual_nonsmooth: f64::NAN,
            smoothing_budget: 2.0 * stage.beta / (1.0 - alpha),
            inner_iters: 0,
            pg_norm: f64::NAN,
            converged: false,
            line_search_failed: false,
            failure: None,
        };
        let outcome = (|| {
            let al = AlParams::new(y, stage.theta_pen, stage.beta)?;
            let problem = match &mut problem {
                Some(p) => {
                    let have = p.n_samples();
                    if stage.nu > have {
                        let range = have as u64..stage.nu as u64;
                        p.extend_samples(&sample_batch(&instance.field, instance.seed, range)?)?;
                    }
                    p.set_al(al);
                    p
                }
                None => {
                    let spec = SaaSpec {
                        samples: sample_batch(&instance.field, instance.seed, 0..stage.nu as u64)?,
                        state_mesh: Arc::clone(&instance.state_mesh),
                        control_mesh: Arc::clone(&instance.control_mesh),
                        pde: instance.pde.clone(),
                        qoi: instance.qoi.clone(),
                        theta_reg: instance.theta_reg,
                        mode: instance.mode,
                        al,
                    };
                    problem.insert(SaaProblem::new(&spec)?.with_threads(instance.threads)?)
                }
            };
            let out = inner_solve(&point, problem, stage.delta, stage.max_inner_iters)?;
            let nonsmooth = match instance.mode {
                Mode::Expectation => 0.0,
                Mode::Buffered => problem.residual(&out.point, false)?,
            };
            Ok::<_, Error>((out, nonsmooth))
        })();
        match outcome {
            Ok((out, nonsmooth)) => {
                record.value = out.value;
                record.residual_smooth = out.residual;
                record.residual_nonsmooth = nonsmooth;
                record.inner_iters = out.iterations;
                record.pg_norm = out.pg_norm;
                record.converged = out.converged;
                record.line_search_failed = out.line_search_failed;
                point = out.point;
                traces.push(out.trace);
                if schedule.multiplier_rule == MultiplierRule::AugmentedLagrangian
                    && instance.mode == Mode::Buffered
                {
                    y = multiplier_update(y, stage.theta_pen, out.residual, schedule.y_max);
                }
            }
            Err(e) => {
                record.failure = Some(e.to_string());
                traces.push(Vec::new());
            }
        }
        stages.push(record);
        stage_seconds.push(clock.elapsed().as_secs_f64());
    }

    Ok(OuterRun {
        certificate: GapCertificate {
            mode: instance.mode,
            stages,
            final_point: point,
            final_multiplier: y,
            delta_limit: schedule.delta_limit(),
            stationarity_surrogate: true,
        },
        traces,
        stage_seconds,
    })
}

/// Re-evaluation of a certificate's final point on an independent sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceCheck {
    pub nu_ref: usize,
    pub seed: u64,
    /// Nonsmooth objective estimate at the final point.
    pub value: f64,
    pub value_se: f64,
    pub recorded: f64,
    pub recorded_se: f64,
    pub gap: f64,
    pub gap_bound: f64,
    pub gap_ok: bool,
    /// Nonsmooth constraint residual `ψ̂` (buffered mode).
    pub residual: Option<f64>,
    pub residual_se: Option<f64>,
    pub feasibility_tol: Option<f64>,
    pub feasible: Option<bool>,
    pub passed: bool,
}

/// Influence values whose sample standard error approximates that of the
/// nonsmooth objective estimate.
fn objective_influence(
    g1: &[f64],
    g2_raw: &[f64],
    point: &ControlPoint,
    qoi: &QoiSpec,
    mode: Mode,
    al: Option<(f64, f64)>,
) -> (f64, Vec<f64>, Option<(f64, MonteCarloEstimate)>) {
    let mean_g1 = g1.iter().sum::<f64>() / g1.len() as f64;
    match (mode, al) {
        (Mode::Buffered, Some((y, theta))) => {
            let alpha = qoi.alpha;
            let terms: Vec<f64> = g2_raw
                .iter()
                .map(|&g| point.sigma + point.gamma + (g - point.gamma).max(0.0) / (1.0 - alpha))
                .collect();
            let psi = residual_from_outputs(g2_raw, point, alpha, None);
            let slope = y + 2.0 * theta * psi;
            let infl = g1.iter().zip(&terms).map(|(a, t)| a + slope * t).collect();
            (
                mean_g1 + y * psi + theta * psi * psi,
                infl,
                Some((psi, MonteCarloEstimate::from_values(&terms))),
            )
        }
        _ => (mean_g1, g1.to_vec(), None),
    }
}

/// Checks the final point of `certificate` against an independent sample of
/// size `nu_ref` drawn with `seed`.
///
/// Expectation mode passes when `|ref − recorded| ≤ 3·SE + δ`, with SE
/// combining both samples. Buffered mode passes when the reference value
/// does not exceed the recorded one by more than `3·SE + δ` plus the
/// smoothing bound, and `|ψ̂| ≤ feasibility_tol`.
pub fn reference_check(
    instance: &Instance,
    certificate: &GapCertificate,
    nu_ref: usize,
    seed: u64,
    feasibility_tol: f64,
) -> Result<ReferenceCheck> {
    let last = certificate
        .last_completed()
        .ok_or_else(|| Error::invalid("certificate has no completed stage"))?;
    if nu_ref < 2 {
        return Err(Error::invalid("reference sample needs at least two draws"));
    }
    if seed == instance.seed {
        return Err(Error::invalid("reference seed must differ from the training seed"));
    }
    let point = &certificate.final_point;
    let al = AlParams::new(last.y, last.theta_pen, last.beta)?;
    let base = |samples| SaaSpec {
        samples,
        state_mesh: Arc::clone(&instance.state_mesh),
        control_mesh: Arc::clone(&instance.control_mesh),
        pde: instance.pde.clone(),
        qoi: instance.qoi.clone(),
        theta_reg: instance.theta_reg,
        mode: instance.mode,
        al,
    };
    let reference = SaaProblem::new(&base(sample_batch(&instance.field, seed, 0..nu_ref as u64)?))?
        .with_threads(instance.threads)?;
    let training = SaaProblem::new(&base(sample_batch(
        &instance.field,
        instance.seed,
        0..last.nu as u64,
    )?))?
    .with_threads(instance.threads)?;

    let cost = reference.cost(&point.z);
    let al_pair = Some((last.y, last.theta_pen));
    let out_ref = reference.sample_outputs(&point.z)?;
    let (v_ref, infl_ref, resid_ref) =
        objective_influence(&out_ref.g1, &out_ref.g2_raw, point, &instance.qoi, instance.mode, al_pair);
    let out_train = training.sample_outputs(&point.z)?;
    let (_, infl_train, _) =
        objective_influence(&out_train.g1, &out_train.g2_raw, point, &instance.qoi, instance.mode, al_pair);

    let value = cost + v_ref;
    let value_se = MonteCarloEstimate::from_values(&infl_ref).std_error;
    let recorded_se = MonteCarloEstimate::from_values(&infl_train).std_error;
    let se = value_se.hypot(recorded_se);
    let gap = value - last.value;

    let (gap_bound, gap_ok, residual, residual_se, feasible) = match instance.mode {
        Mode::Expectation => {
            let bound = 3.0 * se + certificate.delta_limit;
            (bound, gap.abs() <= bound, None, None, None)
        }
        Mode::Buffered => {
            let eps = last.smoothing_budget;
            let w2 = last.residual_smooth;
            let smoothing = eps * (last.y.abs() + 2.0 * last.theta_pen * w2.abs() + last.theta_pen * eps);
            let bound = 3.0 * se + certificate.delta_limit + smoothing;
            let (psi, est) = resid_ref.expect("buffered mode yields a residual");
            (
                bound,
                gap <= bound,
                Some(psi),
                Some(est.std_error),
                Some(psi.abs() <= feasibility_tol),
            )
        }
    };
    Ok(ReferenceCheck {
        nu_ref,
        seed,
        value,
        value_se,
        recorded: last.value,
        recorded_se,
        gap,
        gap_bound,
        gap_ok,
        residual,
        residual_se,
        feasibility_tol: (instance.mode == Mode::Buffered).then_some(feasibility_tol),
        feasible,
        passed: gap_ok && feasible.unwrap_or(true),
    })
}
