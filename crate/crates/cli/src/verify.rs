//! Property batteries behind `ouu verify`. Each check reports the measured
//! quantity, the bound it is held to and whether it passed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use ouu::fem::{
    embed_control_norm, estimate_rate, solve_state, Mesh, P0Control, P1State, PdeData,
};
use ouu::field::{integrability_probe, sample_batch, sample_field_indexed, FieldSpec};
use ouu::problem::{AlParams, ControlBox, ControlPoint, Mode, QoiSpec, SaaProblem, SaaSpec};
use ouu::profile::Profile;
use ouu::risk::{
    buffered_probability, smax, superquantile, superquantile_tail_average, DiscreteRv, SmaxParam,
};

use crate::config::VerifyConfig;
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn at_least(name: &str, measured: f64, bound: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            pass: measured >= bound,
            detail,
        }
    }

    fn at_most(name: &str, measured: f64, bound: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            pass: measured <= bound,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} measured={:e} bound={:e} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound,
            self.detail
        )
    }
}

const UNIT: (f64, f64) = (0.0, 1.0);

/// L2 error rate of the Robin instance with exact solution `sin(πx)`.
pub fn fem_rate(levels: &[usize], min_rate: f64) -> Result<Check, CliError> {
    let pi = std::f64::consts::PI;
    let xi = sample_field_indexed(&Arc::new(FieldSpec::deterministic(UNIT, 0.0)), 0, 0)?;
    let data = PdeData {
        c1: Profile::constant(1.0),
        c2: (1.0, 1.0),
        s_e: (-pi, -pi),
    };
    let mut errors = Vec::with_capacity(levels.len());
    for &n in levels {
        let mesh = Arc::new(Mesh::uniform(n, UNIT)?);
        let z = P0Control::project(Arc::clone(&mesh), &Profile::sine(pi * pi, pi));
        let u = solve_state(&mesh, &xi, &data, &z)?;
        errors.push((mesh.h(), u.l2_error(|x| (pi * x).sin())));
    }
    let rate = estimate_rate(&errors)?;
    Ok(Check::at_least(
        "fem_l2_rate",
        rate,
        min_rate,
        format!("levels={levels:?}"),
    ))
}

/// Smallest per-sample order of `‖s^h − s^{h/2}‖_V` over fixed field draws.
pub fn field_rate(
    field: &FieldSpec,
    samples: usize,
    seed: u64,
    levels: &[usize],
    min_rate: f64,
) -> Result<Check, CliError> {
    let spec = Arc::new(field.clone());
    let data = PdeData {
        c1: Profile::constant(1.0),
        c2: (1.0, 1.0),
        s_e: (0.0, 0.0),
    };
    let control_mesh = Arc::new(Mesh::uniform(4, field.domain)?);
    let z = P0Control::new(control_mesh, vec![1.0, 0.5, -0.5, 1.0])?;
    let draws = sample_batch(&spec, seed, 0..samples as u64)?;
    let mut worst = f64::INFINITY;
    let mut worst_v = f64::INFINITY;
    for xi in &draws {
        let mut diffs = Vec::with_capacity(levels.len());
        let mut diffs_v = Vec::with_capacity(levels.len());
        for &n in levels {
            let coarse_mesh = Arc::new(Mesh::uniform(n, field.domain)?);
            let fine_mesh = Arc::new(Mesh::uniform(2 * n, field.domain)?);
            let coarse = solve_state(&coarse_mesh, xi, &data, &z)?;
            let fine = solve_state(&fine_mesh, xi, &data, &z)?;
            let lifted = P1State::interpolate(Arc::clone(&fine_mesh), |x| coarse.eval(x));
            let diff: Vec<f64> = fine
                .values()
                .iter()
                .zip(lifted.values())
                .map(|(a, b)| a - b)
                .collect();
            let d = P1State::new(fine_mesh, diff)?;
            diffs.push((coarse_mesh.h(), d.l2_error(|_| 0.0)));
            diffs_v.push((coarse_mesh.h(), d.v_norm()));
        }
        worst = worst.min(estimate_rate(&diffs)?);
        worst_v = worst_v.min(estimate_rate(&diffs_v)?);
    }
    Ok(Check::at_least(
        "field_sample_rate",
        worst,
        min_rate,
        format!("samples={samples} min over samples of the L2 order (V-norm order {worst_v:.3})"),
    ))
}

/// Largest `(smax − max{0,γ})/(2β)` over the grid; also fails on any
/// negative gap.
pub fn smax_bound(betas: &[f64], range: f64, step: f64) -> Result<Check, CliError> {
    let cells = (2.0 * range / step).round() as usize;
    let mut worst_ratio = 0.0f64;
    let mut min_gap = f64::INFINITY;
    for &b in betas {
        let beta = SmaxParam::new(b)?;
        for i in 0..=cells {
            let g = -range + i as f64 * step;
            let gap = smax(g, beta) - g.max(0.0);
            min_gap = min_gap.min(gap);
            worst_ratio = worst_ratio.max(gap / (2.0 * b));
        }
    }
    let mut check = Check::at_most(
        "smax_bound",
        worst_ratio,
        1.0,
        format!("betas={betas:?} min_gap={min_gap:e}"),
    );
    check.pass &= min_gap >= 0.0;
    Ok(check)
}

fn random_law(rng: &mut ChaCha20Rng, max_size: usize) -> Result<DiscreteRv, CliError> {
    let n = rng.random_range(1..=max_size);
    let shift: f64 = rng.random_range(-2.0..2.0);
    let scale: f64 = rng.random_range(0.1..3.0);
    let values: Vec<f64> = (0..n)
        .map(|_| shift + scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Ok(DiscreteRv::new(values, raw.iter().map(|w| w / total).collect())?)
}

/// Largest gap between the RU minimization and the sorted tail average.
pub fn superquantile_oracle(
    laws: usize,
    max_size: usize,
    seed: u64,
    tol: f64,
) -> Result<Check, CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..laws {
        let rv = random_law(&mut rng, max_size)?;
        let alpha = rng.random_range(0.01..0.99);
        let ru = superquantile(&rv, alpha)?;
        let tail = superquantile_tail_average(&rv, alpha)?;
        worst = worst.max((ru - tail).abs());
    }
    Ok(Check::at_most(
        "superquantile_oracle",
        worst,
        tol,
        format!("laws={laws} max_size={max_size}"),
    ))
}

/// Count of `(law, α)` pairs where `bprob ≤ 1−α` and `Q̄_α ≤ 0` disagree.
pub fn buffered_duality(laws: usize, alphas: usize, seed: u64) -> Result<Check, CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..laws {
        let rv = random_law(&mut rng, 60)?;
        let bprob = buffered_probability(&rv)?;
        for k in 1..=alphas {
            let alpha = k as f64 / (alphas + 1) as f64;
            let lhs = bprob <= 1.0 - alpha;
            let rhs = superquantile(&rv, alpha)? <= 0.0;
            if lhs != rhs {
                mismatches += 1;
            }
        }
    }
    Ok(Check::at_most(
        "buffered_duality",
        mismatches as f64,
        0.0,
        format!("laws={laws} alphas={alphas}"),
    ))
}

/// The three closed-form buffered probabilities.
pub fn buffered_closed_cases(tol: f64) -> Result<Check, CliError> {
    let cases = [
        (vec![-1.0, -2.0], 0.0),
        (vec![-1.0, 1.0], 1.0),
        (vec![-3.0, 1.0], 2.0 / 3.0),
    ];
    let mut worst = 0.0f64;
    for (values, expected) in cases {
        let p = buffered_probability(&DiscreteRv::uniform(values)?)?;
        worst = worst.max((p - expected).abs());
    }
    Ok(Check::at_most(
        "buffered_closed_cases",
        worst,
        tol,
        "{-1,-2}->0 {-1,1}->1 {-3,1}->2/3".into(),
    ))
}

/// `|‖T_n z‖ − sqrt(h)‖z‖₂|` over random uniform meshes and coefficients.
pub fn embedding_identity(trials: usize, seed: u64, tol: f64) -> Result<Check, CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=256);
        let mesh = Arc::new(Mesh::uniform(n, UNIT)?);
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let euclid = z.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        let expected = mesh.h().sqrt() * euclid;
        let got = embed_control_norm(&P0Control::new(mesh, z)?);
        worst = worst.max((got - expected).abs());
    }
    Ok(Check::at_most(
        "embedding_identity",
        worst,
        tol,
        format!("trials={trials}"),
    ))
}

/// Random buffered instance for gradient checks.
pub fn random_buffered_instance(
    rng: &mut ChaCha20Rng,
    n: usize,
    nu: usize,
) -> Result<(SaaSpec, ControlPoint), CliError> {
    let pi = std::f64::consts::PI;
    let field = Arc::new(FieldSpec::new(
        UNIT,
        Profile::constant(rng.random_range(-0.3..0.3)),
        vec![
            Profile::constant(rng.random_range(0.05..0.4)),
            Profile::sine(rng.random_range(0.05..0.4), pi),
            Profile::sine(rng.random_range(0.0..0.2), 2.0 * pi),
        ],
    )?);
    let control_mesh = Arc::new(Mesh::uniform(n, UNIT)?);
    let state_mesh = Arc::new(Mesh::uniform(4 * n, UNIT)?);
    let lo = rng.random_range(0.0..0.4);
    let hi = rng.random_range(0.6..1.0);
    let spec = SaaSpec {
        samples: sample_batch(&field, rng.random(), 0..nu as u64)?,
        state_mesh,
        control_mesh,
        pde: PdeData {
            c1: Profile::constant(rng.random_range(0.5..2.0)),
            c2: (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)),
            s_e: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        },
        qoi: QoiSpec {
            target: Profile::sine(rng.random_range(-0.5..0.5), pi),
            region: (lo, hi),
            threshold: rng.random_range(-0.2..0.2),
            alpha: rng.random_range(0.5..0.95),
        },
        theta_reg: rng.random_range(1e-4..1e-2),
        mode: Mode::Buffered,
        al: AlParams::new(
            rng.random_range(0.0..1.0),
            rng.random_range(1.0..10.0),
            rng.random_range(0.05..0.5),
        )?,
    };
    let bounds = ControlBox::new(-2.0, 2.0)?;
    let point = ControlPoint::new(
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        rng.random_range(-0.2..0.2),
        rng.random_range(0.01..0.2),
        bounds,
    );
    Ok((spec, point))
}

/// Fourth-order central differences of the objective along each coordinate.
pub fn finite_difference_gradient(
    problem: &SaaProblem,
    point: &ControlPoint,
) -> Result<Vec<f64>, CliError> {
    let mode = problem.mode();
    let x = point.to_vector(mode);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = 1e-4 * x[i].abs().max(1.0);
        let f = |t: f64| -> Result<f64, CliError> {
            let mut y = x.clone();
            y[i] += t;
            Ok(problem.value(&point.with_vector(mode, &y))?)
        };
        let d1 = f(h)? - f(-h)?;
        let d2 = f(2.0 * h)? - f(-2.0 * h)?;
        out.push((8.0 * d1 - d2) / (12.0 * h));
    }
    Ok(out)
}

/// Largest coordinatewise relative error between the adjoint gradient and
/// finite differences over random buffered instances.
pub fn gradient_check(instances: usize, seed: u64, tol: f64) -> Result<Check, CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..instances {
        let n = [4, 16][k % 2];
        let nu = [8, 32][(k / 2) % 2];
        let (spec, point) = random_buffered_instance(&mut rng, n, nu)?;
        let problem = SaaProblem::new(&spec)?;
        let grad = problem
            .evaluate(&point, true)?
            .gradient
            .expect("feasible point has a gradient")
            .to_vector(Mode::Buffered);
        let fd = finite_difference_gradient(&problem, &point)?;
        for (g, d) in grad.iter().zip(&fd) {
            let rel = (g - d).abs() / g.abs().max(d.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(Check::at_most(
        "adjoint_gradient",
        worst,
        tol,
        format!("instances={instances} n in {{4,16}} nu in {{8,32}}"),
    ))
}

/// `E[c̄^p/c̲^q]` for each field and exponent pair: finite, and within
/// `z` standard errors of the lognormal moment when the field is constant
/// in space.
pub fn integrability(
    fields: &[FieldSpec],
    pairs: &[(f64, f64)],
    samples: usize,
    seed: u64,
    z: f64,
) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for (k, field) in fields.iter().enumerate() {
        let spec = Arc::new(field.clone());
        let constant = constant_mode_parameters(field);
        for &(p, q) in pairs {
            let est = integrability_probe(&spec, p, q, samples, seed)?;
            let name = format!("integrability_field{k}_p{p}_q{q}");
            let mut check = match constant {
                Some((m, var)) => {
                    let e = p - q;
                    let oracle = (e * m + 0.5 * e * e * var).exp();
                    let dev = (est.mean - oracle).abs();
                    Check::at_most(
                        &name,
                        dev,
                        z * est.std_error,
                        format!("estimate={:e} se={:e} lognormal_oracle={oracle:e}", est.mean, est.std_error),
                    )
                }
                None => Check::at_most(
                    &name,
                    est.mean,
                    f64::MAX,
                    format!("estimate={:e} se={:e} finite", est.mean, est.std_error),
                ),
            };
            check.pass &= est.mean.is_finite() && est.std_error.is_finite();
            checks.push(check);
        }
    }
    Ok(checks)
}

/// `(m, Σ a²)` for a field whose mean and modes are spatially constant.
fn constant_mode_parameters(field: &FieldSpec) -> Option<(f64, f64)> {
    let value = |p: &Profile| match p {
        Profile::Constant { value } => Some(*value),
        _ => None,
    };
    let m = value(&field.mean)?;
    let mut var = 0.0;
    for mode in &field.modes {
        let a = value(mode)?;
        var += a * a;
    }
    Some((m, var))
}

/// Every battery in a fixed order.
pub fn run_all(cfg: &VerifyConfig) -> Result<Vec<Check>, CliError> {
    let mut checks = vec![
        fem_rate(&cfg.fem_levels, cfg.fem_min_rate)?,
        field_rate(
            &cfg.field,
            cfg.field_samples,
            cfg.seed,
            &cfg.field_levels,
            cfg.field_min_rate,
        )?,
        smax_bound(&cfg.smax_betas, cfg.smax_range, cfg.smax_step)?,
        superquantile_oracle(cfg.oracle_laws, cfg.oracle_max_size, cfg.seed, cfg.oracle_tol)?,
        buffered_duality(cfg.duality_laws, cfg.duality_alphas, cfg.seed)?,
        buffered_closed_cases(cfg.closed_case_tol)?,
        embedding_identity(cfg.embedding_trials, cfg.seed, cfg.embedding_tol)?,
        gradient_check(cfg.gradient_instances, cfg.seed, cfg.gradient_tol)?,
    ];
    checks.extend(integrability(
        &cfg.integrability_fields,
        &cfg.integrability_pairs,
        cfg.integrability_samples,
        cfg.seed,
        cfg.integrability_z,
    )?);
    Ok(checks)
}
