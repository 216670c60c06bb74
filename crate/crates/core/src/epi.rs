//! Synthetic problems with known infima for checking the `ε + δ`
//! optimality-gap bound of nested approximations.
//!
//! The actual problem is `f(x) = ‖x − x*‖²` over square-integrable
//! functions on `[0, 1]`, realized on a reference grid of `2^14` cells.
//! `X^n` holds piecewise constants on `n = 2^k` uniform cells and `T_n`
//! embeds them into the grid. Approximations `f_n^ν` add a perturbation
//! depending only on `‖T_n x‖` that vanishes as `ν → ∞`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{projected_gradient, InnerOptions, Sampled, SmoothObjective};
use crate::profile::Profile;

pub const MAX_LEVEL: u32 = 14;
pub const REFERENCE_CELLS: usize = 1 << MAX_LEVEL;
/// Floating-point allowance added to every bound.
pub const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `‖T_n x‖²/ν`
    Quadratic,
    /// `1/ν`
    Shift,
    /// `sin(ν‖T_n x‖)/ν`
    Oscillatory,
}

impl Perturbation {
    fn value(self, r: f64, nu: f64) -> f64 {
        match self {
            Perturbation::Quadratic => r * r / nu,
            Perturbation::Shift => 1.0 / nu,
            Perturbation::Oscillatory => (nu * r).sin() / nu,
        }
    }

    /// Derivative in `r = ‖T_n x‖`.
    fn slope(self, r: f64, nu: f64) -> f64 {
        match self {
            Perturbation::Quadratic => 2.0 * r / nu,
            Perturbation::Shift => 0.0,
            Perturbation::Oscillatory => (nu * r).cos(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    pub name: String,
    pub target: Profile,
    pub perturbation: Perturbation,
    /// `x*` as cell averages on the reference grid.
    grid_target: Vec<f64>,
    /// Known `inf f`.
    pub true_inf: f64,
    /// Bound on the distance between grid and exact `f`.
    pub grid_slack: f64,
}

impl SyntheticProblem {
    pub fn new(name: &str, target: Profile, perturbation: Perturbation) -> Result<Self> {
        target.validate()?;
        let h = 1.0 / REFERENCE_CELLS as f64;
        let grid_target: Vec<f64> = (0..REFERENCE_CELLS)
            .map(|i| target.average(i as f64 * h, (i + 1) as f64 * h))
            .collect();
        let grid_slack = if target.is_piecewise_constant() {
            let mut breaks = Vec::new();
            target.breakpoints_in(0.0, 1.0, &mut breaks);
            if breaks
                .iter()
                .any(|b| (b * REFERENCE_CELLS as f64).fract() != 0.0)
            {
                return Err(Error::invalid(
                    "step targets must jump on reference grid nodes",
                ));
            }
            0.0
        } else {
            // ‖x* − P x*‖² ≤ L² h² / 12 for Lipschitz x*
            target.lipschitz_bound().powi(2) * h * h / 12.0
        };
        Ok(Self {
            name: name.to_string(),
            target,
            perturbation,
            grid_target,
            true_inf: 0.0,
            grid_slack,
        })
    }

    /// The three bundled problems.
    pub fn bundled() -> Vec<Self> {
        let step_breaks: Vec<f64> = (0..=16).map(|i| i as f64 / 16.0).collect();
        let step_values: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.25 - 0.4).collect();
        let step = Profile::Step {
            breaks: step_breaks,
            values: step_values,
        };
        let smooth = Profile::Sum {
            terms: vec![
                Profile::sine(1.0, 2.0 * std::f64::consts::PI),
                Profile::Affine {
                    slope: 0.5,
                    intercept: 0.2,
                },
            ],
        };
        vec![
            Self::new("step-quadratic", step, Perturbation::Quadratic).expect("valid bundled problem"),
            Self::new("smooth-shift", smooth.clone(), Perturbation::Shift).expect("valid bundled problem"),
            Self::new("smooth-oscillatory", smooth, Perturbation::Oscillatory)
                .expect("valid bundled problem"),
        ]
    }

    fn check_level(level: u32) -> Result<usize> {
        if level > MAX_LEVEL {
            return Err(Error::invalid(format!("level {level} exceeds {MAX_LEVEL}")));
        }
        Ok(1 << level)
    }

    /// `f` on the reference grid for a grid function.
    pub fn f_grid(&self, x: &[f64]) -> f64 {
        let h = 1.0 / REFERENCE_CELLS as f64;
        h * x
            .iter()
            .zip(&self.grid_target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    }

    /// `T_n x` on the reference grid.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let rep = REFERENCE_CELLS / x.len();
        x.iter().flat_map(|&v| std::iter::repeat_n(v, rep)).collect()
    }

    /// `f(T_n x)`.
    pub fn f(&self, x: &[f64]) -> f64 {
        self.f_grid(&self.embed(x))
    }

    /// Best approximation `P_n x*` (cell averages) and `inf(f + ι_{X^n})`.
    pub fn projection(&self, level: u32) -> Result<(Vec<f64>, f64)> {
        let n = Self::check_level(level)?;
        let rep = REFERENCE_CELLS / n;
        let h = 1.0 / REFERENCE_CELLS as f64;
        let mut c = Vec::with_capacity(n);
        let mut inf = 0.0;
        for chunk in self.grid_target.chunks(rep) {
            let m = chunk.iter().sum::<f64>() / rep as f64;
            inf += h * chunk.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            c.push(m);
        }
        Ok((c, inf))
    }

    /// `inf f_n`.
    pub fn inf_restricted(&self, level: u32) -> Result<f64> {
        Ok(self.projection(level)?.1)
    }

    /// `‖T_n x‖`.
    pub fn norm(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// `f_n^ν(x)`.
    pub fn f_approx(&self, x: &[f64], nu: f64) -> f64 {
        self.f(x) + self.perturbation.value(Self::norm(x), nu)
    }

    /// Constant `c` with `f(T_n x̄) ≤ inf f_n + δ_in + c/ν` for any
    /// `δ_in`-minimizer `x̄` of `f_n^ν`.
    pub fn perturbation_constant(&self) -> f64 {
        match self.perturbation {
            Perturbation::Quadratic => self.f_grid(&vec![0.0; REFERENCE_CELLS]),
            Perturbation::Shift => 0.0,
            Perturbation::Oscillatory => 2.0,
        }
    }

    /// `inf f_n^ν`. With `c = P_n x*` and `R = ‖c‖`, the infimum is
    /// `inf f_n + min_{r ≥ 0} [(r − R)² + p(r)]`, the minimum taken in
    /// closed form or by brute force on a fine grid.
    pub fn inf_approx(&self, level: u32, nu: f64) -> Result<f64> {
        let (c, inf_n) = self.projection(level)?;
        let big_r = Self::norm(&c);
        let radial = match self.perturbation {
            Perturbation::Quadratic => big_r * big_r / (nu + 1.0),
            Perturbation::Shift => 1.0 / nu,
            Perturbation::Oscillatory => {
                let phi = |r: f64| (r - big_r).powi(2) + (nu * r).sin() / nu;
                minimize_1d(&phi, (big_r - 1.5).max(0.0), big_r + 1.5, nu).1
            }
        };
        Ok(inf_n + radial)
    }

    /// Smallest level whose restricted infimum is within `epsilon` of
    /// `inf f`, by bisection over the nested levels.
    pub fn select_level(&self, epsilon: f64) -> Result<u32> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        let ok = |k| -> Result<bool> { Ok(self.inf_restricted(k)? <= self.true_inf + epsilon) };
        if !ok(MAX_LEVEL)? {
            return Err(Error::invalid(format!(
                "epsilon {epsilon:e} is below the resolution of the reference grid"
            )));
        }
        let (mut lo, mut hi) = (0u32, MAX_LEVEL);
        if ok(0)? {
            return Ok(0);
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if ok(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

/// Grid scan followed by golden-section refinement of the best bracket.
/// The scan step resolves oscillations of frequency `nu`.
fn minimize_1d(phi: &impl Fn(f64) -> f64, lo: f64, hi: f64, nu: f64) -> (f64, f64) {
    let step = (0.02 / nu.max(1.0)).min(1e-3);
    let cells = ((hi - lo) / step).ceil().max(1.0) as usize;
    let step = (hi - lo) / cells as f64;
    let (mut best_t, mut best) = (lo, phi(lo));
    for i in 1..=cells {
        let t = lo + i as f64 * step;
        let v = phi(t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    let (mut a, mut b) = ((best_t - step).max(lo), (best_t + step).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if phi(c) < phi(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let t = 0.5 * (a + b);
    let v = phi(t);
    if v < best {
        (t, v)
    } else {
        (best_t, best)
    }
}

struct Restricted<'a> {
    problem: &'a SyntheticProblem,
    target: Vec<f64>,
    inf_n: f64,
    nu: f64,
}

impl Restricted<'_> {
    /// `f_n^ν(x)` via `f(T_n x) = ‖T_n x − T_n P_n x*‖² + inf f_n`.
    fn value(&self, x: &[f64]) -> f64 {
        let h = 1.0 / x.len() as f64;
        let dist = h * x
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        dist + self.inf_n + self.problem.perturbation.value(SyntheticProblem::norm(x), self.nu)
    }
}

impl SmoothObjective for Restricted<'_> {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn evaluate(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<Sampled> {
        let value = self.value(x);
        if let Some(g) = grad {
            let h = 1.0 / x.len() as f64;
            let r = SyntheticProblem::norm(x);
            let s = if r > 0.0 {
                self.problem.perturbation.slope(r, self.nu) / r
            } else {
                0.0
            };
            for i in 0..x.len() {
                g[i] = 2.0 * h * (x[i] - self.target[i]) + s * h * x[i];
            }
        }
        Ok(Sampled {
            value,
            residual: 0.0,
        })
    }

    fn project(&self, _x: &mut [f64]) {}

    fn metric(&self) -> Vec<f64> {
        vec![self.target.len() as f64; self.target.len()]
    }
}

/// Approximate minimizer of `f_n^ν`: projected gradient to stationarity,
/// then a line scan along the ray through the iterate (the perturbation is
/// radial, so stationary points lie on the line spanned by `P_n x*`), then
/// gradient polishing.
pub fn minimize_approx(
    problem: &SyntheticProblem,
    level: u32,
    nu: f64,
    start: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    let (target, inf_n) = problem.projection(level)?;
    if start.len() != target.len() {
        return Err(Error::invalid("start has the wrong length for the level"));
    }
    let objective = Restricted {
        problem,
        target,
        inf_n,
        nu,
    };
    // value gap ≤ ‖pg‖² / 4 near a minimizer with curvature ≥ 2
    let opts = InnerOptions {
        tolerance: 0.25 * delta.sqrt(),
        max_iters: 5000,
        ..InnerOptions::default()
    };
    let x = projected_gradient(&objective, start, &opts)?.x;
    let r = SyntheticProblem::norm(&x);
    let dir: Vec<f64> = if r > 0.0 {
        x.iter().map(|v| v / r).collect()
    } else {
        let c = SyntheticProblem::norm(&objective.target);
        objective.target.iter().map(|v| v / c.max(f64::MIN_POSITIVE)).collect()
    };
    let reach = SyntheticProblem::norm(&objective.target) + 2.0;
    let line = |t: f64| {
        let y: Vec<f64> = dir.iter().map(|d| t * d).collect();
        objective.value(&y)
    };
    let (t, _) = minimize_1d(&line, -reach, reach, nu);
    let scanned: Vec<f64> = dir.iter().map(|d| t * d).collect();
    let polished = projected_gradient(&objective, &scanned, &opts)?;
    Ok(if polished.value <= objective.value(&x) {
        polished.x
    } else {
        x
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapRow {
    pub nu: f64,
    /// `δ^ν = δ + c/ν`.
    pub delta_nu: f64,
    /// `inf f_n^ν` from the oracle.
    pub inf_estimate: f64,
    /// `f_n^ν(x̄)`.
    pub achieved: f64,
    /// `f(T_n x̄)`.
    pub f_value: f64,
    /// `inf f + ε + δ^ν + slack`.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    pub problem: String,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub level: u32,
    pub n: usize,
    pub true_inf: f64,
    pub inf_restricted: f64,
    pub grid_slack: f64,
    pub rows: Vec<GapRow>,
    /// `f_n^ν(x^ν) − f_n(x)` along `x^ν → x` at the largest `ν`.
    pub liminf_margin: f64,
    pub liminf_ok: bool,
    /// `inf f_n^ν − inf f_n` at the largest `ν`.
    pub limsup_excess: f64,
    pub limsup_ok: bool,
    pub passed: bool,
}

impl GapReport {
    pub fn failed_stage(&self) -> Option<&GapRow> {
        self.rows.iter().find(|r| !r.pass)
    }
}

/// Runs the staged minimization of `f_n^ν` over `nus` at the level chosen
/// for `epsilon`, warm-starting each stage, and checks
/// `f(T_n x̄) ≤ inf f + ε + δ^ν + slack` at every stage.
pub fn run_gap_demo(
    problem: &SyntheticProblem,
    epsilon: f64,
    delta: f64,
    nus: &[f64],
    seed: u64,
) -> Result<GapReport> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta must be positive"));
    }
    if nus.is_empty() || nus.iter().any(|&v| !(v >= 1.0 && v.is_finite())) {
        return Err(Error::invalid("nu schedule must be nonempty with entries >= 1"));
    }
    if nus.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("nu schedule must be nondecreasing"));
    }
    let level = problem.select_level(epsilon)?;
    let n = 1usize << level;
    let inf_restricted = problem.inf_restricted(level)?;
    let c = problem.perturbation_constant();
    let slack = problem.grid_slack + ROUNDING_SLACK;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut rows = Vec::with_capacity(nus.len());
    for &nu in nus {
        x = minimize_approx(problem, level, nu, &x, delta)?;
        let delta_nu = delta + c / nu;
        let f_value = problem.f(&x);
        let bound = problem.true_inf + epsilon + delta_nu + slack;
        rows.push(GapRow {
            nu,
            delta_nu,
            inf_estimate: problem.inf_approx(level, nu)?,
            achieved: problem.f_approx(&x, nu),
            f_value,
            bound,
            pass: f_value <= bound,
        });
    }

    let nu_max = *nus.last().expect("nonempty");
    let (center, _) = problem.projection(level)?;
    let probe: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let moved: Vec<f64> = center.iter().zip(&probe).map(|(a, e)| a + e / nu_max).collect();
    let liminf_margin = problem.f_approx(&moved, nu_max) - problem.f(&center);
    let limsup_excess = problem.inf_approx(level, nu_max)? - inf_restricted;
    let tol = (1.0f64).max(c) / nu_max + ROUNDING_SLACK;
    let liminf_ok = liminf_margin >= -tol;
    let limsup_ok = limsup_excess <= tol;
    let passed = rows.iter().all(|r| r.pass) && liminf_ok && limsup_ok;
    Ok(GapReport {
        problem: problem.name.clone(),
        seed,
        epsilon,
        delta,
        level,
        n,
        true_inf: problem.true_inf,
        inf_restricted,
        grid_slack: problem.grid_slack,
        rows,
        liminf_margin,
        liminf_ok,
        limsup_excess,
        limsup_ok,
        passed,
    })
}

pub fn write_gap_csv<W: std::io::Write + ?Sized>(out: &mut W, reports: &[GapReport]) -> std::io::Result<()> {
    writeln!(out, "problem,seed,n,nu,inf_estimate,achieved,bound,pass")?;
    for rep in reports {
        for r in &rep.rows {
            writeln!(
                out,
                "{},{},{},{},{:.17e},{:.17e},{:.17e},{}",
                rep.problem,
                rep.seed,
                rep.n,
                r.nu,
                r.inf_estimate,
                r.achieved,
                r.bound,
                if r.pass { "pass" } else { "fail" }
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const NUS: [f64; 6] = [1.0, 4.0, 16.0, 64.0, 256.0, 1024.0];

    #[test]
    fn step_target_is_exact_at_its_level() {
        let p = &SyntheticProblem::bundled()[0];
        assert!(p.inf_restricted(4).unwrap() < 1e-20);
        assert!(p.inf_restricted(3).unwrap() > 1e-3);
        assert_eq!(p.select_level(1e-6).unwrap(), 4);
        assert_eq!(p.grid_slack, 0.0);
    }

    #[test]
    fn restricted_infimum_decreases_with_level() {
        let p = &SyntheticProblem::bundled()[1];
        let infs: Vec<f64> = (0..=MAX_LEVEL).map(|k| p.inf_restricted(k).unwrap()).collect();
        assert!(infs.windows(2).all(|w| w[1] <= w[0]));
        assert!(infs[MAX_LEVEL as usize] < 1e-14);
        // cell-average error of a smooth function is O(h²)
        let ratio = infs[8] / infs[9];
        assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn closed_form_infima_match_brute_force_minimization() {
        for p in SyntheticProblem::bundled() {
            for nu in [1.0, 16.0, 256.0] {
                let level = 3;
                let (c, inf_n) = p.projection(level).unwrap();
                let r = SyntheticProblem::norm(&c);
                let dir: Vec<f64> = c.iter().map(|v| v / r).collect();
                // along the ray of c, on a fine grid
                let obj = Restricted {
                    problem: &p,
                    target: c.clone(),
                    inf_n,
                    nu,
                };
                let mut best = f64::INFINITY;
                let m = 200_000;
                for i in 0..=m {
                    let t = -0.5 + (r + 2.0) * i as f64 / m as f64;
                    let y: Vec<f64> = dir.iter().map(|d| t * d).collect();
                    best = best.min(obj.value(&y));
                }
                let y: Vec<f64> = dir.iter().map(|d| 0.9 * r * d).collect();
                assert!((obj.value(&y) - p.f_approx(&y, nu)).abs() < 1e-12);
                let oracle = p.inf_approx(level, nu).unwrap();
                assert!(oracle <= best + 1e-12, "{} nu={nu}", p.name);
                assert!(best - oracle < 1e-6, "{} nu={nu}: {best} vs {oracle}", p.name);
                assert!(oracle <= p.f_approx(&c, nu) + 1e-15 && oracle >= inf_n - 1.0 / nu);
            }
        }
    }

    #[test]
    fn embedding_preserves_norm() {
        let p = &SyntheticProblem::bundled()[1];
        let x = [0.3, -1.0, 2.0, 0.5];
        let grid = p.embed(&x);
        let grid_norm = (grid.iter().map(|v| v * v).sum::<f64>() / REFERENCE_CELLS as f64).sqrt();
        assert!((grid_norm - SyntheticProblem::norm(&x)).abs() < 1e-14);
    }

    #[test]
    fn shift_perturbation_keeps_minimizer() {
        let p = &SyntheticProblem::bundled()[1];
        let level = 5;
        let (c, _) = p.projection(level).unwrap();
        let start = vec![0.0; 32];
        for nu in [1.0, 10.0] {
            let x = minimize_approx(p, level, nu, &start, 1e-12).unwrap();
            let err = x.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-5);
        }
    }

    #[test]
    fn bound_holds_for_bundled_problems_across_seeds() {
        for p in SyntheticProblem::bundled() {
            for seed in 0..3 {
                let rep = run_gap_demo(&p, 1e-4, 1e-6, &NUS, seed).unwrap();
                assert!(rep.passed, "{} seed {seed}: {:?}", p.name, rep.failed_stage());
                for row in &rep.rows {
                    assert!(row.achieved <= row.inf_estimate + 1e-6 + 1e-9, "{} {row:?}", p.name);
                }
            }
        }
    }

    #[test]
    fn demo_rejects_bad_schedules() {
        let p = &SyntheticProblem::bundled()[0];
        assert!(run_gap_demo(p, 1e-4, 1e-6, &[], 0).is_err());
        assert!(run_gap_demo(p, 1e-4, 1e-6, &[4.0, 2.0], 0).is_err());
        assert!(run_gap_demo(p, 0.0, 1e-6, &NUS, 0).is_err());
        assert!(p.inf_restricted(MAX_LEVEL + 1).is_err());
    }

    #[test]
    fn csv_has_one_row_per_stage() {
        let p = &SyntheticProblem::bundled()[2];
        let rep = run_gap_demo(p, 1e-3, 1e-6, &[1.0, 8.0], 4).unwrap();
        let mut buf = Vec::new();
        write_gap_csv(&mut buf, &[rep]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("problem,seed,n,nu,inf_estimate,achieved,bound,pass\n"));
    }
}
