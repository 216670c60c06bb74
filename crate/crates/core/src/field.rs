//! Log-linear random conductivity fields
//! `ξ(x) = exp(b0(x) + Σ_j b_j(x) y_j)` with iid standard normal `y_j`.
//!
//! Samples are drawn from a ChaCha stream keyed on `(seed, index)`, so sample
//! `j` of a run does not depend on how many other samples were drawn or in
//! which order.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::Profile;

/// Inflation applied to grid-estimated bounds of non-piecewise-constant fields.
pub const BOUND_INFLATION: f64 = 1.01;

/// Default number of grid cells used to bound smooth fields.
pub const DEFAULT_BOUND_CELLS: usize = 640;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub domain: (f64, f64),
    /// Mean of the log-conductivity.
    pub mean: Profile,
    /// Coefficient functions multiplying the standard normal variables.
    #[serde(default)]
    pub modes: Vec<Profile>,
    /// Grid resolution for bounding fields that are not piecewise constant.
    #[serde(default = "default_bound_cells")]
    pub bound_cells: usize,
}

fn default_bound_cells() -> usize {
    DEFAULT_BOUND_CELLS
}

impl FieldSpec {
    pub fn new(domain: (f64, f64), mean: Profile, modes: Vec<Profile>) -> Result<Self> {
        let spec = Self {
            domain,
            mean,
            modes,
            bound_cells: DEFAULT_BOUND_CELLS,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// ξ ≡ exp(log_value), no randomness.
    pub fn deterministic(domain: (f64, f64), log_value: f64) -> Self {
        Self {
            domain,
            mean: Profile::constant(log_value),
            modes: Vec::new(),
            bound_cells: DEFAULT_BOUND_CELLS,
        }
    }

    pub fn with_bound_cells(mut self, cells: usize) -> Self {
        self.bound_cells = cells;
        self
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.domain;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid(format!(
                "field domain ({a}, {b}) must be a finite nonempty interval"
            )));
        }
        if self.bound_cells == 0 {
            return Err(Error::invalid("bound_cells must be positive"));
        }
        self.mean.validate()?;
        self.modes.iter().try_for_each(Profile::validate)
    }

    fn is_piecewise_constant(&self) -> bool {
        self.mean.is_piecewise_constant() && self.modes.iter().all(Profile::is_piecewise_constant)
    }

    fn log_eval(&self, y: &[f64], x: f64) -> f64 {
        self.mean.eval(x)
            + self
                .modes
                .iter()
                .zip(y)
                .map(|(b, yj)| b.eval(x) * yj)
                .sum::<f64>()
    }
}

/// One realization of the conductivity field together with its essential
/// bounds over the closed domain.
#[derive(Clone, Debug)]
pub struct FieldSample {
    spec: Arc<FieldSpec>,
    y: Vec<f64>,
    c_lower: f64,
    c_upper: f64,
}

impl FieldSample {
    /// Builds the sample for given standard-normal coordinates.
    pub fn from_coordinates(spec: Arc<FieldSpec>, y: Vec<f64>) -> Result<Self> {
        if y.len() != spec.n_modes() {
            return Err(Error::invalid(format!(
                "expected {} field coordinates, got {}",
                spec.n_modes(),
                y.len()
            )));
        }
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("nonfinite field coordinate {v}")));
        }
        let (lo, hi) = log_bounds(&spec, &y);
        let (c_lower, c_upper) = (lo.exp(), hi.exp());
        if !(c_lower > 0.0 && c_upper.is_finite()) {
            return Err(Error::numerical(format!(
                "field bounds ({c_lower:e}, {c_upper:e}) violate 0 < c_lower <= c_upper < inf"
            )));
        }
        Ok(Self {
            spec,
            y,
            c_lower,
            c_upper,
        })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn coordinates(&self) -> &[f64] {
        &self.y
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.spec.log_eval(&self.y, x).exp()
    }

    pub fn log_eval(&self, x: f64) -> f64 {
        self.spec.log_eval(&self.y, x)
    }

    pub fn c_lower(&self) -> f64 {
        self.c_lower
    }

    pub fn c_upper(&self) -> f64 {
        self.c_upper
    }
}

fn log_bounds(spec: &FieldSpec, y: &[f64]) -> (f64, f64) {
    let (a, b) = spec.domain;
    let mut breaks = vec![a, b];
    spec.mean.breakpoints_in(a, b, &mut breaks);
    for m in &spec.modes {
        m.breakpoints_in(a, b, &mut breaks);
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut visit = |x: f64| {
        let v = spec.log_eval(y, x);
        lo = lo.min(v);
        hi = hi.max(v);
    };

    if spec.is_piecewise_constant() {
        // constant on each piece: the midpoints attain the essential bounds
        for w in breaks.windows(2) {
            visit(0.5 * (w[0] + w[1]));
        }
        return (lo, hi);
    }

    let n = spec.bound_cells;
    for w in breaks.windows(2) {
        // sample every piece on the global grid plus just inside its ends
        let (s, t) = (w[0], w[1]);
        let inset = (t - s) * 1e-9;
        visit(s + inset);
        visit(t - inset);
        let first = ((s - a) / (b - a) * n as f64).ceil() as usize;
        let last = ((t - a) / (b - a) * n as f64).floor() as usize;
        for k in first..=last.min(n) {
            let x = a + (b - a) * k as f64 / n as f64;
            if x > s && x < t {
                visit(x);
            }
        }
    }
    let ln_inflation = BOUND_INFLATION.ln();
    (lo - ln_inflation, hi + ln_inflation)
}

/// Draws sample `index` of the stream keyed on `seed`.
pub fn sample_field_indexed(spec: &Arc<FieldSpec>, seed: u64, index: u64) -> Result<FieldSample> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let y: Vec<f64> = (0..spec.n_modes())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    FieldSample::from_coordinates(Arc::clone(spec), y)
}

/// Draws the first sample of the stream keyed on `seed`.
pub fn sample_field(spec: &Arc<FieldSpec>, seed: u64) -> Result<FieldSample> {
    sample_field_indexed(spec, seed, 0)
}

/// Samples with indices in `range`, in index order.
pub fn sample_batch(
    spec: &Arc<FieldSpec>,
    seed: u64,
    range: std::ops::Range<u64>,
) -> Result<Vec<FieldSample>> {
    range
        .map(|j| sample_field_indexed(spec, seed, j))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl MonteCarloEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// Monte Carlo estimate of `E[c_upper^p / c_lower^q]`.
pub fn integrability_probe(
    spec: &Arc<FieldSpec>,
    p: f64,
    q: f64,
    n_mc: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=3.0).contains(&q) {
        return Err(Error::invalid(format!(
            "integrability exponents must satisfy 0 <= p <= 1 and 0 <= q <= 3, got p={p}, q={q}"
        )));
    }
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be at least 1"));
    }
    let mut values = Vec::with_capacity(n_mc);
    for j in 0..n_mc as u64 {
        let s = sample_field_indexed(spec, seed, j)?;
        let v = s.c_upper().powf(p) / s.c_lower().powf(q);
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "integrand c_upper^p / c_lower^q is {v} at sample {j}"
            )));
        }
        values.push(v);
    }
    Ok(MonteCarloEstimate::from_values(&values))
}

/// Dumps `x, ξ(x)` on a uniform grid of `cells` cells.
pub fn write_field_csv<W: std::io::Write + ?Sized>(
    out: &mut W,
    sample: &FieldSample,
    cells: usize,
) -> std::io::Result<()> {
    let (a, b) = sample.spec().domain;
    writeln!(out, "x,xi")?;
    for k in 0..=cells {
        let x = a + (b - a) * k as f64 / cells as f64;
        writeln!(out, "{},{}", x, sample.eval(x))?;
    }
    Ok(())
}
