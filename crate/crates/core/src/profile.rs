//! Scalar functions on an interval with exact antiderivatives.
//!
//! These describe the log-conductivity mean and modes, the control-load
//! coefficient, target states and controls read from experiment configs.
//! Every variant integrates in closed form, so cell averages and loads built
//! from them are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Constant {
        value: f64,
    },
    /// Piecewise constant: `values[i]` on `[breaks[i], breaks[i+1])`.
    /// Outside `[breaks[0], breaks[last]]` the end values extend.
    Step {
        breaks: Vec<f64>,
        values: Vec<f64>,
    },
    /// `amplitude * cos(wavenumber * x + phase)`.
    Harmonic {
        amplitude: f64,
        wavenumber: f64,
        #[serde(default)]
        phase: f64,
    },
    Affine {
        slope: f64,
        intercept: f64,
    },
    Sum {
        terms: Vec<Profile>,
    },
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Profile::Constant { value }
    }

    pub fn zero() -> Self {
        Profile::constant(0.0)
    }

    /// `amplitude * sin(wavenumber * x)`.
    pub fn sine(amplitude: f64, wavenumber: f64) -> Self {
        Profile::Harmonic {
            amplitude,
            wavenumber,
            phase: -std::f64::consts::FRAC_PI_2,
        }
    }

    /// Indicator of `[lo, hi)` scaled by `height`, zero elsewhere on `domain`.
    pub fn indicator(domain: (f64, f64), lo: f64, hi: f64, height: f64) -> Self {
        let mut breaks = vec![domain.0];
        let mut values = Vec::new();
        if lo > domain.0 {
            breaks.push(lo);
            values.push(0.0);
        }
        values.push(height);
        if hi < domain.1 {
            breaks.push(hi);
            values.push(0.0);
        }
        breaks.push(domain.1);
        Profile::Step { breaks, values }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Profile::Constant { value } => finite(*value, "constant value"),
            Profile::Step { breaks, values } => {
                if values.is_empty() || breaks.len() != values.len() + 1 {
                    return Err(Error::invalid(format!(
                        "step profile needs len(breaks) = len(values) + 1 with at least one value, got {} breaks and {} values",
                        breaks.len(),
                        values.len()
                    )));
                }
                for v in breaks.iter().chain(values) {
                    finite(*v, "step profile entry")?;
                }
                if breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid("step breaks must be strictly increasing"));
                }
                Ok(())
            }
            Profile::Harmonic {
                amplitude,
                wavenumber,
                phase,
            } => {
                finite(*amplitude, "harmonic amplitude")?;
                finite(*wavenumber, "harmonic wavenumber")?;
                finite(*phase, "harmonic phase")
            }
            Profile::Affine { slope, intercept } => {
                finite(*slope, "affine slope")?;
                finite(*intercept, "affine intercept")
            }
            Profile::Sum { terms } => terms.iter().try_for_each(Profile::validate),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Profile::Constant { value } => *value,
            Profile::Step { breaks, values } => {
                // right-continuous; partition_point gives the first break > x
                let k = breaks.partition_point(|&b| b <= x);
                values[k.saturating_sub(1).min(values.len() - 1)]
            }
            Profile::Harmonic {
                amplitude,
                wavenumber,
                phase,
            } => amplitude * (wavenumber * x + phase).cos(),
            Profile::Affine { slope, intercept } => slope * x + intercept,
            Profile::Sum { terms } => terms.iter().map(|t| t.eval(x)).sum(),
        }
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            Profile::Constant { value } => value * (b - a),
            Profile::Step { breaks, .. } => {
                let mut cuts = vec![a];
                cuts.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
                cuts.push(b);
                cuts.windows(2)
                    .map(|w| self.eval(0.5 * (w[0] + w[1])) * (w[1] - w[0]))
                    .sum()
            }
            Profile::Harmonic {
                amplitude,
                wavenumber,
                phase,
            } => {
                if *wavenumber == 0.0 {
                    amplitude * phase.cos() * (b - a)
                } else {
                    amplitude / wavenumber
                        * ((wavenumber * b + phase).sin() - (wavenumber * a + phase).sin())
                }
            }
            Profile::Affine { slope, intercept } => {
                0.5 * slope * (b * b - a * a) + intercept * (b - a)
            }
            Profile::Sum { terms } => terms.iter().map(|t| t.integral(a, b)).sum(),
        }
    }

    pub fn average(&self, a: f64, b: f64) -> f64 {
        self.integral(a, b) / (b - a)
    }

    /// True when the function is constant between its breakpoints.
    pub fn is_piecewise_constant(&self) -> bool {
        match self {
            Profile::Constant { .. } | Profile::Step { .. } => true,
            Profile::Harmonic {
                amplitude,
                wavenumber,
                ..
            } => *amplitude == 0.0 || *wavenumber == 0.0,
            Profile::Affine { slope, .. } => *slope == 0.0,
            Profile::Sum { terms } => terms.iter().all(Profile::is_piecewise_constant),
        }
    }

    /// Discontinuity locations strictly inside `(a, b)`, unsorted.
    pub fn breakpoints_in(&self, a: f64, b: f64, out: &mut Vec<f64>) {
        match self {
            Profile::Step { breaks, .. } => {
                out.extend(breaks.iter().copied().filter(|&x| x > a && x < b))
            }
            Profile::Sum { terms } => terms.iter().for_each(|t| t.breakpoints_in(a, b, out)),
            _ => {}
        }
    }

    /// Upper bound on |f'| away from breakpoints.
    pub fn lipschitz_bound(&self) -> f64 {
        match self {
            Profile::Constant { .. } | Profile::Step { .. } => 0.0,
            Profile::Harmonic {
                amplitude,
                wavenumber,
                ..
            } => (amplitude * wavenumber).abs(),
            Profile::Affine { slope, .. } => slope.abs(),
            Profile::Sum { terms } => terms.iter().map(Profile::lipschitz_bound).sum(),
        }
    }
}

fn finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be finite, got {v}")))
    }
}
