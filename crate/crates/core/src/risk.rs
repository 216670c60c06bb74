//! Risk and reliability functionals of discrete random variables, plus the
//! softplus-type `smax` surrogate for `max{0, γ}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

/// Finitely supported law: `values[i]` with probability `weights[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteRv {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteRv {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("a discrete random variable needs at least one atom"));
        }
        if values.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} values but {} weights",
                values.len(),
                weights.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("values must be finite"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("weights must be positive and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { values, weights })
    }

    /// Empirical law with weight `1/ν` per value.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let w = 1.0 / values.len().max(1) as f64;
        let n = values.len();
        Self::new(values, vec![w; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.expect(|v| v)
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| w * f(*v))
            .sum()
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v + c).collect(),
            weights: self.weights.clone(),
        }
    }

    /// Atoms sorted by value with their cumulative weights.
    fn sorted(&self) -> (Vec<f64>, Vec<f64>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]));
        let vals: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
        let mut acc = 0.0;
        let cdf = idx
            .iter()
            .map(|&i| {
                acc += self.weights[i];
                acc
            })
            .collect();
        (vals, cdf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SmaxParam(f64);

impl TryFrom<f64> for SmaxParam {
    type Error = Error;

    fn try_from(beta: f64) -> Result<Self> {
        Self::new(beta)
    }
}

impl From<SmaxParam> for f64 {
    fn from(b: SmaxParam) -> f64 {
        b.0
    }
}

impl SmaxParam {
    pub fn new(beta: f64) -> Result<Self> {
        if beta.is_finite() && beta > 0.0 {
            Ok(Self(beta))
        } else {
            Err(Error::invalid(format!("smoothing parameter must be positive, got {beta}")))
        }
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

/// `β ln(1 + exp(γ/β))`, evaluated as `max{0,γ} + β ln1p(exp(-|γ|/β))`.
pub fn smax(gamma: f64, beta: SmaxParam) -> f64 {
    let b = beta.0;
    gamma.max(0.0) + b * (-(gamma.abs()) / b).exp().ln_1p()
}

/// Derivative of [`smax`]: the logistic function `1/(1+exp(-γ/β))`.
pub fn smax_grad(gamma: f64, beta: SmaxParam) -> f64 {
    let t = gamma / beta.0;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_level(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in [0, 1), got {alpha}")))
    }
}

/// Left-continuous generalized inverse: smallest value with CDF ≥ α.
pub fn quantile(rv: &DiscreteRv, alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let (vals, cdf) = rv.sorted();
    let k = cdf.partition_point(|&c| c < alpha).min(vals.len() - 1);
    Ok(vals[k])
}

/// Rockafellar–Uryasev objective `γ + E[max{0, η-γ}]/(1-α)`.
pub fn ru_objective(rv: &DiscreteRv, alpha: f64, gamma: f64) -> f64 {
    gamma + rv.expect(|v| (v - gamma).max(0.0)) / (1.0 - alpha)
}

/// α-superquantile (CVaR) as the minimum of the Rockafellar–Uryasev
/// objective. The objective is convex and piecewise linear with kinks at the
/// atoms and is minimized at the α-quantile; the neighboring atoms are also
/// evaluated so that rounding in the cumulative weights cannot pick a point
/// off the minimizing segment.
pub fn superquantile(rv: &DiscreteRv, alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let (vals, cdf) = rv.sorted();
    let k = cdf.partition_point(|&c| c < alpha).min(vals.len() - 1);
    let lo = k.saturating_sub(1);
    let hi = (k + 1).min(vals.len() - 1);
    Ok((lo..=hi)
        .map(|i| ru_objective(rv, alpha, vals[i]))
        .fold(f64::INFINITY, f64::min))
}

/// `E[max{0, η}]/(1-α)`.
pub fn penalty_regret(rv: &DiscreteRv, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(rv.expect(|v| v.max(0.0)) / (1.0 - alpha))
}

/// Search window `[ε, 1-ε]` for the buffered-probability root.
pub const BPROB_ALPHA_EPS: f64 = 1e-12;

/// Buffered failure probability `bprob{η > 0}`:
/// 0 when `η ≤ 0` almost surely, 1 when `E[η] ≥ 0`, and otherwise `1 - α*`
/// where `α*` is the smallest level with zero superquantile.
pub fn buffered_probability(rv: &DiscreteRv) -> Result<f64> {
    if rv.is_empty() {
        return Err(Error::invalid("buffered probability of an empty law"));
    }
    if rv.values.iter().all(|&v| v <= 0.0) {
        return Ok(0.0);
    }
    if rv.mean() >= 0.0 {
        return Ok(1.0);
    }
    // α ↦ Q̄_α is continuous and nondecreasing; bisect for the leftmost zero
    let (mut lo, mut hi) = (BPROB_ALPHA_EPS, 1.0 - BPROB_ALPHA_EPS);
    if superquantile(rv, lo)? >= 0.0 {
        return Ok(1.0 - lo);
    }
    if superquantile(rv, hi)? < 0.0 {
        return Ok(1.0 - hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if superquantile(rv, mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(1.0 - hi)
}

/// Tail-average superquantile computed directly from sorted atoms: the mean
/// of the upper `1-α` probability mass, splitting the boundary atom.
pub fn superquantile_tail_average(rv: &DiscreteRv, alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let mut atoms: Vec<(f64, f64)> = rv.values.iter().copied().zip(rv.weights.iter().copied()).collect();
    atoms.sort_by(|a, b| b.0.total_cmp(&a.0));
    let tail = 1.0 - alpha;
    let mut remaining = tail;
    let mut acc = 0.0;
    for (v, w) in atoms {
        let take = w.min(remaining);
        acc += take * v;
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }
    // weights may sum to 1 - O(1e-16); spread the rounding residue at the bottom
    Ok(acc / (tail - remaining.max(0.0)))
}

/// Summary statistics emitted by `risk eval`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskSummary {
    pub alpha: f64,
    pub mean: f64,
    pub quantile: f64,
    pub superquantile: f64,
    pub penalty_regret: Option<f64>,
    pub buffered_probability: f64,
}

pub fn summarize(rv: &DiscreteRv, alpha: f64) -> Result<RiskSummary> {
    Ok(RiskSummary {
        alpha,
        mean: rv.mean(),
        quantile: quantile(rv, alpha)?,
        superquantile: superquantile(rv, alpha)?,
        penalty_regret: (alpha > 0.0).then(|| penalty_regret(rv, alpha)).transpose()?,
        buffered_probability: buffered_probability(rv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn beta(b: f64) -> SmaxParam {
        SmaxParam::new(b).unwrap()
    }

    fn uniform(v: &[f64]) -> DiscreteRv {
        DiscreteRv::uniform(v.to_vec()).unwrap()
    }

    #[test]
    fn smax_examples() {
        let b = beta(0.3);
        assert!((smax(0.0, b) - 0.3 * 2f64.ln()).abs() < 1e-15);
        for g in [-3.0, -0.1, 0.0, 0.7, 12.0] {
            assert!((smax(g, b) - smax(-g, b) - g).abs() < 1e-14);
        }
        // β ln(1+e^500) = 50 + 0.1·ln(1+e^-500); the correction is below 1e-200
        assert!((smax(50.0, beta(0.1)) - 50.0).abs() < 1e-12);
        assert!(smax(50.0, beta(0.1)) - 50.0 <= 0.2);
    }

    #[test]
    fn smax_grad_examples() {
        let b = beta(0.2);
        assert_eq!(smax_grad(0.0, b), 0.5);
        assert!((smax_grad(-50.0 * 0.2, b) - 0.0).abs() < 1e-12);
        assert!((smax_grad(50.0 * 0.2, b) - 1.0).abs() < 1e-12);
        let b = beta(0.05);
        let (g, h) = (0.3, 1e-5);
        let fd = (smax(g + h, b) - smax(g - h, b)) / (2.0 * h);
        assert!((fd - smax_grad(g, b)).abs() < 1e-8);
    }

    #[test]
    fn smax_param_must_be_positive() {
        assert!(SmaxParam::new(0.0).is_err());
        assert!(SmaxParam::new(-1.0).is_err());
        assert!(SmaxParam::new(f64::NAN).is_err());
    }

    #[test]
    fn smax_error_band_on_grid() {
        for b in [1.0, 0.1, 0.01] {
            let p = beta(b);
            for k in -2000..=2000 {
                let g = k as f64 * 0.05;
                let gap = smax(g, p) - g.max(0.0);
                assert!((0.0..=2.0 * b).contains(&gap));
            }
        }
    }

    #[test]
    fn superquantile_examples() {
        let rv = uniform(&[1.0, 2.0, 3.0, 4.0]);
        assert!((superquantile(&rv, 0.5).unwrap() - 3.5).abs() < 1e-15);
        assert!((superquantile(&rv, 0.0).unwrap() - 2.5).abs() < 1e-15);
        let c = uniform(&[1.7, 1.7, 1.7]);
        for a in [0.0, 0.3, 0.99] {
            assert!((superquantile(&c, a).unwrap() - 1.7).abs() < 1e-15);
        }
        assert!(superquantile(&rv, 1.0).unwrap_err().is_invalid_argument());
        assert!(superquantile(&rv, -0.1).is_err());
    }

    #[test]
    fn quantile_is_left_continuous() {
        let rv = uniform(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(quantile(&rv, 0.5).unwrap(), 2.0);
        assert_eq!(quantile(&rv, 0.51).unwrap(), 3.0);
        assert_eq!(quantile(&rv, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn buffered_probability_examples() {
        assert_eq!(buffered_probability(&uniform(&[-1.0, -2.0])).unwrap(), 0.0);
        assert_eq!(buffered_probability(&uniform(&[-1.0, 1.0])).unwrap(), 1.0);
        let p = buffered_probability(&uniform(&[-3.0, 1.0])).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-9, "{p}");
        // zero atoms do not count as failures
        assert_eq!(buffered_probability(&uniform(&[0.0, -1.0])).unwrap(), 0.0);
    }

    #[test]
    fn penalty_regret_examples() {
        let rv = uniform(&[-1.0, 1.0]);
        assert_eq!(penalty_regret(&rv, 0.5).unwrap(), 1.0);
        assert_eq!(penalty_regret(&uniform(&[-1.0, -4.0, 0.0]), 0.3).unwrap(), 0.0);
        assert!(penalty_regret(&rv, 0.0).is_err());
        assert!(penalty_regret(&rv, 1.0).is_err());
    }

    #[test]
    fn regret_minimization_recovers_superquantile() {
        // grid-and-refine minimization of γ + V(η - γ), independent of the
        // quantile shortcut used by `superquantile`
        let rv = DiscreteRv::new(vec![0.3, -1.2, 2.5, 0.9, 1.1], vec![0.1, 0.3, 0.15, 0.25, 0.2])
            .unwrap();
        for alpha in [0.1, 0.5, 0.8, 0.95] {
            let obj = |g: f64| g + penalty_regret(&rv.shifted(-g), alpha).unwrap();
            let (mut lo, mut hi) = (-5.0, 5.0);
            let mut best = f64::INFINITY;
            for _ in 0..30 {
                let step = (hi - lo) / 200.0;
                let mut arg = lo;
                for k in 0..=200 {
                    let g = lo + k as f64 * step;
                    let v = obj(g);
                    if v < best {
                        best = v;
                        arg = g;
                    }
                }
                lo = arg - 2.0 * step;
                hi = arg + 2.0 * step;
            }
            assert!((best - superquantile(&rv, alpha).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_malformed_laws() {
        assert!(DiscreteRv::new(vec![], vec![]).is_err());
        assert!(DiscreteRv::new(vec![1.0], vec![0.5]).is_err());
        assert!(DiscreteRv::new(vec![1.0, 2.0], vec![1.0, 0.0]).is_err());
        assert!(DiscreteRv::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiscreteRv::uniform(vec![]).is_err());
    }

    fn arb_rv() -> impl Strategy<Value = DiscreteRv> {
        prop::collection::vec((-10.0f64..10.0, 0.01f64..1.0), 1..60).prop_map(|atoms| {
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            let (v, w): (Vec<f64>, Vec<f64>) =
                atoms.into_iter().map(|(v, w)| (v, w / total)).unzip();
            DiscreteRv::new(v, w).unwrap()
        })
    }

    proptest! {
        #[test]
        fn ru_form_matches_tail_average(rv in arb_rv(), alpha in 0.0f64..0.999) {
            let a = superquantile(&rv, alpha).unwrap();
            let b = superquantile_tail_average(&rv, alpha).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }

        #[test]
        fn superquantile_monotone_and_translation_equivariant(
            rv in arb_rv(), a1 in 0.0f64..0.99, a2 in 0.0f64..0.99, c in -5.0f64..5.0
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let q_lo = superquantile(&rv, lo).unwrap();
            let q_hi = superquantile(&rv, hi).unwrap();
            prop_assert!(q_lo <= q_hi + 1e-12);
            prop_assert!(q_lo >= rv.mean() - 1e-12);
            let shifted = superquantile(&rv.shifted(c), lo).unwrap();
            prop_assert!((shifted - q_lo - c).abs() < 1e-10);
        }

        #[test]
        fn buffered_duality(rv in arb_rv(), alpha in 0.001f64..0.999) {
            let p = buffered_probability(&rv).unwrap();
            let q = superquantile(&rv, alpha).unwrap();
            // skip levels within bisection resolution of the root
            prop_assume!(q.abs() > 1e-9);
            prop_assert_eq!(p <= 1.0 - alpha, q <= 0.0);
        }

        #[test]
        fn smax_convex_and_grad_in_unit_interval(g in -20.0f64..20.0, b in 0.01f64..2.0) {
            let p = beta(b);
            let d = smax_grad(g, p);
            prop_assert!(d > 0.0 || g / b < -700.0);
            prop_assert!(d < 1.0 || g / b > 36.0);
            let h = 1e-3 * b;
            let second = smax(g + h, p) - 2.0 * smax(g, p) + smax(g - h, p);
            prop_assert!(second >= -1e-10);
        }
    }
}
