//! One-dimensional finite elements for the Robin heat problem
//!
//! ```text
//! -(ξ u')' = c1 z          in (a, b)
//!  ξ u'·n  = c2 (s_e - u)  at x = a, b   (n = -1 at a, +1 at b)
//! ```
//!
//! States live in the continuous piecewise-linear space on a state mesh,
//! controls are piecewise constant on a (possibly different) control mesh.
//! The bilinear form is `a(u,v;ξ) = ∫ ξ u'v' + Σ_ends c2 u v`; the right-hand
//! side is `ℓ(v) + b(z,v) = Σ_ends c2 s_e v + ∫ c1 z v`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldSample;
use crate::profile::Profile;
use crate::tridiag::{LdlFactor, SymTridiagonal};

/// Partition of an interval into elements.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    nodes: Vec<f64>,
    h: f64,
}

impl Mesh {
    pub fn uniform(n_elements: usize, domain: (f64, f64)) -> Result<Self> {
        let (a, b) = domain;
        if n_elements == 0 {
            return Err(Error::invalid("a mesh needs at least one element"));
        }
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid(format!(
                "mesh domain ({a}, {b}) must be a finite nonempty interval"
            )));
        }
        let len = b - a;
        let mut nodes: Vec<f64> = (0..=n_elements)
            .map(|i| a + len * i as f64 / n_elements as f64)
            .collect();
        nodes[n_elements] = b;
        Ok(Self {
            nodes,
            h: len / n_elements as f64,
        })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("a mesh needs at least two nodes"));
        }
        if nodes.iter().any(|x| !x.is_finite()) || nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("mesh nodes must be finite and strictly increasing"));
        }
        let h = nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        Ok(Self { nodes, h })
    }

    pub fn n_elements(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Largest element length.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.nodes[0], self.nodes[self.nodes.len() - 1])
    }

    pub fn element(&self, k: usize) -> (f64, f64) {
        (self.nodes[k], self.nodes[k + 1])
    }

    pub fn element_len(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    /// Element containing `x`; points on an interior node go to the right.
    pub fn locate(&self, x: f64) -> usize {
        let k = self.nodes.partition_point(|&node| node <= x);
        k.saturating_sub(1).min(self.n_elements() - 1)
    }
}

/// Piecewise-constant control `Σ_i z_i ψ_i`.
#[derive(Clone, Debug)]
pub struct P0Control {
    mesh: Arc<Mesh>,
    coeffs: Vec<f64>,
}

impl P0Control {
    pub fn new(mesh: Arc<Mesh>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != mesh.n_elements() {
            return Err(Error::invalid(format!(
                "control has {} coefficients for {} elements",
                coeffs.len(),
                mesh.n_elements()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("control coefficients must be finite"));
        }
        Ok(Self { mesh, coeffs })
    }

    pub fn zeros(mesh: Arc<Mesh>) -> Self {
        let n = mesh.n_elements();
        Self {
            mesh,
            coeffs: vec![0.0; n],
        }
    }

    /// L2 projection of `profile`, i.e. its exact cell averages.
    pub fn project(mesh: Arc<Mesh>, profile: &Profile) -> Self {
        let coeffs = (0..mesh.n_elements())
            .map(|k| {
                let (s, t) = mesh.element(k);
                profile.average(s, t)
            })
            .collect();
        Self { mesh, coeffs }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs[self.mesh.locate(x)]
    }
}

/// `‖T_n(z_n)‖_{L2} = sqrt(Σ_i z_i² |K_i|)`.
pub fn embed_control_norm(z: &P0Control) -> f64 {
    z.coeffs
        .iter()
        .enumerate()
        .map(|(k, c)| c * c * z.mesh.element_len(k))
        .sum::<f64>()
        .sqrt()
}

/// Continuous piecewise-linear function given by its nodal values.
#[derive(Clone, Debug)]
pub struct P1State {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
}

impl P1State {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_nodes() {
            return Err(Error::invalid(format!(
                "state has {} nodal values for {} nodes",
                values.len(),
                mesh.n_nodes()
            )));
        }
        Ok(Self { mesh, values })
    }

    pub fn interpolate(mesh: Arc<Mesh>, f: impl Fn(f64) -> f64) -> Self {
        let values = mesh.nodes().iter().map(|&x| f(x)).collect();
        Self { mesh, values }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.mesh.locate(x);
        let (s, t) = self.mesh.element(k);
        let w = (x - s) / (t - s);
        (1.0 - w) * self.values[k] + w * self.values[k + 1]
    }

    /// Exact integral over `[lo, hi] ∩ domain`.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.mesh.n_elements() {
            let (s, t) = self.mesh.element(k);
            let (p, q) = (s.max(lo), t.min(hi));
            if q > p {
                total += 0.5 * (q - p) * (self.eval_in(k, p) + self.eval_in(k, q));
            }
        }
        total
    }

    fn eval_in(&self, k: usize, x: f64) -> f64 {
        let (s, t) = self.mesh.element(k);
        let w = (x - s) / (t - s);
        (1.0 - w) * self.values[k] + w * self.values[k + 1]
    }

    pub fn l2_norm(&self) -> f64 {
        (0..self.mesh.n_elements())
            .map(|k| {
                let (a, b) = (self.values[k], self.values[k + 1]);
                self.mesh.element_len(k) * (a * a + a * b + b * b) / 3.0
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn h1_seminorm(&self) -> f64 {
        (0..self.mesh.n_elements())
            .map(|k| (self.values[k + 1] - self.values[k]).powi(2) / self.mesh.element_len(k))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖u‖_V = ‖u‖_{L2} + ‖u'‖_{L2}`.
    pub fn v_norm(&self) -> f64 {
        self.l2_norm() + self.h1_seminorm()
    }

    /// Exact L2 distance to another P1 function on any mesh of the same domain.
    pub fn l2_distance(&self, other: &P1State) -> f64 {
        let mut cuts: Vec<f64> = self
            .mesh
            .nodes()
            .iter()
            .chain(other.mesh.nodes())
            .copied()
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2)
            .map(|w| {
                let (s, t) = (w[0], w[1]);
                let mid = 0.5 * (s + t);
                let ks = self.mesh.locate(mid);
                let ko = other.mesh.locate(mid);
                let a = self.eval_in(ks, s) - other.eval_in(ko, s);
                let b = self.eval_in(ks, t) - other.eval_in(ko, t);
                (t - s) * (a * a + a * b + b * b) / 3.0
            })
            .sum::<f64>()
            .sqrt()
    }

    /// L2 distance to a smooth function, 5-point Gauss per element.
    pub fn l2_error(&self, exact: impl Fn(f64) -> f64) -> f64 {
        (0..self.mesh.n_elements())
            .map(|k| {
                let (s, t) = self.mesh.element(k);
                let half = 0.5 * (t - s);
                let mid = 0.5 * (s + t);
                GAUSS5
                    .iter()
                    .map(|&(xi, w)| {
                        let x = mid + half * xi;
                        w * half * (self.eval_in(k, x) - exact(x)).powi(2)
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

/// Deterministic coefficients of the heat problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeData {
    /// Control coefficient; must be piecewise constant and nonnegative.
    pub c1: Profile,
    /// Robin coefficients at the left and right end.
    pub c2: (f64, f64),
    /// Exterior temperature at the left and right end.
    pub s_e: (f64, f64),
}

impl PdeData {
    pub fn validate(&self, domain: (f64, f64)) -> Result<()> {
        self.c1.validate()?;
        if !self.c1.is_piecewise_constant() {
            return Err(Error::invalid("c1 must be piecewise constant"));
        }
        let mut pieces = vec![domain.0, domain.1];
        self.c1.breakpoints_in(domain.0, domain.1, &mut pieces);
        pieces.sort_by(f64::total_cmp);
        if pieces
            .windows(2)
            .any(|w| self.c1.eval(0.5 * (w[0] + w[1])) < 0.0)
        {
            return Err(Error::invalid("c1 must be nonnegative"));
        }
        let (l, r) = self.c2;
        if !(l.is_finite() && r.is_finite() && l >= 0.0 && r >= 0.0) {
            return Err(Error::invalid(format!(
                "Robin coefficients must be finite and nonnegative, got ({l}, {r})"
            )));
        }
        if l == 0.0 && r == 0.0 {
            return Err(Error::invalid(
                "both Robin coefficients are zero; the operator is not coercive on constants",
            ));
        }
        if !(self.s_e.0.is_finite() && self.s_e.1.is_finite()) {
            return Err(Error::invalid("exterior temperature must be finite"));
        }
        Ok(())
    }
}

/// The linear map `z ↦ (b(ψ_j, φ_i))_i` from control coefficients to nodal
/// loads, integrated exactly over the common refinement of the state mesh,
/// control mesh and the pieces of `c1`.
#[derive(Clone, Debug)]
pub struct ControlLoad {
    n_nodes: usize,
    n_controls: usize,
    /// `(control index, node index, weight)`
    entries: Vec<(usize, usize, f64)>,
}

impl ControlLoad {
    pub fn assemble(state: &Mesh, control: &Mesh, c1: &Profile) -> Result<Self> {
        let (a, b) = state.domain();
        let (ca, cb) = control.domain();
        if (a - ca).abs() > 1e-12 * (b - a) || (b - cb).abs() > 1e-12 * (b - a) {
            return Err(Error::invalid(format!(
                "state mesh ({a}, {b}) and control mesh ({ca}, {cb}) cover different domains"
            )));
        }
        let mut cuts: Vec<f64> = state.nodes().iter().chain(control.nodes()).copied().collect();
        c1.breakpoints_in(a, b, &mut cuts);
        cuts.retain(|&x| x >= a && x <= b);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        let mut dense = vec![0.0; control.n_elements() * state.n_nodes()];
        for w in cuts.windows(2) {
            let (s, t) = (w[0], w[1]);
            if t - s <= 0.0 {
                continue;
            }
            let mid = 0.5 * (s + t);
            let coef = c1.eval(mid);
            if coef == 0.0 {
                continue;
            }
            let j = control.locate(mid);
            let e = state.locate(mid);
            let (x0, x1) = state.element(e);
            let hat_right = |x: f64| (x - x0) / (x1 - x0);
            let right = 0.5 * (t - s) * (hat_right(s) + hat_right(t));
            let left = (t - s) - right;
            let row = j * state.n_nodes();
            dense[row + e] += coef * left;
            dense[row + e + 1] += coef * right;
        }
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(idx, &v)| (idx / state.n_nodes(), idx % state.n_nodes(), v))
            .collect();
        Ok(Self {
            n_nodes: state.n_nodes(),
            n_controls: control.n_elements(),
            entries,
        })
    }

    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    /// `out += B z`.
    pub fn apply_add(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.n_controls);
        debug_assert_eq!(out.len(), self.n_nodes);
        for &(j, i, w) in &self.entries {
            out[i] += w * z[j];
        }
    }

    /// `Bᵀ p`.
    pub fn apply_transpose(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_controls];
        for &(j, i, w) in &self.entries {
            out[j] += w * p[i];
        }
        out
    }
}

/// Assembled and factored Galerkin system for one conductivity sample.
/// The matrix depends only on ξ, so one factorization serves every control
/// and every adjoint solve.
#[derive(Clone, Debug)]
pub struct StateSystem {
    mesh: Arc<Mesh>,
    matrix: SymTridiagonal,
    factor: LdlFactor,
    boundary_load: Vec<f64>,
}

impl StateSystem {
    pub fn assemble(mesh: Arc<Mesh>, xi: &FieldSample, data: &PdeData) -> Result<Self> {
        Self::assemble_with(mesh, |x| xi.eval(x), data)
    }

    /// Assembly for an arbitrary conductivity function.
    pub fn assemble_with(
        mesh: Arc<Mesh>,
        conductivity: impl Fn(f64) -> f64,
        data: &PdeData,
    ) -> Result<Self> {
        data.validate(mesh.domain())?;
        let n = mesh.n_nodes();
        let mut matrix = SymTridiagonal::zeros(n);
        let g = 0.5 / 3f64.sqrt();
        for k in 0..mesh.n_elements() {
            let (s, t) = mesh.element(k);
            let h = t - s;
            let mid = 0.5 * (s + t);
            // 2-point Gauss: ∫ξ ≈ h/2 (ξ(p1) + ξ(p2)), stiffness = ∫ξ / h²
            let xi_sum = conductivity(mid - g * h) + conductivity(mid + g * h);
            let k_e = xi_sum / (2.0 * h);
            if !k_e.is_finite() {
                return Err(Error::numerical(format!(
                    "conductivity is not finite on element {k}"
                )));
            }
            matrix.add_block(k, k_e, -k_e, k_e);
        }
        matrix.add_diag(0, data.c2.0);
        matrix.add_diag(n - 1, data.c2.1);
        let factor = matrix.factor().map_err(|e| {
            Error::numerical(format!(
                "state operator assembly failed (is the conductivity positive?): {e}"
            ))
        })?;
        let mut boundary_load = vec![0.0; n];
        boundary_load[0] += data.c2.0 * data.s_e.0;
        boundary_load[n - 1] += data.c2.1 * data.s_e.1;
        Ok(Self {
            mesh,
            matrix,
            factor,
            boundary_load,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn matrix(&self) -> &SymTridiagonal {
        &self.matrix
    }

    pub fn boundary_load(&self) -> &[f64] {
        &self.boundary_load
    }

    /// Solves for the nodal values given the control-load vector `B z`.
    pub fn solve_with_load(&self, control_load: &[f64]) -> Vec<f64> {
        let mut rhs: Vec<f64> = self
            .boundary_load
            .iter()
            .zip(control_load)
            .map(|(a, b)| a + b)
            .collect();
        self.factor.solve_in_place(&mut rhs);
        rhs
    }

    pub fn solve_state(&self, load: &ControlLoad, z: &[f64]) -> P1State {
        let mut bz = vec![0.0; self.mesh.n_nodes()];
        load.apply_add(z, &mut bz);
        P1State {
            mesh: Arc::clone(&self.mesh),
            values: self.solve_with_load(&bz),
        }
    }

    /// Solves `a(v, p; ξ) = dual_load(v)` for all P1 `v`; `dual_load` holds
    /// the functional's values on the nodal basis.
    pub fn solve_adjoint(&self, dual_load: &[f64]) -> P1State {
        P1State {
            mesh: Arc::clone(&self.mesh),
            values: self.factor.solve(dual_load),
        }
    }

    /// `ℓ(φ_i) + b(z, φ_i) − a(u, φ_i; ξ)` for every basis function.
    pub fn residual(&self, u: &P1State, load: &ControlLoad, z: &[f64]) -> Vec<f64> {
        let mut r = self.boundary_load.clone();
        load.apply_add(z, &mut r);
        let au = self.matrix.mul_vec(&u.values);
        r.iter_mut().zip(au).for_each(|(ri, a)| *ri -= a);
        r
    }
}

/// Galerkin solution `s^ν(ξ, z)` on `mesh` for a control on its own mesh.
pub fn solve_state(
    mesh: &Arc<Mesh>,
    xi: &FieldSample,
    data: &PdeData,
    z: &P0Control,
) -> Result<P1State> {
    let system = StateSystem::assemble(Arc::clone(mesh), xi, data)?;
    let load = ControlLoad::assemble(mesh, z.mesh(), &data.c1)?;
    Ok(system.solve_state(&load, z.coeffs()))
}

pub fn solve_adjoint(
    mesh: &Arc<Mesh>,
    xi: &FieldSample,
    data: &PdeData,
    dual_load: &[f64],
) -> Result<P1State> {
    if dual_load.len() != mesh.n_nodes() {
        return Err(Error::invalid(format!(
            "dual load has {} entries for {} nodes",
            dual_load.len(),
            mesh.n_nodes()
        )));
    }
    let system = StateSystem::assemble(Arc::clone(mesh), xi, data)?;
    Ok(system.solve_adjoint(dual_load))
}

/// P1 mass matrix `(∫ φ_i φ_j)`.
pub fn mass_matrix(mesh: &Mesh) -> SymTridiagonal {
    let mut m = SymTridiagonal::zeros(mesh.n_nodes());
    for k in 0..mesh.n_elements() {
        let h = mesh.element_len(k);
        m.add_block(k, h / 3.0, h / 6.0, h / 3.0);
    }
    m
}

/// `(∫_{lo}^{hi} φ_i)_i`, exact.
pub fn region_weights(mesh: &Mesh, lo: f64, hi: f64) -> Vec<f64> {
    let mut w = vec![0.0; mesh.n_nodes()];
    for k in 0..mesh.n_elements() {
        let (s, t) = mesh.element(k);
        let (p, q) = (s.max(lo), t.min(hi));
        if q > p {
            let right = |x: f64| (x - s) / (t - s);
            let r = 0.5 * (q - p) * (right(p) + right(q));
            w[k] += (q - p) - r;
            w[k + 1] += r;
        }
    }
    w
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn estimate_rate(errors: &[(f64, f64)]) -> Result<f64> {
    if errors.len() < 3 {
        return Err(Error::invalid(format!(
            "rate estimation needs at least 3 levels, got {}",
            errors.len()
        )));
    }
    if errors.iter().any(|&(h, e)| !(h > 0.0 && e > 0.0)) {
        return Err(Error::invalid("mesh sizes and errors must be positive"));
    }
    let pts: Vec<(f64, f64)> = errors.iter().map(|&(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("mesh sizes must not all coincide"));
    }
    Ok(sxy / sxx)
}

/// One row of a convergence table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub dof: usize,
    pub l2_error: f64,
    /// Observed order against the previous row; `None` on the first row.
    pub rate: Option<f64>,
}

pub fn convergence_table(levels: &[(f64, usize, f64)]) -> Vec<ConvergenceRow> {
    levels
        .iter()
        .enumerate()
        .map(|(i, &(h, dof, l2_error))| ConvergenceRow {
            h,
            dof,
            l2_error,
            rate: (i > 0).then(|| {
                let (h0, _, e0) = levels[i - 1];
                (l2_error / e0).ln() / (h / h0).ln()
            }),
        })
        .collect()
}

pub fn write_convergence_csv<W: std::io::Write + ?Sized>(
    out: &mut W,
    rows: &[ConvergenceRow],
) -> std::io::Result<()> {
    writeln!(out, "h,dof,l2_error,rate")?;
    for r in rows {
        match r.rate {
            Some(rate) => writeln!(out, "{},{},{},{}", r.h, r.dof, r.l2_error, rate)?,
            None => writeln!(out, "{},{},{},", r.h, r.dof, r.l2_error)?,
        }
    }
    Ok(())
}

/// Dumps `x, value` per node.
pub fn write_state_csv<W: std::io::Write + ?Sized>(out: &mut W, u: &P1State) -> std::io::Result<()> {
    writeln!(out, "x,value")?;
    for (x, v) in u.mesh.nodes().iter().zip(&u.values) {
        writeln!(out, "{x},{v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{sample_batch, FieldSpec};
    use std::f64::consts::PI;

    const UNIT: (f64, f64) = (0.0, 1.0);

    fn unit_field() -> FieldSample {
        FieldSample::from_coordinates(Arc::new(FieldSpec::deterministic(UNIT, 0.0)), vec![])
            .unwrap()
    }

    fn quadratic_data() -> PdeData {
        // ξ ≡ 1, c1 z ≡ 2, Robin data chosen so that u* = x(1-x)
        PdeData {
            c1: Profile::constant(1.0),
            c2: (1.0, 1.0),
            s_e: (-1.0, -1.0),
        }
    }

    /// Robin instance with exact solution sin(πx) and P0 source.
    pub(crate) fn sine_instance(n: usize) -> (Arc<Mesh>, PdeData, P0Control) {
        let mesh = Arc::new(Mesh::uniform(n, UNIT).unwrap());
        let data = PdeData {
            c1: Profile::constant(1.0),
            c2: (1.0, 1.0),
            s_e: (-PI, -PI),
        };
        let z = P0Control::project(Arc::clone(&mesh), &Profile::sine(PI * PI, PI));
        (mesh, data, z)
    }

    #[test]
    fn uniform_mesh_nodes() {
        let m = Mesh::uniform(4, UNIT).unwrap();
        assert_eq!(m.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(m.h(), 0.25);
        let single = Mesh::uniform(1, UNIT).unwrap();
        assert_eq!(single.nodes(), &[0.0, 1.0]);
        assert_eq!(single.h(), 1.0);
    }

    #[test]
    fn mesh_rejects_bad_input() {
        assert!(Mesh::uniform(0, UNIT).unwrap_err().is_invalid_argument());
        assert!(Mesh::uniform(3, (1.0, 1.0)).is_err());
        assert!(Mesh::from_nodes(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        let m = Mesh::from_nodes(vec![0.0, 0.1, 0.6, 1.0]).unwrap();
        assert!((m.h() - 0.5).abs() < 1e-15);
        assert_eq!(m.locate(0.1), 1);
        assert_eq!(m.locate(1.0), 2);
    }

    #[test]
    fn control_norm_examples() {
        let mesh = Arc::new(Mesh::uniform(2, UNIT).unwrap());
        let ones = P0Control::new(Arc::clone(&mesh), vec![1.0, 1.0]).unwrap();
        assert_eq!(embed_control_norm(&ones), 1.0);
        let z = P0Control::new(Arc::clone(&mesh), vec![3.0, 4.0]).unwrap();
        assert!((embed_control_norm(&z) - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(embed_control_norm(&P0Control::zeros(mesh)), 0.0);
    }

    #[test]
    fn manufactured_quadratic_is_nodally_exact() {
        let mesh = Arc::new(Mesh::uniform(64, UNIT).unwrap());
        let z = P0Control::project(Arc::clone(&mesh), &Profile::constant(2.0));
        let u = solve_state(&mesh, &unit_field(), &quadratic_data(), &z).unwrap();
        for (x, v) in mesh.nodes().iter().zip(u.values()) {
            assert!((v - x * (1.0 - x)).abs() < 1e-13);
        }
        assert!(u.l2_error(|x| x * (1.0 - x)) <= 1e-3);
    }

    #[test]
    fn zero_data_gives_zero_state() {
        let mesh = Arc::new(Mesh::uniform(8, UNIT).unwrap());
        let data = PdeData {
            s_e: (0.0, 0.0),
            ..quadratic_data()
        };
        let u = solve_state(&mesh, &unit_field(), &data, &P0Control::zeros(Arc::clone(&mesh)))
            .unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_problem_has_symmetric_solution() {
        let spec = Arc::new(
            FieldSpec::new(
                UNIT,
                Profile::constant(0.2),
                vec![Profile::Harmonic {
                    amplitude: 0.6,
                    wavenumber: 2.0 * PI,
                    phase: -PI,
                }],
            )
            .unwrap(),
        );
        // cos(2πx - π) is symmetric about 1/2
        let xi = FieldSample::from_coordinates(spec, vec![0.8]).unwrap();
        let mesh = Arc::new(Mesh::uniform(33, UNIT).unwrap());
        let data = PdeData {
            c1: Profile::constant(1.5),
            c2: (2.0, 2.0),
            s_e: (0.3, 0.3),
        };
        let z = P0Control::project(
            Arc::clone(&mesh),
            &Profile::Harmonic {
                amplitude: 1.0,
                wavenumber: 2.0 * PI,
                phase: 0.0,
            },
        );
        let u = solve_state(&mesh, &xi, &data, &z).unwrap();
        let v = u.values();
        for i in 0..v.len() {
            assert!((v[i] - v[v.len() - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_conductivity_is_numerical_failure() {
        let mesh = Arc::new(Mesh::uniform(4, UNIT).unwrap());
        let err = StateSystem::assemble_with(Arc::clone(&mesh), |_| -1.0, &quadratic_data())
            .unwrap_err();
        assert!(matches!(err, Error::NumericalFailure(_)), "{err}");
    }

    #[test]
    fn zero_robin_coefficients_rejected() {
        let mesh = Arc::new(Mesh::uniform(4, UNIT).unwrap());
        let data = PdeData {
            c2: (0.0, 0.0),
            ..quadratic_data()
        };
        let err = StateSystem::assemble_with(mesh, |_| 1.0, &data).unwrap_err();
        assert!(err.is_invalid_argument());
        assert!(err.to_string().contains("coercive"));
    }

    #[test]
    fn galerkin_residual_vanishes() {
        let spec = Arc::new(
            FieldSpec::new(
                UNIT,
                Profile::zero(),
                vec![Profile::sine(0.5, PI), Profile::indicator(UNIT, 0.2, 0.7, 0.4)],
            )
            .unwrap(),
        );
        let mesh = Arc::new(Mesh::uniform(50, UNIT).unwrap());
        let cmesh = Arc::new(Mesh::uniform(7, UNIT).unwrap());
        let data = PdeData {
            c1: Profile::indicator(UNIT, 0.0, 0.45, 3.0),
            c2: (0.5, 4.0),
            s_e: (1.0, -2.0),
        };
        let load = ControlLoad::assemble(&mesh, &cmesh, &data.c1).unwrap();
        let z: Vec<f64> = (0..7).map(|i| (i as f64 * 0.7).sin()).collect();
        for xi in sample_batch(&spec, 5, 0..10).unwrap() {
            let sys = StateSystem::assemble(Arc::clone(&mesh), &xi, &data).unwrap();
            let u = sys.solve_state(&load, &z);
            let scale = 1.0 + u.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let r = sys.residual(&u, &load, &z);
            assert!(r.iter().all(|ri| ri.abs() <= 1e-10 * scale));
        }
    }

    #[test]
    fn cross_mesh_load_is_exact() {
        // ∫ c1 z φ_i summed over i equals ∫ c1 z
        let state = Mesh::uniform(9, UNIT).unwrap();
        let control = Mesh::uniform(4, UNIT).unwrap();
        let c1 = Profile::indicator(UNIT, 0.3, 0.8, 2.0);
        let load = ControlLoad::assemble(&state, &control, &c1).unwrap();
        let z = [1.0, -2.0, 0.5, 3.0];
        let mut bz = vec![0.0; state.n_nodes()];
        load.apply_add(&z, &mut bz);
        let total: f64 = bz.iter().sum();
        // c1 z on pieces: [0.3,0.5)->2*-2, [0.5,0.75)->2*0.5, [0.75,0.8)->2*3
        let expected = 2.0 * (-2.0 * 0.2 + 0.5 * 0.25 + 3.0 * 0.05);
        assert!((total - expected).abs() < 1e-14);
        // transpose is the adjoint of the forward map
        let p: Vec<f64> = (0..state.n_nodes()).map(|i| (i as f64).cos()).collect();
        let lhs: f64 = bz.iter().zip(&p).map(|(a, b)| a * b).sum();
        let rhs: f64 = load
            .apply_transpose(&p)
            .iter()
            .zip(z)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-13);
    }

    #[test]
    fn mismatched_meshes_rejected() {
        let state = Mesh::uniform(4, UNIT).unwrap();
        let control = Mesh::uniform(4, (0.0, 2.0)).unwrap();
        assert!(ControlLoad::assemble(&state, &control, &Profile::constant(1.0)).is_err());
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let mesh = Arc::new(Mesh::uniform(6, UNIT).unwrap());
        let p = solve_adjoint(&mesh, &unit_field(), &quadratic_data(), &[0.0; 7]).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.0));
        assert!(solve_adjoint(&mesh, &unit_field(), &quadratic_data(), &[0.0; 3]).is_err());
    }

    #[test]
    fn p1_norms_are_exact() {
        let mesh = Arc::new(Mesh::uniform(3, UNIT).unwrap());
        let u = P1State::interpolate(Arc::clone(&mesh), |x| 2.0 * x + 1.0);
        // ∫(2x+1)² = 13/3, ∫ 4 = 4
        assert!((u.l2_norm() - (13.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!((u.h1_seminorm() - 2.0).abs() < 1e-14);
        assert!((u.integral(0.25, 0.75) - 1.0).abs() < 1e-15);
        let fine = P1State::interpolate(Arc::new(Mesh::uniform(7, UNIT).unwrap()), |x| {
            2.0 * x + 1.0
        });
        assert!(u.l2_distance(&fine) < 1e-14);
        let shifted = P1State::interpolate(Arc::new(Mesh::uniform(5, UNIT).unwrap()), |x| {
            2.0 * x + 2.0
        });
        assert!((u.l2_distance(&shifted) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rate_of_exact_power_laws() {
        let halving: Vec<(f64, f64)> = (0..4).map(|k| (0.5f64.powi(k), 0.5f64.powi(k))).collect();
        assert!((estimate_rate(&halving).unwrap() - 1.0).abs() < 1e-12);
        let quartering: Vec<(f64, f64)> =
            (0..4).map(|k| (0.5f64.powi(k), 0.25f64.powi(k))).collect();
        assert!((estimate_rate(&quartering).unwrap() - 2.0).abs() < 1e-12);
        assert!(estimate_rate(&halving[..2]).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn sine_manufactured_rate() {
        let levels: Vec<(f64, f64)> = [16, 32, 64, 128, 256]
            .iter()
            .map(|&n| {
                let (mesh, data, z) = sine_instance(n);
                let u = solve_state(&mesh, &unit_field(), &data, &z).unwrap();
                (mesh.h(), u.l2_error(|x| (PI * x).sin()))
            })
            .collect();
        let rate = estimate_rate(&levels).unwrap();
        assert!(rate >= 1.9, "observed rate {rate}");
    }

    #[test]
    fn convergence_table_rates() {
        let rows = convergence_table(&[(0.5, 3, 0.4), (0.25, 5, 0.1), (0.125, 9, 0.025)]);
        assert_eq!(rows[0].rate, None);
        assert!((rows[1].rate.unwrap() - 2.0).abs() < 1e-12);
        let mut buf = Vec::new();
        write_convergence_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("h,dof,l2_error,rate\n0.5,3,0.4,\n"));
    }
}
