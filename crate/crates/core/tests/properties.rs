use std::sync::Arc;

use proptest::prelude::*;

use ouu::fem::{embed_control_norm, solve_state, Mesh, P0Control, PdeData};
use ouu::field::{sample_batch, sample_field_indexed, FieldSpec};
use ouu::optimizer::project_box;
use ouu::problem::{ControlBox, ControlPoint};
use ouu::profile::Profile;

const UNIT: (f64, f64) = (0.0, 1.0);

fn smooth_field(a: f64) -> Arc<FieldSpec> {
    let pi = std::f64::consts::PI;
    Arc::new(
        FieldSpec::new(
            UNIT,
            Profile::constant(0.2),
            vec![Profile::constant(a), Profile::sine(a, pi), Profile::sine(0.5 * a, 2.0 * pi)],
        )
        .unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_mesh_invariants(n in 1usize..500, a in -5.0f64..5.0, len in 0.1f64..10.0) {
        let b = a + len;
        let mesh = Mesh::uniform(n, (a, b)).unwrap();
        let nodes = mesh.nodes();
        prop_assert_eq!(nodes.len(), n + 1);
        prop_assert_eq!(nodes[0], a);
        prop_assert_eq!(nodes[n], b);
        prop_assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        prop_assert_eq!(mesh.h(), (b - a) / n as f64);
    }

    #[test]
    fn embedding_norm_is_scaled_euclidean(z in prop::collection::vec(-100.0f64..100.0, 1..300)) {
        let n = z.len();
        let mesh = Arc::new(Mesh::uniform(n, UNIT).unwrap());
        let h = mesh.h();
        let control = P0Control::new(mesh, z.clone()).unwrap();
        let euclid = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lhs = embed_control_norm(&control);
        prop_assert!((lhs - h.sqrt() * euclid).abs() <= 1e-14 * (1.0 + lhs));
    }

    #[test]
    fn field_samples_respect_bounds(seed in any::<u64>(), index in 0u64..1000, a in 0.05f64..1.5) {
        let spec = smooth_field(a);
        let xi = sample_field_indexed(&spec, seed, index).unwrap();
        prop_assert!(xi.c_lower() > 0.0);
        for k in 0..=2000 {
            let v = xi.eval(k as f64 / 2000.0);
            prop_assert!(xi.c_lower() <= v && v <= xi.c_upper());
        }
    }

    #[test]
    fn projection_is_feasible_and_idempotent(
        z in prop::collection::vec(-50.0f64..50.0, 1..20),
        sigma in -5.0f64..5.0,
        gamma in -5.0f64..5.0,
    ) {
        let bounds = ControlBox::new(-2.0, 3.0).unwrap();
        let p = project_box(&ControlPoint::new(z, gamma, sigma, bounds));
        prop_assert!(p.is_feasible());
        prop_assert_eq!(p.gamma, gamma);
        prop_assert_eq!(project_box(&p), p);
    }

    #[test]
    fn state_is_affine_in_control(seed in any::<u64>(), c in -3.0f64..3.0) {
        // With zero exterior temperature the state is linear in z.
        let xi = sample_field_indexed(&smooth_field(0.5), seed, 0).unwrap();
        let data = PdeData { c1: Profile::constant(1.0), c2: (1.0, 2.0), s_e: (0.0, 0.0) };
        let mesh = Arc::new(Mesh::uniform(32, UNIT).unwrap());
        let cm = Arc::new(Mesh::uniform(8, UNIT).unwrap());
        let z: Vec<f64> = (0..8).map(|k| (k as f64 - 3.5) / 2.0).collect();
        let scaled: Vec<f64> = z.iter().map(|v| c * v).collect();
        let u = solve_state(&mesh, &xi, &data, &P0Control::new(Arc::clone(&cm), z).unwrap()).unwrap();
        let v = solve_state(&mesh, &xi, &data, &P0Control::new(cm, scaled).unwrap()).unwrap();
        for (a, b) in u.values().iter().zip(v.values()) {
            prop_assert!((c * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn batch_sampling_matches_indexed_sampling() {
    let spec = smooth_field(0.7);
    let batch = sample_batch(&spec, 42, 10..20).unwrap();
    for (j, xi) in batch.iter().enumerate() {
        let single = sample_field_indexed(&spec, 42, 10 + j as u64).unwrap();
        assert_eq!(xi.coordinates(), single.coordinates());
    }
}

#[test]
fn stability_ratio_is_bounded_by_field_bounds() {
    // ‖s‖_V / (1 + ‖z‖_Z) stays below a constant set by the worst c_lower.
    let spec = smooth_field(0.5);
    let data = PdeData { c1: Profile::constant(1.0), c2: (1.0, 1.0), s_e: (0.0, 0.0) };
    let mesh = Arc::new(Mesh::uniform(64, UNIT).unwrap());
    let cm = Arc::new(Mesh::uniform(16, UNIT).unwrap());
    let z = P0Control::project(Arc::clone(&cm), &Profile::sine(2.0, 3.0));
    let znorm = embed_control_norm(&z);
    let draws = sample_batch(&spec, 3, 0..200).unwrap();
    let mut worst: f64 = 0.0;
    let mut min_lower = f64::INFINITY;
    for xi in &draws {
        let s = solve_state(&mesh, xi, &data, &z).unwrap();
        worst = worst.max(s.v_norm() / (1.0 + znorm));
        min_lower = min_lower.min(xi.c_lower());
    }
    // Coercivity constant is at least min(c_lower, c2)/C_P with a Poincaré-type
    // constant below 4 on the unit interval with Robin ends.
    let bound = 8.0 / min_lower.min(1.0);
    assert!(worst.is_finite() && worst <= bound, "ratio {worst} exceeds {bound}");
}
