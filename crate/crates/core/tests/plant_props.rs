//! Plant integrator against the exact linear solution.

use nalgebra::Vector4;
use proptest::prelude::*;

use costeer::linalg::Matrix;
use costeer::plant::{build_matrices, Plant, PlantParams, VehicleState};

fn exact_step(x: &Vector4<f64>, u: f64, rho: f64, h: f64) -> Vector4<f64> {
    let m = build_matrices(&PlantParams::default()).unwrap();
    let mut aug = Matrix::zeros(5, 5);
    let forcing = m.b * u + m.d * rho;
    for i in 0..4 {
        for j in 0..4 {
            aug[(i, j)] = m.a[(i, j)];
        }
        aug[(i, 4)] = forcing[i];
    }
    let e = (aug * h).exp();
    let mut z = Matrix::zeros(5, 1);
    for i in 0..4 {
        z[i] = x[i];
    }
    z[4] = 1.0;
    let out = e * z;
    Vector4::new(out[0], out[1], out[2], out[3])
}

fn state() -> impl Strategy<Value = Vector4<f64>> {
    prop::array::uniform4(-1.0..1.0f64).prop_map(Vector4::from)
}

/// Lane-keeping magnitudes: |v_y| <= 0.5 m/s, |r_a| <= 0.2 rad/s, |ψ_L| <= 0.2 rad, |y_L| <= 1 m.
fn small_state() -> impl Strategy<Value = Vector4<f64>> {
    (-0.5..0.5f64, -0.2..0.2f64, -0.2..0.2f64, -1.0..1.0f64).prop_map(|(a, b, c, d)| Vector4::new(a, b, c, d))
}

proptest! {
    #[test]
    fn one_step_matches_matrix_exponential(x in small_state(), u in -0.03..0.03f64, rho in -0.05..0.05f64) {
        let plant = Plant::new(PlantParams::default()).unwrap();
        let next = plant.step(&VehicleState::from_vector(&x, 1.0), u, rho, 0.005).unwrap();
        let err = (next.vector() - exact_step(&x, u, rho, 0.005)).norm();
        prop_assert!(err < 1e-8, "err {err:e}");
        prop_assert!((next.t - 1.005).abs() < 1e-12);
    }

    #[test]
    fn one_step_error_scales_with_state(x in state(), u in -0.5..0.5f64, rho in -0.05..0.05f64) {
        let plant = Plant::new(PlantParams::default()).unwrap();
        let next = plant.step(&VehicleState::from_vector(&x, 0.0), u, rho, 0.005).unwrap();
        let err = (next.vector() - exact_step(&x, u, rho, 0.005)).norm();
        prop_assert!(err < 1e-7 * (x.norm() + u.abs()), "err {err:e}");
    }

    #[test]
    fn step_is_affine(x1 in state(), x2 in state(), u1 in -0.1..0.1f64, u2 in -0.1..0.1f64, r1 in -0.05..0.05f64, r2 in -0.05..0.05f64) {
        let plant = Plant::new(PlantParams::default()).unwrap();
        let step = |x: Vector4<f64>, u, r| plant.step(&VehicleState::from_vector(&x, 0.0), u, r, 0.005).unwrap().vector();
        let lhs = step(x1 + x2, u1 + u2, r1 + r2);
        let rhs = step(x1, u1, r1) + step(x2, u2, r2) - step(Vector4::zeros(), 0.0, 0.0);
        prop_assert!((lhs - rhs).norm() < 1e-9);
    }
}
