//! Composite nonlinear feedback steering law.
//!
//! At a trigger instant the controller samples `x_k` and computes
//!
//! ```text
//! u_k = -K x_k + L ρ + ρ_y Bᵀ P (x_k - X ρ),   ρ_y = -φ exp(-γ y)
//! ```
//!
//! which is then held until the next trigger. `X` and `U` solve the
//! steady-state tracking equations `A X + B U + D = 0`, `C X = 0`, and
//! `L = U + K X`.

use std::path::Path;

use nalgebra::{Matrix4, Matrix5, RowVector4, Vector4, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SymMatrix};
use crate::plant::{PlantMatrices, VehicleState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnfParams {
    /// Amplitude `φ` of the nonlinear gain.
    pub phi: f64,
    /// Decay rate `γ`, 1/m.
    pub gamma: f64,
    /// `|ρ_y|` is capped at `φ exp(γ y_cap)` for negative outputs.
    pub y_cap: f64,
}

impl Default for CnfParams {
    fn default() -> Self {
        CnfParams {
            phi: 1e-4,
            gamma: 1.0,
            y_cap: 5.0,
        }
    }
}

/// Controller parameters, learned or model-derived.
#[derive(Clone, Debug, PartialEq)]
pub struct GainSet {
    pub p: Matrix4<f64>,
    pub k: RowVector4<f64>,
    pub u: f64,
    pub x: Vector4<f64>,
    pub l: f64,
    pub b_est: Vector4<f64>,
    pub cnf: CnfParams,
    /// Regressed drift matrix, used only to bound the trigger constants.
    pub a_est: Option<Matrix4<f64>>,
}

/// Command frozen between two triggers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldCommand {
    pub u: f64,
    pub tau: f64,
    pub x_k: VehicleState,
    /// `x_k - X ρ` at the trigger.
    pub x_ek: Vector4<f64>,
}

impl GainSet {
    /// Assembles a gain set and fixes `L = U + K X`.
    pub fn new(
        p: Matrix4<f64>,
        k: RowVector4<f64>,
        u: f64,
        x: Vector4<f64>,
        b_est: Vector4<f64>,
        cnf: CnfParams,
    ) -> Self {
        let l = u + (k * x)[0];
        GainSet {
            p: (p + p.transpose()) * 0.5,
            k,
            u,
            x,
            l,
            b_est,
            cnf,
            a_est: None,
        }
    }

    /// Reference gains from the true model: Riccati solution plus exact feedforward.
    pub fn from_model(m: &PlantMatrices, q: &SymMatrix, r: f64, cnf: CnfParams) -> Result<Self> {
        let r_mat = SymMatrix::from_diagonal(&[r]);
        let (p, k) = linalg::solve_are(&m.a_dyn(), &m.b_dyn(), q, &r_mat)?;
        let (x, u) = model_feedforward(m)?;
        let mut g = GainSet::new(
            Matrix4::from_column_slice(p.as_matrix().as_slice()),
            RowVector4::from_column_slice(k.as_slice()),
            u,
            x,
            m.b,
            cnf,
        );
        g.a_est = Some(m.a);
        Ok(g)
    }

    /// `ρ_y = -φ exp(-γ y)` with the magnitude cap for large negative `y`.
    pub fn rho_y(&self, y: f64) -> f64 {
        let CnfParams { phi, gamma, y_cap } = self.cnf;
        let cap = phi * (gamma * y_cap).exp();
        -(phi * (-gamma * y).exp()).min(cap)
    }

    /// `Bᵀ P` using the estimated input matrix.
    pub fn btp(&self) -> RowVector4<f64> {
        self.b_est.transpose() * self.p
    }
}

pub fn nonlinear_term(g: &GainSet, x_k: &Vector4<f64>, rho: f64, y: f64) -> f64 {
    let x_e = x_k - g.x * rho;
    g.rho_y(y) * (g.btp() * x_e)[0]
}

pub fn control_at_trigger(g: &GainSet, x_k: &VehicleState, rho: f64, y: f64) -> HeldCommand {
    let xv = x_k.vector();
    let linear = -(g.k * xv)[0] + g.l * rho;
    HeldCommand {
        u: linear + nonlinear_term(g, &xv, rho, y),
        tau: x_k.t,
        x_k: *x_k,
        x_ek: xv - g.x * rho,
    }
}

/// Solves `[A B; C 0] [X; U] = [-D; 0]`.
pub fn model_feedforward(m: &PlantMatrices) -> Result<(Vector4<f64>, f64)> {
    let mut sys = Matrix5::zeros();
    sys.fixed_view_mut::<4, 4>(0, 0).copy_from(&m.a);
    sys.fixed_view_mut::<4, 1>(0, 4).copy_from(&m.b);
    sys.fixed_view_mut::<1, 4>(4, 0).copy_from(&m.c);
    let mut rhs = Vector5::zeros();
    rhs.fixed_view_mut::<4, 1>(0, 0).copy_from(&(-m.d));
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidParams("plant has a transmission zero at s = 0".into()))?;
    Ok((sol.fixed_rows::<4>(0).into_owned(), sol[4]))
}

/// Cross-check of a gain set against a known model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Frobenius norm of `AᵀP + PA + Q - P B R⁻¹ Bᵀ P` with the true `A, B`.
    pub are_residual: f64,
    /// `||A X + B U + D||`.
    pub feedforward_residual: f64,
    /// `|C X|`.
    pub output_residual: f64,
    /// `|L - U - K X|`.
    pub l_identity_residual: f64,
    pub closed_loop_hurwitz: bool,
    pub p_positive_definite: bool,
}

pub fn validate(g: &GainSet, oracle: &PlantMatrices, q: &SymMatrix, r: f64) -> ValidationReport {
    let p = SymMatrix::symmetrize(&Matrix::from_column_slice(4, 4, g.p.as_slice()));
    let r_mat = SymMatrix::from_diagonal(&[r]);
    let are_residual = linalg::are_residual(&oracle.a_dyn(), &oracle.b_dyn(), q, &r_mat, &p)
        .map(|m| m.norm())
        .unwrap_or(f64::INFINITY);
    let a_cl = oracle.a - oracle.b * g.k;
    ValidationReport {
        are_residual,
        feedforward_residual: (oracle.a * g.x + oracle.b * g.u + oracle.d).norm(),
        output_residual: (oracle.c * g.x)[0].abs(),
        l_identity_residual: (g.l - g.u - (g.k * g.x)[0]).abs(),
        closed_loop_hurwitz: linalg::is_hurwitz(&Matrix::from_column_slice(4, 4, a_cl.as_slice())),
        p_positive_definite: p.is_positive_definite(),
    }
}

/// On-disk form: matrices as row-major nested arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct GainFile {
    p: [[f64; 4]; 4],
    k: [f64; 4],
    u: f64,
    x: [f64; 4],
    l: f64,
    b_est: [f64; 4],
    phi: f64,
    gamma: f64,
    y_cap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_est: Option<[[f64; 4]; 4]>,
}

fn rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

fn from_rows(r: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| r[i][j])
}

impl GainSet {
    pub fn to_json(&self) -> String {
        let file = GainFile {
            p: rows(&self.p),
            k: self.k.into(),
            u: self.u,
            x: self.x.into(),
            l: self.l,
            b_est: self.b_est.into(),
            phi: self.cnf.phi,
            gamma: self.cnf.gamma,
            y_cap: self.cnf.y_cap,
            a_est: self.a_est.as_ref().map(rows),
        };
        serde_json::to_string_pretty(&file).expect("gain file serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let f: GainFile = serde_json::from_str(text)?;
        Ok(GainSet {
            p: from_rows(&f.p),
            k: RowVector4::from(f.k),
            u: f.u,
            x: Vector4::from(f.x),
            l: f.l,
            b_est: Vector4::from(f.b_est),
            cnf: CnfParams {
                phi: f.phi,
                gamma: f.gamma,
                y_cap: f.y_cap,
            },
            a_est: f.a_est.as_ref().map(from_rows),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GainSet::from_json(&text).map_err(|e| Error::parse(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{build_matrices, PlantParams};
    use approx::assert_relative_eq;

    fn oracle() -> (PlantMatrices, GainSet) {
        let m = build_matrices(&PlantParams::default()).unwrap();
        let q = SymMatrix::from_diagonal(&[100.0; 4]);
        let g = GainSet::from_model(&m, &q, 100.0, CnfParams::default()).unwrap();
        (m, g)
    }

    #[test]
    fn zero_deviation_gives_zero_nonlinear_term() {
        let (_, g) = oracle();
        let rho = 0.02;
        assert_eq!(nonlinear_term(&g, &(g.x * rho), rho, 0.3), 0.0);
    }

    #[test]
    fn rho_y_at_zero_output() {
        let (_, g) = oracle();
        assert_eq!(g.rho_y(0.0), -1e-4);
    }

    #[test]
    fn rho_y_decreases_with_positive_output() {
        let (_, g) = oracle();
        let mut prev = g.rho_y(0.0).abs();
        for i in 1..100 {
            let cur = g.rho_y(i as f64 * 0.1).abs();
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn rho_y_capped_for_negative_output() {
        let (_, g) = oracle();
        let cap = 1e-4 * 5f64.exp();
        assert_relative_eq!(g.rho_y(-50.0), -cap);
        assert!(g.rho_y(-4.0).abs() < cap);
    }

    #[test]
    fn zero_state_straight_road() {
        let (_, g) = oracle();
        let cmd = control_at_trigger(&g, &VehicleState::default(), 0.0, 0.0);
        assert_eq!(cmd.u, 0.0);
    }

    #[test]
    fn tracking_manifold_gives_feedforward() {
        let (_, g) = oracle();
        let rho = 1.0 / 31.5;
        let s = VehicleState::from_vector(&(g.x * rho), 1.0);
        let cmd = control_at_trigger(&g, &s, rho, 0.0);
        assert_relative_eq!(cmd.u, g.u * rho, epsilon = 1e-12);
    }

    #[test]
    fn zero_amplitude_is_linear_law() {
        let (_, mut g) = oracle();
        g.cnf.phi = 0.0;
        let s = VehicleState {
            v_y: 0.3,
            r_a: -0.1,
            psi_l: 0.05,
            y_l: 0.4,
            t: 0.0,
        };
        let rho = 0.01;
        let cmd = control_at_trigger(&g, &s, rho, 0.2);
        assert_relative_eq!(cmd.u, -(g.k * s.vector())[0] + g.l * rho, epsilon = 1e-15);
    }

    #[test]
    fn oracle_gains_validate() {
        let (m, g) = oracle();
        let q = SymMatrix::from_diagonal(&[100.0; 4]);
        let rep = validate(&g, &m, &q, 100.0);
        assert!(rep.are_residual < 1e-6, "{rep:?}");
        assert!(rep.feedforward_residual < 1e-6);
        assert!(rep.output_residual < 1e-6);
        assert!(rep.l_identity_residual < 1e-8);
        assert!(rep.closed_loop_hurwitz && rep.p_positive_definite);
    }

    #[test]
    fn perturbed_gain_reported_not_raised() {
        let (m, mut g) = oracle();
        g.k = -g.k * 10.0;
        let q = SymMatrix::from_diagonal(&[100.0; 4]);
        let rep = validate(&g, &m, &q, 100.0);
        assert!(!rep.closed_loop_hurwitz);
    }

    #[test]
    fn nonlinear_term_bounded_for_nonnegative_output() {
        let (_, g) = oracle();
        let xk = Vector4::new(0.2, -0.3, 0.1, 0.5);
        let rho = 0.01;
        let bound = g.cnf.phi * g.btp().norm() * (xk - g.x * rho).norm();
        for y in [0.0, 0.5, 2.0, 10.0] {
            assert!(nonlinear_term(&g, &xk, rho, y).abs() <= bound + 1e-18);
        }
        assert!(nonlinear_term(&g, &xk, rho, 40.0).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let (_, g) = oracle();
        let back = GainSet::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        let text = g.to_json();
        // row-major: first row of P is the v_y row
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["p"][0][1].as_f64().unwrap(), g.p[(0, 1)]);
        assert_eq!(v["p"][1][0].as_f64().unwrap(), g.p[(1, 0)]);
    }
}
