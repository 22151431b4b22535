//! Linear 2-DOF lateral vehicle model with preview-point deviation states.
//!
//! State `x = [v_y, r_a, ψ_L, y_L]`, input front-wheel angle `u`, road
//! curvature `ρ` as a measured disturbance:
//!
//! ```text
//! ẋ = A x + B u + D ρ,    y_c = C x = y_L - l_s ψ_L
//! ```

use nalgebra::{Matrix4, RowVector4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Physical vehicle constants. Defaults are the reference passenger car.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Mass, kg.
    pub m: f64,
    /// CG to front axle, m.
    pub l_f: f64,
    /// CG to rear axle, m.
    pub l_r: f64,
    /// Front cornering stiffness, N/rad.
    pub c_f: f64,
    /// Rear cornering stiffness, N/rad.
    pub c_r: f64,
    /// Yaw inertia, kg m².
    pub i_z: f64,
    /// Preview distance of `y_L`, m.
    pub l_s: f64,
    /// Constant longitudinal speed, m/s.
    pub v_x: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            m: 1370.0,
            l_f: 1.11,
            l_r: 1.756,
            c_f: 56300.0,
            c_r: 47250.0,
            i_z: 2315.0,
            l_s: 5.0,
            v_x: 15.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m", self.m),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("c_f", self.c_f),
            ("c_r", self.c_r),
            ("i_z", self.i_z),
            ("l_s", self.l_s),
            ("v_x", self.v_x),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "plant parameter {name} must be finite and positive, got {value}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantMatrices {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub c: RowVector4<f64>,
    pub d: Vector4<f64>,
}

impl PlantMatrices {
    pub fn a_dyn(&self) -> Matrix {
        Matrix::from_column_slice(4, 4, self.a.as_slice())
    }

    pub fn b_dyn(&self) -> Matrix {
        Matrix::from_column_slice(4, 1, self.b.as_slice())
    }
}

pub fn build_matrices(p: &PlantParams) -> Result<PlantMatrices> {
    p.validate()?;
    let PlantParams {
        m,
        l_f,
        l_r,
        c_f,
        c_r,
        i_z,
        l_s,
        v_x,
    } = *p;

    let a11 = -2.0 * (c_f + c_r) / (m * v_x);
    let a12 = 2.0 * (c_r * l_r - c_f * l_f) / (m * v_x) - v_x;
    let a21 = 2.0 * (c_r * l_r - c_f * l_f) / (i_z * v_x);
    let a22 = -2.0 * (c_f * l_f * l_f + c_r * l_r * l_r) / (i_z * v_x);
    let b1 = 2.0 * c_f / m;
    let b2 = 2.0 * c_f * l_f / i_z;

    #[rustfmt::skip]
    let a = Matrix4::new(
        a11, a12, 0.0, 0.0,
        a21, a22, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        1.0, l_s, v_x, 0.0,
    );
    Ok(PlantMatrices {
        a,
        b: Vector4::new(b1, b2, 0.0, 0.0),
        c: RowVector4::new(0.0, 0.0, -l_s, 1.0),
        d: Vector4::new(0.0, 0.0, -v_x, 0.0),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleState {
    /// Lateral velocity, m/s.
    pub v_y: f64,
    /// Yaw rate, rad/s.
    pub r_a: f64,
    /// Heading deviation from the road, rad.
    pub psi_l: f64,
    /// Lateral deviation at the preview distance, m.
    pub y_l: f64,
    /// Simulation time, s.
    pub t: f64,
}

impl VehicleState {
    pub fn from_vector(x: &Vector4<f64>, t: f64) -> Self {
        VehicleState {
            v_y: x[0],
            r_a: x[1],
            psi_l: x[2],
            y_l: x[3],
            t,
        }
    }

    pub fn vector(&self) -> Vector4<f64> {
        Vector4::new(self.v_y, self.r_a, self.psi_l, self.y_l)
    }

    pub fn is_finite(&self) -> bool {
        self.vector().iter().all(|v| v.is_finite()) && self.t.is_finite()
    }
}

/// Lateral deviation at the center of gravity, `y_L - l_s ψ_L`.
pub fn output(s: &VehicleState, p: &PlantParams) -> f64 {
    -p.l_s * s.psi_l + s.y_l
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub length_m: f64,
    /// Signed curvature `ρ`, 1/m. Positive curvature turns the way the
    /// reference quarter turn does.
    pub curvature_inv_m: f64,
}

/// Piecewise-constant curvature along arc length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadProfile {
    pub segments: Vec<RoadSegment>,
}

impl RoadProfile {
    pub fn new(segments: Vec<RoadSegment>) -> Result<Self> {
        let road = RoadProfile { segments };
        road.validate()?;
        Ok(road)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.length_m.is_finite() && seg.length_m > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "road segment {i} has non-positive length {}",
                    seg.length_m
                )));
            }
            if !seg.curvature_inv_m.is_finite() {
                return Err(Error::InvalidParams(format!(
                    "road segment {i} has non-finite curvature"
                )));
            }
        }
        Ok(())
    }

    pub fn straight(length_m: f64) -> Self {
        RoadProfile {
            segments: vec![RoadSegment {
                length_m,
                curvature_inv_m: 0.0,
            }],
        }
    }

    /// 50 m straight, a quarter circle of radius 31.5 m, then a straight exit.
    pub fn quarter_turn() -> Self {
        let radius = 31.5;
        RoadProfile {
            segments: vec![
                seg(50.0, 0.0),
                seg(std::f64::consts::FRAC_PI_2 * radius, 1.0 / radius),
                seg(150.0, 0.0),
            ],
        }
    }

    /// A representative 1300 m lap with alternating arcs and a full 360° of net heading change.
    pub fn loop_course() -> Self {
        use std::f64::consts::PI;
        let arc = |radius: f64, degrees: f64| seg(radius * degrees.abs() * PI / 180.0, degrees.signum() / radius);
        let mut segments = vec![
            seg(150.0, 0.0),
            arc(30.0, 90.0),
            seg(100.0, 0.0),
            arc(45.0, -45.0),
            seg(80.0, 0.0),
            arc(60.0, 180.0),
            seg(120.0, 0.0),
            arc(30.0, 90.0),
            seg(90.0, 0.0),
            arc(45.0, -45.0),
            arc(60.0, 90.0),
        ];
        let used: f64 = segments.iter().map(|s| s.length_m).sum();
        segments.push(seg(1300.0 - used, 0.0));
        RoadProfile { segments }
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length_m).sum()
    }

    /// Curvature of the segment containing `arclen`; zero past the end.
    pub fn curvature_at(&self, arclen: f64) -> f64 {
        let mut start = 0.0;
        for seg in &self.segments {
            let end = start + seg.length_m;
            if arclen < end {
                return if arclen >= start { seg.curvature_inv_m } else { 0.0 };
            }
            start = end;
        }
        0.0
    }
}

fn seg(length_m: f64, curvature_inv_m: f64) -> RoadSegment {
    RoadSegment {
        length_m,
        curvature_inv_m,
    }
}

/// Fixed-step simulator of the linear lateral model.
#[derive(Clone, Debug)]
pub struct Plant {
    pub params: PlantParams,
    pub matrices: PlantMatrices,
}

impl Plant {
    pub fn new(params: PlantParams) -> Result<Self> {
        let matrices = build_matrices(&params)?;
        Ok(Plant { params, matrices })
    }

    pub fn derivative(&self, x: &Vector4<f64>, u: f64, rho: f64) -> Vector4<f64> {
        let m = &self.matrices;
        m.a * x + m.b * u + m.d * rho
    }

    /// Advances `h` seconds with classical RK4, holding `u` and `rho`.
    pub fn step(&self, s: &VehicleState, u: f64, rho: f64, h: f64) -> Result<VehicleState> {
        if h.is_nan() || h <= 0.0 {
            return Err(Error::InvalidParams(format!("step size must be positive, got {h}")));
        }
        let x = s.vector();
        let k1 = self.derivative(&x, u, rho);
        let k2 = self.derivative(&(x + k1 * (h / 2.0)), u, rho);
        let k3 = self.derivative(&(x + k2 * (h / 2.0)), u, rho);
        let k4 = self.derivative(&(x + k3 * h), u, rho);
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let out = VehicleState::from_vector(&next, s.t + h);
        if !out.is_finite() {
            return Err(Error::NonFinite(out.t));
        }
        Ok(out)
    }

    pub fn output(&self, s: &VehicleState) -> f64 {
        output(s, &self.params)
    }
}
