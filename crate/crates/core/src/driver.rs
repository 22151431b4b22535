//! Two-point preview driver.
//!
//! The driver looks at a near point (compensatory path, `G1`) and a far
//! point (anticipatory path, `G2`); the summed response passes through a
//! neuromuscular lag `G3` and the steering gain `G4`:
//!
//! ```text
//! δ_d = K3 · 1/(T3 s + 1) · [ (K1/v)(T1 s + 1)/(T2 s + 1) α1 + K2 α2 ]
//! ```
//!
//! Both dynamic blocks are discretized with the bilinear transform at the
//! simulation step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{output, PlantParams, RoadProfile, VehicleState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    /// Near preview distance, m.
    pub d1: f64,
    /// Far preview distance, m.
    pub d2: f64,
    /// Vehicle speed seen by `G1`, m/s.
    pub v: f64,
}

impl Default for DriverParams {
    fn default() -> Self {
        DriverParams {
            k1: 15.0,
            k2: 3.4,
            k3: 1.0 / 12.0,
            t1: 3.0,
            t2: 1.0,
            t3: 0.1,
            d1: 5.0,
            d2: 15.0,
            v: 15.0,
        }
    }
}

impl DriverParams {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("t2", self.t2),
            ("t3", self.t3),
            ("d1", self.d1),
            ("d2", self.d2),
            ("v", self.v),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "driver parameter {name} must be positive, got {value}"
                )));
            }
        }
        for (name, value) in [("k1", self.k1), ("k2", self.k2), ("k3", self.k3), ("t1", self.t1)] {
            if !value.is_finite() {
                return Err(Error::InvalidParams(format!("driver parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Steady-state steering for constant preview angles.
    pub fn dc_gain(&self, alpha1: f64, alpha2: f64) -> f64 {
        self.k3 * (self.k1 / self.v * alpha1 + self.k2 * alpha2)
    }
}

/// Filter states of the discretized `G1` and `G3` plus the last output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DriverState {
    g1: f64,
    g3: f64,
    pub delta_d: f64,
}

impl DriverState {
    pub fn reset(&self) -> DriverState {
        DriverState::default()
    }
}

/// `(T_num s + 1) / (T_den s + 1)` under `s = (2/h)(z - 1)/(z + 1)`,
/// in transposed direct form II: `y = b0 u + w`, `w' = b1 u - a1 y`.
#[derive(Clone, Copy, Debug)]
struct LeadLag {
    b0: f64,
    b1: f64,
    a1: f64,
}

impl LeadLag {
    fn bilinear(t_num: f64, t_den: f64, h: f64) -> Self {
        let c = 2.0 / h;
        let den = t_den * c + 1.0;
        LeadLag {
            b0: (t_num * c + 1.0) / den,
            b1: (1.0 - t_num * c) / den,
            a1: (1.0 - t_den * c) / den,
        }
    }

    fn step(&self, w: &mut f64, u: f64) -> f64 {
        let y = self.b0 * u + *w;
        *w = self.b1 * u - self.a1 * y;
        y
    }
}

/// Near and far preview angles, rad.
///
/// `e0` is the signed distance from the near point on the lane center to
/// the line along the velocity vector; `β = v_y / v_x`. The far angle uses
/// the road curvature `D2` meters ahead.
pub fn preview_angles(
    vehicle: &VehicleState,
    road: &RoadProfile,
    arclen: f64,
    p: &DriverParams,
    plant: &PlantParams,
) -> (f64, f64) {
    let beta = vehicle.v_y / plant.v_x;
    let y_c = output(vehicle, plant);
    let e0 = -(y_c + p.d1 * (vehicle.psi_l + beta));
    let alpha1 = e0 / p.d1 + beta;
    let rho_far = road.curvature_at(arclen + p.d2);
    let alpha2 = p.d2 * rho_far + beta;
    (alpha1, alpha2)
}

pub fn driver_step(st: &DriverState, alpha1: f64, alpha2: f64, h: f64, p: &DriverParams) -> (DriverState, f64) {
    let g1 = LeadLag::bilinear(p.t1, p.t2, h);
    let g3 = LeadLag::bilinear(0.0, p.t3, h);
    let mut next = *st;
    let compensatory = p.k1 / p.v * g1.step(&mut next.g1, alpha1);
    let anticipatory = p.k2 * alpha2;
    let lagged = g3.step(&mut next.g3, compensatory + anticipatory);
    next.delta_d = p.k3 * lagged;
    (next, next.delta_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn settle(alpha1: f64, alpha2: f64, seconds: f64, h: f64) -> f64 {
        let p = DriverParams::default();
        let mut st = DriverState::default();
        let mut out = 0.0;
        for _ in 0..(seconds / h).round() as usize {
            let (next, d) = driver_step(&st, alpha1, alpha2, h, &p);
            st = next;
            out = d;
        }
        out
    }

    #[test]
    fn centerline_straight_has_zero_angles() {
        let (a1, a2) = preview_angles(
            &VehicleState::default(),
            &RoadProfile::straight(100.0),
            0.0,
            &DriverParams::default(),
            &PlantParams::default(),
        );
        assert_eq!((a1, a2), (0.0, 0.0));
    }

    #[test]
    fn near_angle_from_offset() {
        // vehicle 0.5 m to the negative side: the lane center is 0.5 m off the velocity line
        let s = VehicleState {
            y_l: -0.5,
            ..Default::default()
        };
        let (a1, _) = preview_angles(
            &s,
            &RoadProfile::straight(100.0),
            0.0,
            &DriverParams::default(),
            &PlantParams::default(),
        );
        assert_relative_eq!(a1, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn far_angle_on_arc() {
        let road = RoadProfile::new(vec![crate::plant::RoadSegment {
            length_m: 500.0,
            curvature_inv_m: 1.0 / 31.5,
        }])
        .unwrap();
        let (_, a2) = preview_angles(
            &VehicleState::default(),
            &road,
            0.0,
            &DriverParams::default(),
            &PlantParams::default(),
        );
        assert_relative_eq!(a2, 15.0 / 31.5, epsilon = 1e-15);
        assert_relative_eq!(a2, 0.4762, epsilon = 1e-4);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        assert_eq!(settle(0.0, 0.0, 5.0, 0.005), 0.0);
    }

    #[test]
    fn steady_state_gains() {
        let far = settle(0.0, 0.1, 10.0, 0.005);
        assert_relative_eq!(far, 3.4 / 12.0 * 0.1, max_relative = 1e-3);
        assert_relative_eq!(far, 0.02833, epsilon = 1e-5);
        let near = settle(0.1, 0.0, 10.0, 0.005);
        assert_relative_eq!(near, 1.0 / 12.0 * 0.1, max_relative = 1e-3);
    }

    #[test]
    fn reset_clears_everything() {
        let p = DriverParams::default();
        let (st, _) = driver_step(&DriverState::default(), 0.3, -0.2, 0.005, &p);
        assert_ne!(st, DriverState::default());
        let r = st.reset();
        assert_eq!(r, DriverState::default());
        assert_eq!(r.reset(), r);
        let (_, d) = driver_step(&r, 0.0, 0.0, 0.005, &p);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn rejects_bad_params() {
        let p = DriverParams {
            t3: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        DriverParams::default().validate().unwrap();
    }
}
