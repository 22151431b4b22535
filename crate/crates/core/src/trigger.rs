//! Event- and self-triggered update rules.
//!
//! Event-triggered (ET): measure every base step and resample once
//! `||x_k - x(t)||² > e_T`, with `e_T` proportional to `||x_ek||²`.
//!
//! Self-triggered (ST): at each trigger compute a dwell from the sampled
//! state alone,
//!
//! ```text
//! dwell = 1/(a+b) · ln(1 + (a+b)/(a ||x_ek|| + c) · sqrt(e_T))
//! ```
//!
//! floored at `tau_min` and rounded up to whole base steps.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::cnf::GainSet;
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Matrix, SymMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TriggerMode {
    Time,
    Event,
    #[serde(rename = "self")]
    #[value(name = "self")]
    SelfTriggered,
}

impl TriggerMode {
    pub fn name(self) -> &'static str {
        match self {
            TriggerMode::Time => "time",
            TriggerMode::Event => "event",
            TriggerMode::SelfTriggered => "self",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriggerParams {
    pub alpha: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub lambda_min_q: f64,
    pub lambda_max_q: f64,
    pub tau_min: f64,
}

impl TriggerParams {
    pub fn new(alpha: f64, (a, b, c): (f64, f64, f64), q: &SymMatrix, tau_min: f64) -> Result<Self> {
        let p = TriggerParams {
            alpha,
            a,
            b,
            c,
            lambda_min_q: q.min_eigenvalue(),
            lambda_max_q: q.max_eigenvalue(),
            tau_min,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParams(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("tau_min", self.tau_min)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "trigger constant {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.lambda_max_q > 0.0 && self.lambda_min_q >= 0.0) {
            return Err(Error::InvalidParams(
                "Q must be positive semidefinite and nonzero".into(),
            ));
        }
        Ok(())
    }

    /// `e_T / ||x_ek||²`.
    pub fn threshold_ratio(&self) -> f64 {
        (1.0 - self.alpha) * self.lambda_min_q / ((1.0 / self.alpha - 1.0) * self.lambda_max_q)
    }
}

pub fn et_threshold(p: &TriggerParams, x_ek: &Vector4<f64>) -> f64 {
    p.threshold_ratio() * x_ek.norm_squared()
}

/// Strict `||e||² > e_T`.
pub fn et_violated(p: &TriggerParams, e: &Vector4<f64>, x_ek: &Vector4<f64>) -> bool {
    e.norm_squared() > et_threshold(p, x_ek)
}

/// Unfloored, unrounded self-triggered dwell.
pub fn st_raw_dwell(p: &TriggerParams, x_ek: &Vector4<f64>) -> f64 {
    let ab = p.a + p.b;
    let xn = x_ek.norm();
    (1.0 + ab / (p.a * xn + p.c) * et_threshold(p, x_ek).sqrt()).ln() / ab
}

/// Dwell in whole base steps: `ceil(max(tau_min, raw) / h)`.
pub fn st_dwell_steps(p: &TriggerParams, x_ek: &Vector4<f64>, h: f64) -> usize {
    let dwell = st_raw_dwell(p, x_ek).max(p.tau_min);
    // absorb rounding noise so exact multiples of h are not bumped up a step
    let steps = (dwell / h - 1e-9).ceil();
    (steps as usize).max(1)
}

pub fn st_next_instant(p: &TriggerParams, tau_k: f64, x_ek: &Vector4<f64>, h: f64) -> f64 {
    tau_k + st_dwell_steps(p, x_ek, h) as f64 * h
}

/// Optional explicit overrides for `a`, `b`, `c` and the bound on `||u_e||`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstantOverrides {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub c: Option<f64>,
    pub phi_bound: Option<f64>,
}

/// Lower limit applied to `b` and `c` when the estimate degenerates to zero.
pub const CONSTANT_FLOOR: f64 = 1e-3;

/// Lipschitz-type constants for the dwell rule.
///
/// `a = ||A_est||₂`, `b = ||B_est|| (||K|| + φ ||B_estᵀ P||)`,
/// `c = ||B_est|| φ_bound`. Explicit overrides win.
pub fn estimate_constants(
    g: &GainSet,
    a_est: Option<&Matrix4<f64>>,
    overrides: &ConstantOverrides,
    phi_bound: f64,
) -> Result<(f64, f64, f64)> {
    let a = match (overrides.a, a_est.or(g.a_est.as_ref())) {
        (Some(a), _) => a,
        (None, Some(m)) => spectral_norm(&Matrix::from_column_slice(4, 4, m.as_slice())),
        (None, None) => return Err(Error::MissingModel),
    };
    let b_norm = g.b_est.norm();
    let lipschitz_u = g.k.norm() + g.cnf.phi * g.btp().norm();
    let b = overrides.b.unwrap_or(b_norm * lipschitz_u);
    let c = overrides.c.unwrap_or(b_norm * overrides.phi_bound.unwrap_or(phi_bound));
    let floor = |v: f64| if v > 0.0 && v.is_finite() { v } else { CONSTANT_FLOOR };
    Ok((floor(a), floor(b), floor(c)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriggerEvent {
    pub tau: f64,
    pub x_ek: Vector4<f64>,
    pub u: f64,
    /// Time until the next trigger, or until the end of the run for the last one.
    pub dwell: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriggerTrace {
    pub events: Vec<TriggerEvent>,
}

impl TriggerTrace {
    pub fn count(&self) -> usize {
        self.events.len()
    }

    pub fn min_dwell(&self) -> f64 {
        self.events.iter().map(|e| e.dwell).fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn push(&mut self, tau: f64, x_ek: Vector4<f64>, u: f64) {
        if let Some(last) = self.events.last_mut() {
            last.dwell = tau - last.tau;
        }
        self.events.push(TriggerEvent {
            tau,
            x_ek,
            u,
            dwell: 0.0,
        });
    }

    pub(crate) fn close(&mut self, t_end: f64) {
        if let Some(last) = self.events.last_mut() {
            last.dwell = t_end - last.tau;
        }
    }
}

/// Decides, base step by base step, when the controller resamples.
#[derive(Clone, Debug)]
pub struct Scheduler {
    pub mode: TriggerMode,
    pub params: TriggerParams,
    h: f64,
    next_step: usize,
    sample: Option<(Vector4<f64>, Vector4<f64>)>,
}

impl Scheduler {
    pub fn new(mode: TriggerMode, params: TriggerParams, h: f64) -> Self {
        Scheduler {
            mode,
            params,
            h,
            next_step: 0,
            sample: None,
        }
    }

    /// Whether step `step` (time `step·h`) is a trigger, given the current state.
    ///
    /// Self-triggered mode ignores `x`; it only compares step indices.
    pub fn due(&self, step: usize, x: &Vector4<f64>) -> bool {
        match (self.mode, &self.sample) {
            (_, None) | (TriggerMode::Time, _) => true,
            (TriggerMode::Event, Some((x_k, x_ek))) => et_violated(&self.params, &(x_k - x), x_ek),
            (TriggerMode::SelfTriggered, Some(_)) => step >= self.next_step,
        }
    }

    /// Records a trigger with sampled state `x_k` and its deviation `x_ek`.
    pub fn triggered(&mut self, step: usize, x_k: Vector4<f64>, x_ek: Vector4<f64>) {
        self.sample = Some((x_k, x_ek));
        self.next_step = step + st_dwell_steps(&self.params, &x_ek, self.h);
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }
}
