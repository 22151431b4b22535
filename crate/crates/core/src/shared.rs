//! Authority allocation between driver and automation.
//!
//! The cooperation index is the trailing-window integral of `δ_d · δ_c`.
//! Agreement raises the automation's authority `σ`, conflict lowers it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharedParams {
    /// Authority gain `κ`.
    pub kappa: f64,
    /// Cooperation window `Δt`, s.
    pub window: f64,
}

impl Default for SharedParams {
    fn default() -> Self {
        SharedParams {
            kappa: 5.0,
            window: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AuthorityState {
    samples: VecDeque<(f64, f64)>,
    ci: f64,
    sigma: f64,
    pub kappa: f64,
    pub window: f64,
}

impl AuthorityState {
    pub fn new(params: &SharedParams) -> Self {
        AuthorityState {
            samples: VecDeque::new(),
            ci: 0.0,
            sigma: 0.5,
            kappa: params.kappa,
            window: params.window,
        }
    }

    pub fn ci(&self) -> f64 {
        self.ci
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Time of the most recent sample, s.
    pub fn time(&self) -> f64 {
        self.samples.back().map(|s| s.0).unwrap_or(0.0)
    }

    /// Records `δ_d · δ_c` at the next instant (`h` after the previous
    /// sample; the first sample sits at t = 0) and refreshes CI and σ.
    ///
    /// Before a full window has elapsed the integral starts at t = 0.
    pub fn update_ci(&mut self, delta_d: f64, delta_c: f64, h: f64) {
        let t = match self.samples.back() {
            Some(&(last, _)) => last + h,
            None => 0.0,
        };
        self.samples.push_back((t, delta_d * delta_c));
        let start = t - self.window - 1e-9 * h.max(1e-12);
        while self.samples.front().is_some_and(|&(ts, _)| ts < start) {
            self.samples.pop_front();
        }
        self.ci = self
            .samples
            .iter()
            .zip(self.samples.iter().skip(1))
            .map(|(&(t0, p0), &(t1, p1))| 0.5 * (p0 + p1) * (t1 - t0))
            .sum();
        self.sigma = authority(self.ci, self.kappa);
    }
}

/// `σ = clamp(0.5 + κ CI, 0, 1)`.
pub fn authority(ci: f64, kappa: f64) -> f64 {
    (0.5 + kappa * ci).clamp(0.0, 1.0)
}

/// `u = (1 - σ) δ_d + σ δ_c`.
pub fn blend(sigma: f64, delta_d: f64, delta_c: f64) -> f64 {
    (1.0 - sigma) * delta_d + sigma * delta_c
}
