//! Closed-loop scenarios: driver, triggered controller, authority blending
//! and plant, stepped together at a fixed base step.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector4;
use serde::Serialize;

use crate::cnf::{control_at_trigger, GainSet, HeldCommand};
use crate::config::Config;
use crate::driver::{driver_step, preview_angles, DriverParams, DriverState};
use crate::error::{Error, Result};
use crate::plant::{Plant, RoadProfile, VehicleState};
use crate::shared::{blend, AuthorityState, SharedParams};
use crate::trigger::{
    estimate_constants, et_threshold, et_violated, Scheduler, TriggerMode, TriggerParams, TriggerTrace,
};

pub const CSV_HEADER: &str = "t,vy,ra,psiL,yL,yc,delta_d,delta_c,u,sigma,ci,rho,trigger";

/// Cap on the held-command look-ahead used to time ET violations, s.
pub const ET_LOOKAHEAD: f64 = 2.0;

/// Which parts of the shared controller are active.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub cnf: bool,
    /// Constant automation authority instead of the CI-driven one.
    pub fixed_sigma: Option<f64>,
    pub trigger: TriggerMode,
}

impl Variant {
    pub fn proposed(trigger: TriggerMode) -> Self {
        Variant {
            name: "proposed".into(),
            cnf: true,
            fixed_sigma: None,
            trigger,
        }
    }

    pub fn no_cnf() -> Self {
        Variant {
            name: "no_cnf".into(),
            cnf: false,
            ..Variant::proposed(TriggerMode::SelfTriggered)
        }
    }

    pub fn fixed_sigma(sigma: f64) -> Self {
        Variant {
            name: format!("sigma_{sigma:.1}"),
            fixed_sigma: Some(sigma),
            ..Variant::proposed(TriggerMode::SelfTriggered)
        }
    }

    pub fn time_triggered() -> Self {
        Variant {
            name: "time_triggered".into(),
            ..Variant::proposed(TriggerMode::Time)
        }
    }

    /// Automation alone (`σ ≡ 1`), updated every base step.
    pub fn automation_only() -> Self {
        Variant {
            name: "automation_only".into(),
            fixed_sigma: Some(1.0),
            ..Variant::proposed(TriggerMode::Time)
        }
    }

    /// Rows of the comparison table.
    pub fn ablation_set() -> Vec<Variant> {
        vec![
            Variant::proposed(TriggerMode::SelfTriggered),
            Variant::no_cnf(),
            Variant::fixed_sigma(0.3),
            Variant::fixed_sigma(0.5),
            Variant::fixed_sigma(0.7),
            Variant::time_triggered(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub road: RoadProfile,
    pub duration: f64,
    pub h: f64,
    pub x0: VehicleState,
    pub shared: SharedParams,
    pub variant: Variant,
}

impl Scenario {
    pub fn from_config(cfg: &Config, variant: Variant) -> Result<Self> {
        let sc = Scenario {
            name: cfg.scenario.name.clone(),
            road: cfg.scenario.road_profile()?,
            duration: cfg.scenario.duration,
            h: cfg.scenario.h,
            x0: cfg.scenario.initial_state(),
            shared: cfg.shared,
            variant,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.h > 0.0 && self.shared.kappa > 0.0) {
            return Err(Error::InvalidParams("duration, step and kappa must be positive".into()));
        }
        if let Some(s) = self.variant.fixed_sigma {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidParams(format!("fixed sigma {s} outside [0, 1]")));
            }
        }
        self.road.validate()
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.h).round() as usize
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Scenario {
            variant,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub x: Vector4<f64>,
    pub yc: f64,
    pub delta_d: f64,
    pub delta_c: f64,
    pub u: f64,
    pub sigma: f64,
    pub ci: f64,
    pub rho: f64,
    pub trigger: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimLog {
    pub rows: Vec<LogRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub j_rms: f64,
    pub triggers: usize,
    pub max_abs_yc: f64,
    /// `100 (1 - triggers / steps)`: saving against updating every base step.
    pub reduction_pct: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: SimLog,
    pub summary: RunSummary,
    pub trace: TriggerTrace,
}

/// Driver, controller, authority and plant state, advanced one base step at a time.
#[derive(Clone, Debug)]
pub struct ClosedLoop<'a> {
    plant: &'a Plant,
    driver_params: &'a DriverParams,
    road: &'a RoadProfile,
    gains: GainSet,
    fixed_sigma: Option<f64>,
    h: f64,
    pub state: VehicleState,
    driver: DriverState,
    authority: AuthorityState,
    pub held: Option<HeldCommand>,
    pub scheduler: Scheduler,
    pub step: usize,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        plant: &'a Plant,
        driver: &'a DriverParams,
        gains: &GainSet,
        trigger: TriggerParams,
        sc: &'a Scenario,
    ) -> Self {
        let mut gains = gains.clone();
        if !sc.variant.cnf {
            gains.cnf.phi = 0.0;
        }
        ClosedLoop {
            plant,
            driver_params: driver,
            road: &sc.road,
            gains,
            fixed_sigma: sc.variant.fixed_sigma,
            h: sc.h,
            state: VehicleState { t: 0.0, ..sc.x0 },
            driver: DriverState::default(),
            authority: AuthorityState::new(&sc.shared),
            held: None,
            scheduler: Scheduler::new(sc.variant.trigger, trigger, sc.h),
            step: 0,
        }
    }

    /// One base step. With `allow_trigger` false the held command is kept
    /// regardless of the schedule (used for look-ahead).
    pub fn advance(&mut self, allow_trigger: bool) -> Result<LogRow> {
        let h = self.h;
        let t = self.step as f64 * h;
        let params = &self.plant.params;
        let arclen = params.v_x * t;
        let rho = self.road.curvature_at(arclen);
        let (a1, a2) = preview_angles(&self.state, self.road, arclen, self.driver_params, params);
        let (driver, delta_d) = driver_step(&self.driver, a1, a2, h, self.driver_params);
        self.driver = driver;

        let x = self.state.vector();
        let yc = self.plant.output(&self.state);
        let trigger = self.held.is_none() || (allow_trigger && self.scheduler.due(self.step, &x));
        if trigger {
            let cmd = control_at_trigger(&self.gains, &self.state, rho, yc);
            self.scheduler.triggered(self.step, x, cmd.x_ek);
            self.held = Some(cmd);
        }
        let delta_c = self.held.map(|c| c.u).unwrap_or(0.0);

        self.authority.update_ci(delta_d, delta_c, h);
        let sigma = self.fixed_sigma.unwrap_or_else(|| self.authority.sigma());
        let u = blend(sigma, delta_d, delta_c);
        let row = LogRow {
            t,
            x,
            yc,
            delta_d,
            delta_c,
            u,
            sigma,
            ci: self.authority.ci(),
            rho,
            trigger,
        };
        let mut next = self.plant.step(&self.state, u, rho, h)?;
        self.step += 1;
        next.t = self.step as f64 * h;
        self.state = next;
        Ok(row)
    }

    /// Deviation `x_k - x` from the last sampled state.
    pub fn sample_error(&self) -> Option<(Vector4<f64>, Vector4<f64>)> {
        self.held.map(|c| (c.x_k.vector() - self.state.vector(), c.x_ek))
    }
}

/// Violations found by monitoring a self-triggered run against the event-triggered rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SafetyReport {
    /// Base steps strictly between triggers that were checked.
    pub checked_steps: usize,
    /// Of those, steps with `||e||² > e_T` (beyond a 1e-9 tolerance).
    pub threshold_violations: usize,
    /// Triggers whose dwell exceeded the held-command ET violation time.
    pub dwell_violations: usize,
    /// Triggers compared against the look-ahead.
    pub compared_triggers: usize,
    /// Mean ET inter-violation time over compared triggers, s.
    pub mean_et_interval: f64,
    /// Mean ST dwell over compared triggers, s.
    pub mean_st_dwell: f64,
}

/// Everything needed to run scenarios with one gain set.
#[derive(Clone, Debug)]
pub struct Harness {
    pub plant: Plant,
    pub driver: DriverParams,
    pub gains: GainSet,
    pub trigger: TriggerParams,
    /// Bound on `||u - U ρ||` used for the constant `c`.
    pub phi_bound: f64,
}

impl Harness {
    /// Builds the harness; unless `phi_bound` is configured it is measured on
    /// a time-triggered run of the configured scenario.
    pub fn from_config(cfg: &Config, gains: GainSet) -> Result<Self> {
        cfg.validate()?;
        let plant = Plant::new(cfg.plant)?;
        let q = cfg.adp.q();
        let h = cfg.scenario.h;
        let tau_min = cfg.trigger.tau_min.unwrap_or(h);
        let overrides = cfg.trigger.constants;
        let mut harness = Harness {
            plant,
            driver: cfg.driver,
            gains,
            trigger: TriggerParams::new(cfg.trigger.alpha, (1.0, 1.0, 1.0), &q, tau_min)?,
            phi_bound: 0.0,
        };
        harness.phi_bound = match overrides.phi_bound {
            Some(v) => v,
            None => {
                let sc = Scenario::from_config(cfg, Variant::time_triggered())?;
                harness.calibrate_phi_bound(&sc)?
            }
        };
        let constants = estimate_constants(&harness.gains, None, &overrides, harness.phi_bound)?;
        harness.trigger = TriggerParams::new(cfg.trigger.alpha, constants, &q, tau_min)?;
        Ok(harness)
    }

    /// `max |δ_c - U ρ|` over a run with the scenario's variant.
    pub fn calibrate_phi_bound(&self, sc: &Scenario) -> Result<f64> {
        let out = self.run(sc)?;
        Ok(out
            .log
            .rows
            .iter()
            .map(|r| (r.delta_c - self.gains.u * r.rho).abs())
            .fold(0.0, f64::max))
    }

    pub fn run(&self, sc: &Scenario) -> Result<RunOutput> {
        self.run_inner(sc, false).map(|(out, _)| out)
    }

    /// Runs and additionally checks every inter-trigger step against the ET
    /// condition and times the ET violation from every trigger by look-ahead.
    pub fn run_monitored(&self, sc: &Scenario) -> Result<(RunOutput, SafetyReport)> {
        self.run_inner(sc, true)
    }

    fn run_inner(&self, sc: &Scenario, monitor: bool) -> Result<(RunOutput, SafetyReport)> {
        sc.validate()?;
        let n = sc.steps();
        let mut cl = ClosedLoop::new(&self.plant, &self.driver, &self.gains, self.trigger, sc);
        let mut log = SimLog {
            rows: Vec::with_capacity(n),
        };
        let mut trace = TriggerTrace::default();
        let mut report = SafetyReport::default();
        let lookahead = (ET_LOOKAHEAD / sc.h).round() as usize;
        let (mut sum_et, mut sum_st) = (0usize, 0usize);

        for _ in 0..n {
            if monitor && cl.held.is_some() && !cl.scheduler.due(cl.step, &cl.state.vector()) {
                let (e, x_ek) = cl.sample_error().expect("held command present");
                report.checked_steps += 1;
                if e.norm_squared() > et_threshold(&self.trigger, &x_ek) + 1e-9 {
                    report.threshold_violations += 1;
                }
            }
            let row = cl.advance(true)?;
            if row.trigger {
                let held = cl.held.expect("trigger sets a command");
                trace.push(row.t, held.x_ek, held.u);
                if monitor {
                    let dwell = cl.scheduler.next_step().saturating_sub(cl.step - 1);
                    let et = et_interval(&cl, &self.trigger, lookahead)?;
                    report.compared_triggers += 1;
                    sum_et += et;
                    sum_st += dwell;
                    if sc.variant.trigger == TriggerMode::SelfTriggered && dwell > et {
                        report.dwell_violations += 1;
                    }
                }
            }
            log.rows.push(row);
        }
        trace.close(n as f64 * sc.h);
        if report.compared_triggers > 0 {
            let c = report.compared_triggers as f64;
            report.mean_et_interval = sum_et as f64 * sc.h / c;
            report.mean_st_dwell = sum_st as f64 * sc.h / c;
        }
        let summary = summarize(&log, trace.count(), n);
        Ok((RunOutput { log, summary, trace }, report))
    }

    /// Every variant on the same scenario, in table order.
    pub fn ablation(&self, sc: &Scenario) -> Result<Vec<(Variant, RunOutput)>> {
        Variant::ablation_set()
            .into_iter()
            .map(|v| {
                let out = self.run(&sc.with_variant(v.clone()))?;
                Ok((v, out))
            })
            .collect()
    }
}

/// Steps after the trigger just taken until the held command violates the
/// ET condition, capped at `cap`.
fn et_interval(cl: &ClosedLoop<'_>, p: &TriggerParams, cap: usize) -> Result<usize> {
    let mut probe = cl.clone();
    for k in 1..=cap {
        if let Some((e, x_ek)) = probe.sample_error() {
            if et_violated(p, &e, &x_ek) {
                return Ok(k);
            }
        }
        probe.advance(false)?;
    }
    Ok(cap)
}

pub fn summarize(log: &SimLog, triggers: usize, steps: usize) -> RunSummary {
    RunSummary {
        j_rms: j_rms(log),
        triggers,
        max_abs_yc: log.rows.iter().map(|r| r.yc.abs()).fold(0.0, f64::max),
        reduction_pct: if steps > 0 {
            100.0 * (1.0 - triggers as f64 / steps as f64)
        } else {
            0.0
        },
    }
}

/// `sqrt((1/T) ∫ y_c² dt)` by the trapezoid rule over the logged samples.
pub fn j_rms(log: &SimLog) -> f64 {
    let t: Vec<f64> = log.rows.iter().map(|r| r.t).collect();
    let y: Vec<f64> = log.rows.iter().map(|r| r.yc).collect();
    rms_trapezoid(&t, &y)
}

pub fn rms_trapezoid(t: &[f64], y: &[f64]) -> f64 {
    if t.len() < 2 {
        return y.first().map(|v| v.abs()).unwrap_or(0.0);
    }
    let span = t[t.len() - 1] - t[0];
    let integral: f64 = t
        .windows(2)
        .zip(y.windows(2))
        .map(|(tw, yw)| 0.5 * (yw[0] * yw[0] + yw[1] * yw[1]) * (tw[1] - tw[0]))
        .sum();
    (integral / span).sqrt()
}

pub fn log_csv(log: &SimLog) -> String {
    let mut out = String::with_capacity(log.rows.len() * 160);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &log.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.x[0],
            r.x[1],
            r.x[2],
            r.x[3],
            r.yc,
            r.delta_d,
            r.delta_c,
            r.u,
            r.sigma,
            r.ci,
            r.rho,
            u8::from(r.trigger)
        );
    }
    out
}

pub fn summary_json(s: &RunSummary) -> String {
    serde_json::to_string_pretty(s).expect("summary serializes")
}

pub fn ablation_csv(rows: &[(Variant, RunOutput)]) -> String {
    let mut out = String::from("variant,cnf,sigma,trigger,j_rms,triggers,max_abs_yc,reduction_pct\n");
    for (v, o) in rows {
        let sigma = v
            .fixed_sigma
            .map(|s| s.to_string())
            .unwrap_or_else(|| "adaptive".into());
        let s = &o.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            v.name,
            v.cnf,
            sigma,
            v.trigger.name(),
            s.j_rms,
            s.triggers,
            s.max_abs_yc,
            s.reduction_pct
        );
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `log.csv` and `summary.json` into `dir`, creating it if needed.
pub fn export(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("log.csv"), &log_csv(&out.log))?;
    write(&dir.join("summary.json"), &summary_json(&out.summary))
}

/// Writes `ablation.csv` plus one `<variant>.csv` log per row.
pub fn export_ablation(rows: &[(Variant, RunOutput)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("ablation.csv"), &ablation_csv(rows))?;
    for (v, o) in rows {
        write(&dir.join(format!("{}.csv", v.name)), &log_csv(&o.log))?;
    }
    Ok(())
}
