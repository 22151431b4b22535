//! Model-free learning of the tracking controller from trajectory data.
//!
//! A single excitation run under `u = -K0 x + ξ` is cut into `s` sample
//! intervals. For every null-space vector `Y^l` of `C` the shifted state
//! `x^l = x - Y^l ρ` obeys
//!
//! ```text
//! ẋ^l = (A - B K_j) x^l + B (K_j x^l + u) + (D + A Y^l) ρ
//! ```
//!
//! so along the data the quadratic form `x^lᵀ P_j x^l` changes by integrals
//! that are linear in `vecs(P_j)`, `K_{j+1}` and `(D + A Y^l)ᵀ P_j`. Each
//! policy-iteration step is one least-squares solve over those 18 unknowns.
//! The converged unknowns then give `D`, `A Y^l` and `B`, and from them the
//! feedforward pair `(U, X)`.

use nalgebra::{Matrix4, RowVector4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnf::{CnfParams, GainSet};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SymMatrix, Tolerances, Vector};
use crate::plant::{Plant, RoadProfile, RoadSegment, VehicleState};

/// Unknowns per least-squares row: 10 (P) + 4 (K) + 4 ((D + AY)ᵀP).
pub const UNKNOWNS: usize = 18;

/// Shift vectors: `Y^1 = 0` and an orthonormal basis of `ker C`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    pub y: [Vector4<f64>; 4],
}

/// `C = [0, 0, -l_s, 1]`: `e1`, `e2` and `[0, 0, 1, l_s] / sqrt(1 + l_s²)`.
pub fn make_basis(l_s: f64) -> BasisSet {
    let n = (1.0 + l_s * l_s).sqrt();
    BasisSet {
        y: [
            Vector4::zeros(),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector4::new(0.0, 1.0, 0.0, 0.0),
            Vector4::new(0.0, 0.0, 1.0 / n, l_s / n),
        ],
    }
}

impl BasisSet {
    /// Any three independent vectors with `C Y = 0`.
    pub fn from_vectors(c: &RowVector4<f64>, y: [Vector4<f64>; 3]) -> Result<Self> {
        for v in &y {
            if (c * v)[0].abs() > 1e-12 * v.norm().max(1.0) {
                return Err(Error::InvalidParams(
                    "basis vector is not in the null space of C".into(),
                ));
            }
        }
        let m = Matrix::from_columns(&[
            Vector::from_column_slice(y[0].as_slice()),
            Vector::from_column_slice(y[1].as_slice()),
            Vector::from_column_slice(y[2].as_slice()),
        ]);
        let sv = m.svd(false, false).singular_values;
        if sv.min() <= 1e-10 * sv.max() {
            return Err(Error::InvalidParams("basis vectors are linearly dependent".into()));
        }
        Ok(BasisSet {
            y: [Vector4::zeros(), y[0], y[1], y[2]],
        })
    }
}

/// Deterministic multi-sine `ξ(t) = Σ A sin(ω_i t + φ_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationNoise {
    pub amplitude: f64,
    pub omegas: Vec<f64>,
    pub phases: Vec<f64>,
}

impl ExplorationNoise {
    /// `count` log-spaced frequencies in `[w_lo, w_hi]`, phases drawn from `seed`.
    pub fn multisine(count: usize, amplitude: f64, w_lo: f64, w_hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omegas = (0..count)
            .map(|i| {
                if count == 1 {
                    w_lo
                } else {
                    w_lo * (w_hi / w_lo).powf(i as f64 / (count - 1) as f64)
                }
            })
            .collect();
        let phases = (0..count)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        ExplorationNoise {
            amplitude,
            omegas,
            phases,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.omegas
            .iter()
            .zip(&self.phases)
            .map(|(w, ph)| self.amplitude * (w * t + ph).sin())
            .sum()
    }
}

/// Learning-run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdpConfig {
    /// Diagonal of `Q`.
    pub q_diag: [f64; 4],
    pub r: f64,
    /// Initial stabilizing gain `K0`.
    pub k0: [f64; 4],
    /// Number of sample intervals `s`.
    pub samples: usize,
    pub dt_sample: f64,
    pub noise_amplitude: f64,
    pub noise_count: usize,
    pub noise_omega_min: f64,
    pub noise_omega_max: f64,
    pub seed: u64,
    /// Convergence tolerance on `||P_j - P_{j-1}||_F`.
    pub err: f64,
    pub max_iterations: usize,
    /// Collection aborts once `||x||` exceeds this.
    pub divergence_bound: f64,
    /// Allowed relative spread of `(P, K)` across shift vectors.
    pub agreement_tol: f64,
    /// Road driven during the learning run.
    pub road: Vec<RoadSegment>,
    pub quadrature: Quadrature,
    /// Nonlinear-term parameters written into the learned gain set.
    pub cnf: CnfParams,
}

impl Default for AdpConfig {
    fn default() -> Self {
        AdpConfig {
            q_diag: [100.0; 4],
            r: 100.0,
            k0: DEFAULT_K0,
            samples: 40,
            dt_sample: 0.1,
            noise_amplitude: 0.01,
            noise_count: 8,
            noise_omega_min: 0.5,
            noise_omega_max: 20.0,
            seed: 7,
            err: 1e-6,
            max_iterations: 50,
            divergence_bound: 1e3,
            agreement_tol: 1e-4,
            road: learning_road(),
            quadrature: Quadrature::default(),
            cnf: CnfParams::default(),
        }
    }
}

/// Stabilizing gain for the reference car at 15 m/s: a low-gain LQ design
/// (`Q = I`, `R = 100`) on the nominal model, rounded.
pub const DEFAULT_K0: [f64; 4] = [0.0306, 0.0781, 0.5676, 0.1];

/// Curvature changes every 15 m so that the `ρ` columns are excited.
pub fn learning_road() -> Vec<RoadSegment> {
    [0.02, -0.015, 0.0, 0.025]
        .iter()
        .map(|&c| RoadSegment {
            length_m: 15.0,
            curvature_inv_m: c,
        })
        .collect()
}

impl AdpConfig {
    pub fn q(&self) -> SymMatrix {
        SymMatrix::from_diagonal(&self.q_diag)
    }

    pub fn k0(&self) -> RowVector4<f64> {
        RowVector4::from(self.k0)
    }

    pub fn noise(&self) -> ExplorationNoise {
        ExplorationNoise::multisine(
            self.noise_count,
            self.noise_amplitude,
            self.noise_omega_min,
            self.noise_omega_max,
            self.seed,
        )
    }

    pub fn road(&self) -> RoadProfile {
        RoadProfile {
            segments: self.road.clone(),
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            convergence: self.err,
            max_iterations: self.max_iterations,
            ..Tolerances::default()
        }
    }
}

/// Per-shift data matrices, one row per sample interval.
#[derive(Clone, Debug)]
pub struct ShiftData {
    /// Rows `vecv(x^l(t_{i+1})) - vecv(x^l(t_i))`, s x 10.
    pub delta_xx: Matrix,
    /// Rows `∫ x^l ⊗ x^l`, s x 16.
    pub gamma_xx: Matrix,
    /// Rows `∫ x^l u`, s x 4.
    pub gamma_xu: Matrix,
    /// Rows `∫ x^l ρ`, s x 4.
    pub gamma_xrho: Matrix,
}

impl ShiftData {
    fn zeros(s: usize) -> Self {
        ShiftData {
            delta_xx: Matrix::zeros(s, 10),
            gamma_xx: Matrix::zeros(s, 16),
            gamma_xu: Matrix::zeros(s, 4),
            gamma_xrho: Matrix::zeros(s, 4),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataBatch {
    pub shifts: [ShiftData; 4],
    /// Sample instants `t_0 < … < t_s`.
    pub times: Vec<f64>,
    /// Curvature held over each interval.
    pub rho: Vec<f64>,
    /// Unshifted increments `x(t_{i+1}) - x(t_i)`, s x 4.
    pub dx: Matrix,
    /// `∫ x`, s x 4.
    pub int_x: Matrix,
    /// `∫ u` per interval.
    pub int_u: Vec<f64>,
}

impl DataBatch {
    pub fn rows(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    fn zeros(s: usize) -> Self {
        DataBatch {
            shifts: std::array::from_fn(|_| ShiftData::zeros(s)),
            times: Vec::with_capacity(s + 1),
            rho: Vec::with_capacity(s),
            dx: Matrix::zeros(s, 4),
            int_x: Matrix::zeros(s, 4),
            int_u: vec![0.0; s],
        }
    }
}

/// Anything that can be advanced one fixed step with held input and curvature.
pub trait StepPlant {
    fn step(&self, s: &VehicleState, u: f64, rho: f64, h: f64) -> Result<VehicleState>;
}

impl StepPlant for Plant {
    fn step(&self, s: &VehicleState, u: f64, rho: f64, h: f64) -> Result<VehicleState> {
        Plant::step(self, s, u, rho, h)
    }
}

/// Per-step quadrature for the data integrals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    Trapezoid,
    /// Needs a state sample at every half step.
    #[default]
    Simpson,
}

/// Inputs of one excitation run.
#[derive(Clone, Debug)]
pub struct Excitation<'a> {
    pub k0: RowVector4<f64>,
    pub noise: &'a ExplorationNoise,
    pub road: &'a RoadProfile,
    /// Measured forward speed, used only to locate the vehicle on the road.
    pub speed: f64,
    pub samples: usize,
    pub dt_sample: f64,
    pub h: f64,
    pub x0: VehicleState,
    pub divergence_bound: f64,
    pub quadrature: Quadrature,
}

/// Runs the plant under `u = -K0 x + ξ` and accumulates the data matrices.
///
/// Curvature is held per sample interval (taken at the interval midpoint)
/// so that `x^l` is continuous inside every interval. The input is
/// zero-order held per base step, so the state is smooth inside a step and
/// each step is integrated on its own: trapezoid from the two end samples,
/// or Simpson with one extra sample at mid-step.
pub fn collect<P: StepPlant>(plant: &P, ex: &Excitation<'_>, basis: &BasisSet) -> Result<DataBatch> {
    let s = ex.samples;
    let sub = (ex.dt_sample / ex.h).round() as usize;
    if sub == 0 || s == 0 {
        return Err(Error::InvalidParams(
            "sampling window must contain at least one step".into(),
        ));
    }
    let mut batch = DataBatch::zeros(s);
    let mut state = ex.x0;
    let mut step_index = 0usize;
    let t0 = ex.x0.t;
    batch.times.push(t0);

    for i in 0..s {
        let t_start = t0 + (i * sub) as f64 * ex.h;
        let rho = ex
            .road
            .curvature_at(ex.speed * (t_start + 0.5 * sub as f64 * ex.h - t0));
        batch.rho.push(rho);
        let x_start = state.vector();

        for _ in 0..sub {
            let t = t0 + step_index as f64 * ex.h;
            let x = state.vector();
            let u = -(ex.k0 * x)[0] + ex.noise.value(t);
            let (next, nodes) = match ex.quadrature {
                Quadrature::Trapezoid => {
                    let next = plant.step(&state, u, rho, ex.h)?;
                    (next, [(0.5, x), (0.0, x), (0.5, next.vector())])
                }
                Quadrature::Simpson => {
                    let mid = plant.step(&state, u, rho, 0.5 * ex.h)?;
                    let next = plant.step(&mid, u, rho, 0.5 * ex.h)?;
                    (
                        next,
                        [(1.0 / 6.0, x), (4.0 / 6.0, mid.vector()), (1.0 / 6.0, next.vector())],
                    )
                }
            };
            let xn = next.vector();
            if xn.norm() > ex.divergence_bound {
                return Err(Error::Diverged {
                    t: next.t,
                    norm: xn.norm(),
                    bound: ex.divergence_bound,
                });
            }
            for (l, data) in batch.shifts.iter_mut().enumerate() {
                let y = basis.y[l] * rho;
                for &(w, xq) in &nodes {
                    let a = xq - y;
                    let w = w * ex.h;
                    for r in 0..4 {
                        for c in 0..4 {
                            data.gamma_xx[(i, 4 * r + c)] += w * a[r] * a[c];
                        }
                        data.gamma_xu[(i, r)] += w * u * a[r];
                        data.gamma_xrho[(i, r)] += w * rho * a[r];
                    }
                }
            }
            for &(w, xq) in &nodes {
                for r in 0..4 {
                    batch.int_x[(i, r)] += w * ex.h * xq[r];
                }
            }
            batch.int_u[i] += ex.h * u;
            state = VehicleState {
                t: t0 + (step_index + 1) as f64 * ex.h,
                ..next
            };
            step_index += 1;
        }

        let x_end = state.vector();
        for (l, data) in batch.shifts.iter_mut().enumerate() {
            let y = basis.y[l] * rho;
            let dv = linalg::vecv((x_end - y).as_slice()) - linalg::vecv((x_start - y).as_slice());
            data.delta_xx.row_mut(i).copy_from(&dv.transpose());
        }
        batch.dx.row_mut(i).copy_from(&(x_end - x_start).transpose());
        batch.times.push(t0 + ((i + 1) * sub) as f64 * ex.h);
    }
    Ok(batch)
}

/// One data-based policy-evaluation step for a single shift.
#[derive(Clone, Debug)]
pub struct ShiftSolution {
    pub p: SymMatrix,
    pub k_next: RowVector4<f64>,
    /// `vec((D + A Y^l)ᵀ P_j) = P_j (D + A Y^l)`.
    pub w: Vector4<f64>,
    pub rank: usize,
    pub condition: f64,
}

/// Builds `Θ_j` and `Ξ_j` for one shift and solves them.
///
/// Columns are scaled to unit norm before the SVD and unscaled afterwards;
/// this leaves the minimizer unchanged but keeps the rank test meaningful
/// when the three column blocks differ by orders of magnitude.
pub fn evaluate_shift(
    data: &ShiftData,
    k: &RowVector4<f64>,
    q: &SymMatrix,
    r: f64,
    rank_cutoff: f64,
) -> Result<ShiftSolution> {
    let s = data.delta_xx.nrows();
    let k_dyn = Matrix::from_row_slice(1, 4, k.as_slice());
    let i4 = Matrix::identity(4, 4);
    let ik = linalg::kron(&i4, &(k_dyn.transpose() * r))?;

    let mut theta = Matrix::zeros(s, UNKNOWNS);
    theta.columns_mut(0, 10).copy_from(&data.delta_xx);
    let k_block = (&data.gamma_xx * &ik) * -2.0 - &data.gamma_xu * (2.0 * r);
    theta.columns_mut(10, 4).copy_from(&k_block);
    theta.columns_mut(14, 4).copy_from(&(&data.gamma_xrho * -2.0));

    let q_eff = q.as_matrix() + k_dyn.transpose() * &k_dyn * r;
    let xi = -(&data.gamma_xx * linalg::vec(&q_eff));

    let scales: Vec<f64> = (0..UNKNOWNS)
        .map(|j| {
            let n = theta.column(j).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    for (j, sc) in scales.iter().enumerate() {
        theta.column_mut(j).scale_mut(1.0 / sc);
    }
    let sol = linalg::solve_least_squares_with(&theta, &xi, rank_cutoff)?;
    let z: Vec<f64> = sol.x.iter().zip(&scales).map(|(v, sc)| v / sc).collect();

    let p = linalg::unvecs(&Vector::from_column_slice(&z[0..10]), 4)?;
    Ok(ShiftSolution {
        p,
        k_next: RowVector4::from_column_slice(&z[10..14]),
        w: Vector4::from_column_slice(&z[14..18]),
        rank: sol.rank,
        condition: sol.condition,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub j: usize,
    /// `||P_j - P_{j-1}||_F`; infinite for the first iteration.
    pub dp_norm: f64,
    /// `||K_j||` of the gain being evaluated.
    pub k_norm: f64,
    /// Numerical rank of `Θ_j` for each shift.
    pub ranks: [usize; 4],
    /// Largest relative deviation of any shift's `(P, K)` from shift 1.
    pub spread: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyIterationResult {
    pub p: Matrix4<f64>,
    pub k: RowVector4<f64>,
    /// Converged `P (D + A Y^l)` for each shift.
    pub w: [Vector4<f64>; 4],
    /// `(P_j, K_{j+1})` per iteration, from shift 1.
    pub iterates: Vec<(Matrix4<f64>, RowVector4<f64>)>,
    pub history: Vec<IterationRecord>,
    /// Whether every shift agreed with shift 1 within tolerance at termination.
    pub shifts_agree: bool,
}

impl PolicyIterationResult {
    /// `j,dp_norm,k_norm` rows; the first change is written as `inf`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("j,dp_norm,k_norm\n");
        for h in &self.history {
            out.push_str(&format!("{},{},{}\n", h.j, h.dp_norm, h.k_norm));
        }
        out
    }
}

fn to_fixed(p: &SymMatrix) -> Matrix4<f64> {
    Matrix4::from_column_slice(p.as_matrix().as_slice())
}

/// Data-driven Kleinman iteration.
///
/// Each shift is solved independently; `(P_j, K_{j+1})` are taken from
/// shift 1 and the other shifts are compared against it.
pub fn policy_iteration(
    batch: &DataBatch,
    k0: &RowVector4<f64>,
    q: &SymMatrix,
    r: f64,
    tol: &Tolerances,
    agreement_tol: f64,
) -> Result<PolicyIterationResult> {
    if batch.rows() < UNKNOWNS {
        return Err(Error::RankDeficient {
            rank: batch.rows(),
            cols: UNKNOWNS,
        });
    }
    let mut k = *k0;
    let mut prev_p: Option<Matrix4<f64>> = None;
    let mut history = Vec::new();
    let mut iterates = Vec::new();

    for j in 0..tol.max_iterations {
        let sols = batch
            .shifts
            .iter()
            .map(|d| evaluate_shift(d, &k, q, r, tol.rank_cutoff))
            .collect::<Result<Vec<_>>>()?;
        let p = to_fixed(&sols[0].p);
        let k_next = sols[0].k_next;
        let spread = sols[1..]
            .iter()
            .map(|s| {
                let dp = (to_fixed(&s.p) - p).norm() / p.norm().max(f64::MIN_POSITIVE);
                let dk = (s.k_next - k_next).norm() / k_next.norm().max(f64::MIN_POSITIVE);
                dp.max(dk)
            })
            .fold(0.0, f64::max);
        let dp_norm = prev_p.map(|pp| (p - pp).norm()).unwrap_or(f64::INFINITY);
        history.push(IterationRecord {
            j,
            dp_norm,
            k_norm: k.norm(),
            ranks: [sols[0].rank, sols[1].rank, sols[2].rank, sols[3].rank],
            spread,
        });
        iterates.push((p, k_next));

        if dp_norm < tol.convergence {
            return Ok(PolicyIterationResult {
                p,
                k: k_next,
                w: [sols[0].w, sols[1].w, sols[2].w, sols[3].w],
                iterates,
                history,
                shifts_agree: spread <= agreement_tol,
            });
        }
        prev_p = Some(p);
        k = k_next;
    }
    Err(Error::NoConvergence {
        iterations: tol.max_iterations,
        last_change: history.last().map(|h| h.dp_norm).unwrap_or(f64::INFINITY),
    })
}

/// Model quantities recovered from the converged unknowns.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelEstimate {
    pub d: Vector4<f64>,
    /// `A Y^l`; the first entry is zero since `Y^1 = 0`.
    pub ay: [Vector4<f64>; 4],
    pub b: Vector4<f64>,
}

/// `D = P⁻¹ w¹`, `A Y^l = P⁻¹ w^l - D`, `B = r P⁻¹ Kᵀ`.
pub fn recover_model(w: &[Vector4<f64>; 4], p: &Matrix4<f64>, k: &RowVector4<f64>, r: f64) -> Result<ModelEstimate> {
    let chol = p.cholesky().ok_or(Error::SingularP)?;
    let d = chol.solve(&w[0]);
    let mut ay = [Vector4::zeros(); 4];
    for l in 1..4 {
        ay[l] = chol.solve(&w[l]) - d;
    }
    let b = chol.solve(&k.transpose()) * r;
    Ok(ModelEstimate { d, ay, b })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feedforward {
    pub u: f64,
    pub x: Vector4<f64>,
    pub l: f64,
    /// Coefficients of `Y^2..Y^4` in `X`.
    pub alphas: [f64; 3],
}

/// Largest condition number accepted for the feedforward system.
pub const MAX_FEEDFORWARD_CONDITION: f64 = 1e10;

/// Solves `Σ α^l A Y^l + B U = -D`, then `X = Σ α^l Y^l`, `L = U + K X`.
pub fn solve_feedforward(est: &ModelEstimate, basis: &BasisSet, k: &RowVector4<f64>) -> Result<Feedforward> {
    let m = Matrix::from_columns(&[
        Vector::from_column_slice(est.ay[1].as_slice()),
        Vector::from_column_slice(est.ay[2].as_slice()),
        Vector::from_column_slice(est.ay[3].as_slice()),
        Vector::from_column_slice(est.b.as_slice()),
    ]);
    let sv = m.clone().svd(false, false).singular_values;
    let cond = sv.max() / sv.min();
    if cond.is_nan() || cond > MAX_FEEDFORWARD_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    let rhs = -Vector::from_column_slice(est.d.as_slice());
    let z = linalg::solve_least_squares(&m, &rhs)?;
    let alphas = [z[0], z[1], z[2]];
    let x = basis.y[1] * alphas[0] + basis.y[2] * alphas[1] + basis.y[3] * alphas[2];
    let u = z[3];
    Ok(Feedforward {
        u,
        x,
        l: u + (k * x)[0],
        alphas,
    })
}

/// Least-squares fit of `A` from `Δx = A ∫x + B ∫u + D ∫ρ` with `B`, `D` already estimated.
pub fn regress_drift(batch: &DataBatch, b: &Vector4<f64>, d: &Vector4<f64>) -> Result<Matrix4<f64>> {
    let s = batch.rows();
    let mut rhs = batch.dx.clone();
    for i in 0..s {
        let int_rho = batch.rho[i] * (batch.times[i + 1] - batch.times[i]);
        for r in 0..4 {
            rhs[(i, r)] -= b[r] * batch.int_u[i] + d[r] * int_rho;
        }
    }
    let mut a = Matrix4::zeros();
    for r in 0..4 {
        let row = linalg::solve_least_squares(&batch.int_x, &rhs.column(r).into_owned())?;
        for c in 0..4 {
            a[(r, c)] = row[c];
        }
    }
    Ok(a)
}

/// Everything produced by a learning run.
#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub gains: GainSet,
    pub iteration: PolicyIterationResult,
    pub model: ModelEstimate,
    pub feedforward: Feedforward,
}

/// Policy iteration, model recovery and feedforward on a collected batch.
pub fn learn_from_batch(batch: &DataBatch, basis: &BasisSet, cfg: &AdpConfig) -> Result<LearnOutcome> {
    let iteration = policy_iteration(batch, &cfg.k0(), &cfg.q(), cfg.r, &cfg.tolerances(), cfg.agreement_tol)?;
    let model = recover_model(&iteration.w, &iteration.p, &iteration.k, cfg.r)?;
    let feedforward = solve_feedforward(&model, basis, &iteration.k)?;
    let mut gains = GainSet::new(iteration.p, iteration.k, feedforward.u, feedforward.x, model.b, cfg.cnf);
    gains.a_est = Some(regress_drift(batch, &model.b, &model.d)?);
    Ok(LearnOutcome {
        gains,
        iteration,
        model,
        feedforward,
    })
}

/// Full pipeline: excite `plant`, then learn. Only `l_s` (the output map)
/// and the forward speed are taken as known.
pub fn learn<P: StepPlant>(
    plant: &P,
    l_s: f64,
    speed: f64,
    h: f64,
    cfg: &AdpConfig,
) -> Result<(LearnOutcome, DataBatch)> {
    let basis = make_basis(l_s);
    let noise = cfg.noise();
    let road = cfg.road();
    let ex = Excitation {
        k0: cfg.k0(),
        noise: &noise,
        road: &road,
        speed,
        samples: cfg.samples,
        dt_sample: cfg.dt_sample,
        h,
        x0: VehicleState::default(),
        divergence_bound: cfg.divergence_bound,
        quadrature: cfg.quadrature,
    };
    let batch = collect(plant, &ex, &basis)?;
    let outcome = learn_from_batch(&batch, &basis, cfg)?;
    Ok((outcome, batch))
}

pub mod exact {
    //! Exact data matrices from the known model.
    //!
    //! The closed loop under `u = -K0 x + ξ(t)` is linear once the
    //! multi-sine is generated by harmonic oscillators and `ρ` is appended as
    //! a constant state. Interval integrals of `z zᵀ` then follow from one
    //! matrix exponential (Van Loan), so the batch carries no quadrature
    //! error. Used to check the learner against model-based iteration.

    use super::*;
    use crate::plant::PlantMatrices;

    pub fn collect_exact(m: &PlantMatrices, ex: &Excitation<'_>, basis: &BasisSet) -> Result<DataBatch> {
        let nosc = ex.noise.omegas.len();
        let n = 4 + 2 * nosc + 1;
        let irho = n - 1;

        // z = [x; sin_1; cos_1; …; ρ]
        let mut f = Matrix::zeros(n, n);
        let a_cl = m.a - m.b * ex.k0;
        for r in 0..4 {
            for c in 0..4 {
                f[(r, c)] = a_cl[(r, c)];
            }
            f[(r, irho)] = m.d[r];
        }
        // input map u = g z
        let mut g = Matrix::zeros(1, n);
        for c in 0..4 {
            g[(0, c)] = -ex.k0[c];
        }
        for (i, &w) in ex.noise.omegas.iter().enumerate() {
            let (si, ci) = (4 + 2 * i, 5 + 2 * i);
            f[(si, ci)] = w;
            f[(ci, si)] = -w;
            g[(0, si)] = ex.noise.amplitude;
            for r in 0..4 {
                f[(r, si)] = m.b[r] * ex.noise.amplitude;
            }
        }

        let dt = ex.dt_sample;
        let step = (&f * dt).exp();
        let s = ex.samples;
        let mut batch = DataBatch::zeros(s);
        let t0 = ex.x0.t;
        let mut z = Vector::zeros(n);
        z.rows_mut(0, 4).copy_from_slice(ex.x0.vector().as_slice());
        for (i, (&w, &ph)) in ex.noise.omegas.iter().zip(&ex.noise.phases).enumerate() {
            z[4 + 2 * i] = (w * t0 + ph).sin();
            z[5 + 2 * i] = (w * t0 + ph).cos();
        }
        batch.times.push(t0);

        for i in 0..s {
            let t_start = t0 + i as f64 * dt;
            let rho = ex.road.curvature_at(ex.speed * (t_start + 0.5 * dt - t0));
            batch.rho.push(rho);
            z[irho] = rho;

            let gram = gramian(&f, &z, dt);
            let z_end = &step * &z;
            let gu = &gram * g.transpose();

            for (l, data) in batch.shifts.iter_mut().enumerate() {
                // x^l = E_l z with E_l = [I 0 … -Y^l]
                let mut e = Matrix::zeros(4, n);
                for r in 0..4 {
                    e[(r, r)] = 1.0;
                    e[(r, irho)] = -basis.y[l][r];
                }
                let xx = &e * &gram * e.transpose();
                let xu = &e * &gu;
                let xr = &e * gram.column(irho);
                for r in 0..4 {
                    for c in 0..4 {
                        data.gamma_xx[(i, 4 * r + c)] = xx[(r, c)];
                    }
                    data.gamma_xu[(i, r)] = xu[(r, 0)];
                    data.gamma_xrho[(i, r)] = xr[r];
                }
                let xa = &e * &z;
                let xb = &e * &z_end;
                let dv = linalg::vecv(xb.as_slice()) - linalg::vecv(xa.as_slice());
                data.delta_xx.row_mut(i).copy_from(&dv.transpose());
            }
            // ∫ z = ∫ z ρ / ρ is unavailable at ρ = 0; integrate z directly.
            let int_z = integral(&f, &z, dt);
            for r in 0..4 {
                batch.int_x[(i, r)] = int_z[r];
                batch.dx[(i, r)] = z_end[r] - z[r];
            }
            batch.int_u[i] = (&g * &int_z)[0];
            z = z_end;
            batch.times.push(t0 + (i + 1) as f64 * dt);
        }
        Ok(batch)
    }

    /// `∫_0^T e^{Fs} z zᵀ e^{Fᵀs} ds` from `exp([[F, z zᵀ], [0, -Fᵀ]] T)`.
    fn gramian(f: &Matrix, z: &Vector, t: f64) -> Matrix {
        let n = f.nrows();
        let mut big = Matrix::zeros(2 * n, 2 * n);
        big.view_mut((0, 0), (n, n)).copy_from(f);
        big.view_mut((0, n), (n, n)).copy_from(&(z * z.transpose()));
        big.view_mut((n, n), (n, n)).copy_from(&(-f.transpose()));
        let e = (big * t).exp();
        let f11 = e.view((0, 0), (n, n)).into_owned();
        let f12 = e.view((0, n), (n, n)).into_owned();
        let g = f12 * f11.transpose();
        (&g + g.transpose()) * 0.5
    }

    /// `∫_0^T e^{Fs} z ds` from `exp([[F, z], [0, 0]] T)`.
    fn integral(f: &Matrix, z: &Vector, t: f64) -> Vector {
        let n = f.nrows();
        let mut big = Matrix::zeros(n + 1, n + 1);
        big.view_mut((0, 0), (n, n)).copy_from(f);
        big.view_mut((0, n), (n, 1)).copy_from(z);
        let e = (big * t).exp();
        e.view((0, n), (n, 1)).column(0).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{build_matrices, PlantParams};
    use approx::assert_relative_eq;

    #[test]
    fn basis_in_null_space() {
        let b = make_basis(5.0);
        let c = RowVector4::new(0.0, 0.0, -5.0, 1.0);
        assert_eq!(b.y[0], Vector4::zeros());
        for y in &b.y {
            assert!((c * y)[0].abs() < 1e-12);
        }
        let n = 26f64.sqrt();
        assert_relative_eq!(b.y[3], Vector4::new(0.0, 0.0, 1.0 / n, 5.0 / n), epsilon = 1e-15);
        BasisSet::from_vectors(&c, [b.y[1], b.y[2], b.y[3]]).unwrap();
    }

    #[test]
    fn basis_rejects_bad_vectors() {
        let c = RowVector4::new(0.0, 0.0, -5.0, 1.0);
        let e1 = Vector4::new(1.0, 0.0, 0.0, 0.0);
        assert!(BasisSet::from_vectors(&c, [e1, e1 * 2.0, Vector4::new(0.0, 1.0, 0.0, 0.0)]).is_err());
        assert!(BasisSet::from_vectors(
            &c,
            [e1, Vector4::new(0.0, 0.0, 1.0, 0.0), Vector4::new(0.0, 1.0, 0.0, 0.0)]
        )
        .is_err());
    }

    struct Frozen;
    impl StepPlant for Frozen {
        fn step(&self, s: &VehicleState, _u: f64, _rho: f64, h: f64) -> Result<VehicleState> {
            Ok(VehicleState { t: s.t + h, ..*s })
        }
    }

    fn quiet_excitation<'a>(noise: &'a ExplorationNoise, road: &'a RoadProfile) -> Excitation<'a> {
        Excitation {
            k0: RowVector4::zeros(),
            noise,
            road,
            speed: 15.0,
            samples: 40,
            dt_sample: 0.1,
            h: 0.005,
            x0: VehicleState::default(),
            divergence_bound: 1e3,
            quadrature: Quadrature::Trapezoid,
        }
    }

    #[test]
    fn zero_trajectory_gives_zero_data() {
        let noise = ExplorationNoise::multisine(8, 0.0, 0.5, 20.0, 1);
        let road = RoadProfile::straight(1000.0);
        let batch = collect(&Frozen, &quiet_excitation(&noise, &road), &make_basis(5.0)).unwrap();
        assert_eq!(batch.rows(), 40);
        for d in &batch.shifts {
            assert!(d.delta_xx.iter().all(|&v| v == 0.0));
            assert!(d.gamma_xx.iter().all(|&v| v == 0.0));
            assert!(d.gamma_xu.iter().all(|&v| v == 0.0));
            assert!(d.gamma_xrho.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn straight_road_has_zero_rho_block() {
        let noise = ExplorationNoise::multisine(8, 0.01, 0.5, 20.0, 1);
        let road = RoadProfile::straight(1000.0);
        let plant = Plant::new(PlantParams::default()).unwrap();
        let mut ex = quiet_excitation(&noise, &road);
        ex.k0 = RowVector4::from(DEFAULT_K0);
        let batch = collect(&plant, &ex, &make_basis(5.0)).unwrap();
        assert!(batch.shifts[0].gamma_xrho.iter().all(|&v| v == 0.0));
        assert!(batch.shifts[0].gamma_xx.iter().any(|&v| v != 0.0));
        // D block is unidentifiable on a straight road
        let q = SymMatrix::from_diagonal(&[100.0; 4]);
        let err = evaluate_shift(&batch.shifts[0], &ex.k0, &q, 100.0, 1e-8).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn design_matrix_shape() {
        let noise = ExplorationNoise::multisine(8, 0.01, 0.5, 20.0, 1);
        let road = RoadProfile::straight(1000.0);
        let batch = collect(&Frozen, &quiet_excitation(&noise, &road), &make_basis(5.0)).unwrap();
        let d = &batch.shifts[0];
        assert_eq!(d.delta_xx.nrows(), 40);
        assert_eq!(d.delta_xx.ncols() + d.gamma_xu.ncols() + d.gamma_xrho.ncols(), UNKNOWNS);
    }

    #[test]
    fn divergence_detected() {
        let noise = ExplorationNoise::multisine(8, 0.01, 0.5, 20.0, 1);
        let road = RoadProfile::straight(1000.0);
        let plant = Plant::new(PlantParams::default()).unwrap();
        let mut ex = quiet_excitation(&noise, &road);
        ex.k0 = RowVector4::new(0.0, 0.0, 0.0, -1.0);
        ex.divergence_bound = 1.0;
        ex.samples = 400;
        assert!(matches!(
            collect(&plant, &ex, &make_basis(5.0)),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn default_k0_stabilizes_reference_car() {
        let m = build_matrices(&PlantParams::default()).unwrap();
        let k0 = Matrix::from_row_slice(1, 4, &DEFAULT_K0);
        assert!(linalg::is_hurwitz(&(m.a_dyn() - m.b_dyn() * k0)));
    }

    #[test]
    fn multisine_is_deterministic() {
        let a = ExplorationNoise::multisine(8, 0.01, 0.5, 20.0, 42);
        let b = ExplorationNoise::multisine(8, 0.01, 0.5, 20.0, 42);
        assert_eq!(a, b);
        assert_relative_eq!(a.omegas[0], 0.5);
        assert_relative_eq!(a.omegas[7], 20.0, epsilon = 1e-12);
        assert!(a.omegas.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn recovery_from_oracle_quantities() {
        let m = build_matrices(&PlantParams::default()).unwrap();
        let q = SymMatrix::from_diagonal(&[100.0; 4]);
        let (p, k) = linalg::solve_are(&m.a_dyn(), &m.b_dyn(), &q, &SymMatrix::from_diagonal(&[100.0])).unwrap();
        let p = Matrix4::from_column_slice(p.as_matrix().as_slice());
        let k = RowVector4::from_column_slice(k.as_slice());
        let basis = make_basis(5.0);
        let w: [Vector4<f64>; 4] = std::array::from_fn(|l| p * (m.d + m.a * basis.y[l]));
        let est = recover_model(&w, &p, &k, 100.0).unwrap();
        assert_relative_eq!(est.d, Vector4::new(0.0, 0.0, -15.0, 0.0), epsilon = 1e-6);
        assert_eq!(est.ay[0], Vector4::zeros());
        let cos = est.b.dot(&m.b) / (est.b.norm() * m.b.norm());
        assert!(cos.min(1.0).acos().to_degrees() < 1.0);
        assert_relative_eq!(est.b.norm(), m.b.norm(), max_relative = 1e-2);

        let ff = solve_feedforward(&est, &basis, &k).unwrap();
        assert!((m.a * ff.x + m.b * ff.u + m.d).norm() < 1e-8);
        assert!((m.c * ff.x)[0].abs() < 1e-10);
    }

    #[test]
    fn recover_rejects_indefinite_p() {
        let p = Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, 1.0, 1.0));
        let w = [Vector4::zeros(); 4];
        assert!(matches!(
            recover_model(&w, &p, &RowVector4::zeros(), 1.0),
            Err(Error::SingularP)
        ));
    }

    #[test]
    fn feedforward_independent_of_basis() {
        let m = build_matrices(&PlantParams::default()).unwrap();
        let k = RowVector4::new(0.1, 0.2, 0.3, 0.4);
        let solve = |basis: &BasisSet| {
            let est = ModelEstimate {
                d: m.d,
                ay: std::array::from_fn(|l| m.a * basis.y[l]),
                b: m.b,
            };
            solve_feedforward(&est, basis, &k).unwrap()
        };
        let a = solve(&make_basis(5.0));
        let c = m.c;
        let other = BasisSet::from_vectors(
            &c,
            [
                Vector4::new(2.0, 1.0, 0.0, 0.0),
                Vector4::new(0.0, -3.0, 1.0, 5.0),
                Vector4::new(1.0, 0.0, 2.0, 10.0),
            ],
        )
        .unwrap();
        let b = solve(&other);
        assert_relative_eq!(a.x, b.x, epsilon = 1e-8);
        assert_relative_eq!(a.u, b.u, epsilon = 1e-8);
    }

    #[test]
    fn feedforward_rejects_singular_system() {
        let est = ModelEstimate {
            d: Vector4::new(0.0, 0.0, -15.0, 0.0),
            ay: [Vector4::zeros(); 4],
            b: Vector4::new(1.0, 0.0, 0.0, 0.0),
        };
        assert!(matches!(
            solve_feedforward(&est, &make_basis(5.0), &RowVector4::zeros()),
            Err(Error::IllConditioned(_))
        ));
    }
}
