//! Dense small-matrix numerics for the controller design.
//!
//! Kronecker and vectorization operators, an SVD-backed least-squares
//! solver, a Lyapunov solver, Kleinman policy iteration and an ARE solver
//! built on top of it. Everything here is pure and operates on
//! `nalgebra` dynamic matrices; the systems of interest are 4x4.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest row or column count `kron` will produce.
pub const KRON_MAX_DIM: usize = 4096;

/// Eigenvalue real parts must be below `-HURWITZ_MARGIN`.
pub const HURWITZ_MARGIN: f64 = 1e-10;

/// Numerical thresholds. Defaults follow the documented contract values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Stop Kleinman iteration once `||P_j - P_{j-1}||_F` drops below this.
    pub convergence: f64,
    /// Singular values below `rank_cutoff * s_max` count as zero.
    pub rank_cutoff: f64,
    /// Allowed asymmetry for inputs that must be symmetric.
    pub symmetry: f64,
    pub max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            convergence: 1e-6,
            rank_cutoff: 1e-8,
            symmetry: 1e-10,
            max_iterations: 50,
        }
    }
}

/// Symmetric matrix. Construction either checks or enforces symmetry.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Accepts `m` if it is symmetric to within `tol`, then symmetrizes exactly.
    pub fn new(m: Matrix, tol: f64) -> Result<Self> {
        check_square(&m, "SymMatrix")?;
        let asym = max_asymmetry(&m);
        if asym > tol {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self::symmetrize(&m))
    }

    /// `(m + m^T) / 2`, used on least-squares estimates whose symmetry is only approximate.
    pub fn symmetrize(m: &Matrix) -> Self {
        SymMatrix((m + m.transpose()) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Matrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(Matrix::from_diagonal(&Vector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn eigenvalues(&self) -> Vector {
        self.0.clone().symmetric_eigenvalues()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.0.clone().cholesky().is_some()
    }

    pub fn inverse(&self) -> Option<Matrix> {
        self.0.clone().try_inverse()
    }
}

fn check_square(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Kronecker product `a ⊗ b`, rejecting results larger than [`KRON_MAX_DIM`].
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    kron_capped(a, b, KRON_MAX_DIM)
}

pub fn kron_capped(a: &Matrix, b: &Matrix, cap: usize) -> Result<Matrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Dimension("kron of an empty matrix".into()));
    }
    let rows = a.nrows().checked_mul(b.nrows());
    let cols = a.ncols().checked_mul(b.ncols());
    match (rows, cols) {
        (Some(rows), Some(cols)) if rows <= cap && cols <= cap => Ok(a.kronecker(b)),
        (rows, cols) => Err(Error::TooLarge {
            rows: rows.unwrap_or(usize::MAX),
            cols: cols.unwrap_or(usize::MAX),
            cap,
        }),
    }
}

/// Column-stacking vectorization.
pub fn vec(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Quadratic monomials `[v1², v1 v2, …, v1 vn, v2², …, vn²]`.
pub fn vecv(v: &[f64]) -> Vector {
    let n = v.len();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(v[i] * v[j]);
        }
    }
    Vector::from_vec(out)
}

/// Upper triangle with doubled off-diagonals, row by row, so that
/// `vecv(x) · vecs(P) = xᵀ P x`.
pub fn vecs(p: &Matrix) -> Result<Vector> {
    check_square(p, "vecs")?;
    let asym = max_asymmetry(p);
    if asym > Tolerances::default().symmetry {
        return Err(Error::NotSymmetric(asym));
    }
    let n = p.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.push(p[(i, i)]);
        for j in (i + 1)..n {
            out.push(p[(i, j)] + p[(j, i)]);
        }
    }
    Ok(Vector::from_vec(out))
}

/// Inverse of [`vecs`].
pub fn unvecs(v: &Vector, n: usize) -> Result<SymMatrix> {
    if v.len() != n * (n + 1) / 2 {
        return Err(Error::Dimension(format!(
            "unvecs: length {} does not match dimension {n}",
            v.len()
        )));
    }
    let mut m = Matrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        m[(i, i)] = v[idx];
        idx += 1;
        for j in (i + 1)..n {
            m[(i, j)] = 0.5 * v[idx];
            m[(j, i)] = 0.5 * v[idx];
            idx += 1;
        }
    }
    Ok(SymMatrix(m))
}

/// Least-squares solution together with the numerical rank of the design matrix.
#[derive(Clone, Debug)]
pub struct LstsqSolution {
    pub x: Vector,
    pub rank: usize,
    /// Ratio of largest to smallest singular value.
    pub condition: f64,
}

/// Minimizer of `||theta z - xi||` via the SVD.
pub fn solve_least_squares(theta: &Matrix, xi: &Vector) -> Result<Vector> {
    solve_least_squares_with(theta, xi, Tolerances::default().rank_cutoff).map(|s| s.x)
}

pub fn solve_least_squares_with(theta: &Matrix, xi: &Vector, rank_cutoff: f64) -> Result<LstsqSolution> {
    let (rows, cols) = theta.shape();
    if rows != xi.len() {
        return Err(Error::Dimension(format!(
            "least squares: {rows} rows but right-hand side of length {}",
            xi.len()
        )));
    }
    if rows < cols {
        return Err(Error::RankDeficient { rank: rows, cols });
    }
    let svd = theta.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > rank_cutoff * s_max && s > 0.0)
        .count();
    if rank < cols {
        return Err(Error::RankDeficient { rank, cols });
    }
    let x = svd.solve(xi, 0.0).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(LstsqSolution {
        x,
        rank,
        condition: s_max / s_min,
    })
}

/// Largest real part among the eigenvalues of a square matrix.
pub fn max_real_eigenvalue(m: &Matrix) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn max_abs_real_eigenvalue(m: &Matrix) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re.abs())
        .fold(0.0, f64::max)
}

pub fn is_hurwitz(m: &Matrix) -> bool {
    m.is_square() && max_real_eigenvalue(m) < -HURWITZ_MARGIN
}

pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Solves `a_clᵀ P + P a_cl + q_eff = 0` for symmetric `P`.
///
/// The Kronecker form `(I ⊗ a_clᵀ + a_clᵀ ⊗ I) vec(P) = -vec(q_eff)` is
/// solved by LU, followed by three steps of iterative refinement.
pub fn solve_lyapunov(a_cl: &Matrix, q_eff: &SymMatrix) -> Result<SymMatrix> {
    check_square(a_cl, "solve_lyapunov")?;
    let n = a_cl.nrows();
    if q_eff.dim() != n {
        return Err(Error::Dimension(format!(
            "solve_lyapunov: A is {n}x{n} but Q is {0}x{0}",
            q_eff.dim()
        )));
    }
    let max_re = max_real_eigenvalue(a_cl);
    if max_re >= -HURWITZ_MARGIN {
        return Err(Error::NotHurwitz(max_re));
    }

    let eye = Matrix::identity(n, n);
    let at = a_cl.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let lu = op.lu();

    let rhs = -vec(q_eff.as_matrix());
    let sol = lu.solve(&rhs).ok_or(Error::NotHurwitz(max_re))?;
    let mut p = SymMatrix::symmetrize(&Matrix::from_column_slice(n, n, sol.as_slice()));

    for _ in 0..3 {
        let residual = lyapunov_residual(a_cl, &p, q_eff);
        let Some(corr) = lu.solve(&(-vec(&residual))) else {
            break;
        };
        p = SymMatrix::symmetrize(&(p.as_matrix() + Matrix::from_column_slice(n, n, corr.as_slice())));
    }
    Ok(p)
}

/// `a_clᵀ P + P a_cl + q_eff`.
pub fn lyapunov_residual(a_cl: &Matrix, p: &SymMatrix, q_eff: &SymMatrix) -> Matrix {
    let p = p.as_matrix();
    a_cl.transpose() * p + p * a_cl + q_eff.as_matrix()
}

/// `Aᵀ P + P A + Q - P B R⁻¹ Bᵀ P`.
pub fn are_residual(a: &Matrix, b: &Matrix, q: &SymMatrix, r: &SymMatrix, p: &SymMatrix) -> Result<Matrix> {
    let k = gain_from_p(b, r, p)?;
    let p = p.as_matrix();
    Ok(a.transpose() * p + p * a + q.as_matrix() - p * b * &k)
}

/// `K = R⁻¹ Bᵀ P`.
pub fn gain_from_p(b: &Matrix, r: &SymMatrix, p: &SymMatrix) -> Result<Matrix> {
    let chol = r
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("R must be positive definite".into()))?;
    Ok(chol.solve(&(b.transpose() * p.as_matrix())))
}

fn check_system(a: &Matrix, b: &Matrix, q: &SymMatrix, r: &SymMatrix) -> Result<()> {
    check_square(a, "system matrix A")?;
    let n = a.nrows();
    if b.nrows() != n || q.dim() != n || r.dim() != b.ncols() {
        return Err(Error::Dimension(format!(
            "A {n}x{n}, B {}x{}, Q {}x{}, R {}x{} are inconsistent",
            b.nrows(),
            b.ncols(),
            q.dim(),
            q.dim(),
            r.dim(),
            r.dim()
        )));
    }
    if !r.is_positive_definite() {
        return Err(Error::InvalidParams("R must be positive definite".into()));
    }
    Ok(())
}

/// One Kleinman step: `P_j` for the current gain and the improved gain `K_{j+1}`.
#[derive(Clone, Debug)]
pub struct KleinmanStep {
    pub k: Matrix,
    pub p: SymMatrix,
    pub k_next: Matrix,
    /// `||P_j - P_{j-1}||_F`; infinite for the first step.
    pub change: f64,
}

/// Model-based policy iteration from a stabilizing `k0`.
///
/// Returns every iterate. Stops once the Frobenius change in `P` falls
/// below `tol.convergence`, or fails after `tol.max_iterations`.
pub fn kleinman_iterate(
    a: &Matrix,
    b: &Matrix,
    q: &SymMatrix,
    r: &SymMatrix,
    k0: &Matrix,
    tol: &Tolerances,
) -> Result<Vec<KleinmanStep>> {
    check_system(a, b, q, r)?;
    if k0.nrows() != b.ncols() || k0.ncols() != a.nrows() {
        return Err(Error::Dimension(format!(
            "K0 must be {}x{}, got {}x{}",
            b.ncols(),
            a.nrows(),
            k0.nrows(),
            k0.ncols()
        )));
    }
    let a_cl = a - b * k0;
    let max_re = max_real_eigenvalue(&a_cl);
    if max_re >= -HURWITZ_MARGIN {
        return Err(Error::NotStabilizing(max_re));
    }

    let mut steps: Vec<KleinmanStep> = Vec::new();
    let mut k = k0.clone();
    for _ in 0..tol.max_iterations {
        let a_cl = a - b * &k;
        let q_eff = SymMatrix::symmetrize(&(q.as_matrix() + k.transpose() * r.as_matrix() * &k));
        let p = solve_lyapunov(&a_cl, &q_eff)?;
        let k_next = gain_from_p(b, r, &p)?;
        let change = steps
            .last()
            .map(|prev| (p.as_matrix() - prev.p.as_matrix()).norm())
            .unwrap_or(f64::INFINITY);
        steps.push(KleinmanStep {
            k: k.clone(),
            p,
            k_next: k_next.clone(),
            change,
        });
        if change < tol.convergence {
            return Ok(steps);
        }
        k = k_next;
    }
    Err(Error::NoConvergence {
        iterations: tol.max_iterations,
        last_change: steps.last().map(|s| s.change).unwrap_or(f64::INFINITY),
    })
}

/// Stabilizing state feedback by pole shifting.
///
/// With `β` above every open-loop `|Re λ|`, solve
/// `(A + βI) W + W (A + βI)ᵀ = 2 B Bᵀ`; then `K = Bᵀ W⁻¹` places every
/// closed-loop eigenvalue left of `-β`. Requires `(A, B)` controllable.
pub fn stabilizing_gain(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_square(a, "stabilizing_gain")?;
    let n = a.nrows();
    let max_re = max_real_eigenvalue(a);
    if max_re < -HURWITZ_MARGIN {
        return Ok(Matrix::zeros(b.ncols(), n));
    }
    // every eigenvalue of A + βI must lie in the open right half-plane
    let beta = max_abs_real_eigenvalue(a) + 1.0;
    let shifted = -(a + Matrix::identity(n, n) * beta).transpose();
    let bbt = SymMatrix::symmetrize(&(b * b.transpose() * 2.0));
    let w = solve_lyapunov(&shifted, &bbt)?;
    if !w.is_positive_definite() {
        return Err(Error::NoStabilizingSolution(
            "(A, B) is not controllable; pole shifting failed".into(),
        ));
    }
    let w_inv = w
        .inverse()
        .ok_or_else(|| Error::NoStabilizingSolution("controllability Gramian is singular".into()))?;
    let k = b.transpose() * w_inv;
    if !is_hurwitz(&(a - b * &k)) {
        return Err(Error::NoStabilizingSolution(
            "pole-shifting gain does not stabilize".into(),
        ));
    }
    Ok(k)
}

/// Stabilizing solution of the continuous-time ARE and its gain `K = R⁻¹BᵀP`.
///
/// Kleinman iteration seeded by [`stabilizing_gain`], run to a relative
/// change of `1e-13`, then checked against the Riccati residual.
pub fn solve_are(a: &Matrix, b: &Matrix, q: &SymMatrix, r: &SymMatrix) -> Result<(SymMatrix, Matrix)> {
    check_system(a, b, q, r)?;
    let k0 = stabilizing_gain(a, b)?;
    let max_iterations = 100;

    let mut k = k0;
    let mut prev: Option<SymMatrix> = None;
    for _ in 0..max_iterations {
        let a_cl = a - b * &k;
        let q_eff = SymMatrix::symmetrize(&(q.as_matrix() + k.transpose() * r.as_matrix() * &k));
        let p = solve_lyapunov(&a_cl, &q_eff).map_err(|e| Error::NoStabilizingSolution(e.to_string()))?;
        k = gain_from_p(b, r, &p)?;
        if let Some(prev) = &prev {
            let scale = p.as_matrix().norm().max(f64::MIN_POSITIVE);
            if (p.as_matrix() - prev.as_matrix()).norm() <= 1e-13 * scale {
                return finish_are(a, b, q, r, p);
            }
        }
        prev = Some(p);
    }
    // Quadratic convergence stalls at rounding level; accept the last iterate
    // if it satisfies the Riccati equation.
    match prev {
        Some(p) => finish_are(a, b, q, r, p),
        None => Err(Error::NoStabilizingSolution("no iterations performed".into())),
    }
}

fn finish_are(a: &Matrix, b: &Matrix, q: &SymMatrix, r: &SymMatrix, p: SymMatrix) -> Result<(SymMatrix, Matrix)> {
    let k = gain_from_p(b, r, &p)?;
    let residual = are_residual(a, b, q, r, &p)?.norm();
    let scale = 1.0 + q.as_matrix().norm() + p.as_matrix().norm();
    if residual > 1e-10 * scale {
        return Err(Error::NoStabilizingSolution(format!(
            "Riccati residual {residual:e} too large"
        )));
    }
    if !is_hurwitz(&(a - b * &k)) {
        return Err(Error::NoStabilizingSolution("closed loop is not Hurwitz".into()));
    }
    Ok((p, k))
}
