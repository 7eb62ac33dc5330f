//! Algebraic R-FEM systems `𝔄u = 𝔟` with `𝔄 = EᵀK E + S`, sparse direct
//! solves, extremal-eigenvalue condition estimates and the identities that
//! tie R-FEM to conforming FEM and interior-penalty dG.

use std::fmt;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fespace::{FeFunction, FeSpace};
use crate::forms::{
    assemble_ip_dg, assemble_load, assemble_mass, assemble_stabilisation, assemble_stiffness, assemble_upwind,
    rfem_rhs, ProblemSpec, StabKind, StabSpec,
};
use crate::mesh::Mesh;
use crate::recovery::{build_recovery, RecoveryOp};
use crate::sparse::{dot, norm2, SparseMatrix};

/// Relative residual every solve must reach.
pub const SOLVE_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub symmetric: bool,
}

impl LinearSystem {
    pub fn new(matrix: SparseMatrix, rhs: Vec<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() != rhs.len() {
            return Err(Error::DimensionMismatch(format!(
                "matrix {:?} with right-hand side of length {}",
                matrix.shape(),
                rhs.len()
            )));
        }
        let symmetric = matrix.is_symmetric(1e-12);
        Ok(Self { matrix, rhs, symmetric })
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn residual(&self, u: &[f64]) -> f64 {
        let au = self.matrix.mul_vec(u);
        let r: Vec<f64> = au.iter().zip(&self.rhs).map(|(a, b)| a - b).collect();
        let scale = norm2(&self.rhs);
        if scale == 0.0 {
            norm2(&r)
        } else {
            norm2(&r) / scale
        }
    }
}

/// `𝔄 = EᵀK E + S`, plus convection (upwinded) and reaction acting directly on
/// the discontinuous space when the problem carries them; `𝔟 = Eᵀ b`.
pub fn build_rfem_system(op: &RecoveryOp, problem: &ProblemSpec, stab: &StabSpec) -> Result<LinearSystem> {
    let k = assemble_stiffness(&op.target, problem);
    let mut a = k.congruence(&op.matrix)?.add(&assemble_stabilisation(op, problem, stab)?)?;
    if let Some(w) = &problem.convection {
        a = a.add(&assemble_upwind(&op.source, |x| w(x))?)?;
    }
    if let Some(c) = &problem.reaction {
        a = a.add(&assemble_mass(&op.source, |x| c(x)))?;
    }
    let b = rfem_rhs(op, &assemble_load(&op.target, |x| (problem.source)(x)))?;
    LinearSystem::new(a, b)
}

/// Interior-penalty dG system (upwinded when the problem has convection).
pub fn build_ip_dg_system(dg: &FeSpace, problem: &ProblemSpec, stab: &StabSpec) -> Result<LinearSystem> {
    let mut a = assemble_ip_dg(dg, problem, stab)?;
    if let Some(w) = &problem.convection {
        a = a.add(&assemble_upwind(dg, |x| w(x))?)?;
    }
    if let Some(c) = &problem.reaction {
        a = a.add(&assemble_mass(dg, |x| c(x)))?;
    }
    LinearSystem::new(a, assemble_load(dg, |x| (problem.source)(x)))
}

/// Conforming FEM on the interior dofs of `cg`.
pub fn solve_fem(cg: &Arc<FeSpace>, problem: &ProblemSpec) -> Result<FeFunction> {
    let interior = cg.interior_dofs();
    let k = assemble_stiffness(cg, problem).submatrix(&interior, &interior);
    let b = assemble_load(cg, |x| (problem.source)(x));
    let rhs: Vec<f64> = interior.iter().map(|&i| b[i]).collect();
    let u = solve(&LinearSystem::new(k, rhs)?)?;
    let mut coeffs = vec![0.0; cg.ndof];
    for (&i, v) in interior.iter().zip(u) {
        coeffs[i] = v;
    }
    FeFunction::new(Arc::clone(cg), coeffs)
}

enum Factor {
    Cholesky(Llt<usize, f64>),
    Lu(Lu<usize, f64>),
}

impl Factor {
    fn new(m: &SparseMatrix, symmetric: bool) -> Result<Self> {
        let a = m.to_faer();
        if symmetric {
            if let Ok(llt) = a.sp_cholesky(Side::Lower) {
                return Ok(Factor::Cholesky(llt));
            }
        }
        // faer panics (rather than erroring) on an exactly zero numerical pivot.
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| a.sp_lu())) {
            Ok(Ok(lu)) => Ok(Factor::Lu(lu)),
            Ok(Err(e)) => Err(Error::Solve { reason: format!("LU factorisation failed: {e:?}"), residual: f64::NAN }),
            Err(_) => Err(Error::Solve { reason: "LU factorisation hit a zero pivot".into(), residual: f64::NAN }),
        }
    }

    fn is_cholesky(&self) -> bool {
        matches!(self, Factor::Cholesky(_))
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = match self {
            Factor::Cholesky(f) => f.solve(&rhs),
            Factor::Lu(f) => f.solve(&rhs),
        };
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }
}

/// Direct sparse solve (Cholesky for symmetric matrices when it succeeds,
/// LU otherwise) with one step of iterative refinement if needed.
pub fn solve(sys: &LinearSystem) -> Result<Vec<f64>> {
    if sys.is_empty() {
        return Ok(Vec::new());
    }
    if norm2(&sys.rhs) == 0.0 {
        return Ok(vec![0.0; sys.len()]);
    }
    let factor = Factor::new(&sys.matrix, sys.symmetric)?;
    let mut u = factor.solve(&sys.rhs);
    let mut res = sys.residual(&u);
    if !(res < SOLVE_TOL) && res.is_finite() {
        let au = sys.matrix.mul_vec(&u);
        let r: Vec<f64> = sys.rhs.iter().zip(&au).map(|(b, a)| b - a).collect();
        let du = factor.solve(&r);
        u.iter_mut().zip(&du).for_each(|(x, d)| *x += d);
        res = sys.residual(&u);
    }
    if !(res < SOLVE_TOL) || u.iter().any(|x| !x.is_finite()) {
        return Err(Error::Solve { reason: "matrix singular or too ill-conditioned".into(), residual: res });
    }
    Ok(u)
}

/// Extremal eigenvalues and `κ = λ_max/λ_min` of a symmetric positive definite matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionEstimate {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
}

/// Largest eigenvalue of the symmetric operator `apply` by Lanczos with full
/// reorthogonalisation, stopped once the top Ritz pair's residual drops below `tol` (relative).
fn lanczos_max(n: usize, apply: impl Fn(&[f64]) -> Vec<f64>, tol: f64, seed: u64) -> Result<f64> {
    const MAX_ITER: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nq = norm2(&q);
    q.iter_mut().for_each(|x| *x /= nq);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let (mut alphas, mut betas) = (Vec::new(), Vec::new());
    for k in 0..MAX_ITER.min(n) {
        let mut w = apply(&basis[k]);
        let a = dot(&w, &basis[k]);
        alphas.push(a);
        // Two passes of classical Gram–Schmidt against the whole basis.
        for _ in 0..2 {
            for v in &basis {
                let c = dot(&w, v);
                w.iter_mut().zip(v).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = norm2(&w);
        let m = alphas.len();
        let tri = Mat::from_fn(m, m, |i, j| {
            if i == j {
                alphas[i]
            } else if i + 1 == j || j + 1 == i {
                betas[i.min(j)]
            } else {
                0.0
            }
        });
        let evd = tri.self_adjoint_eigen(Side::Lower).map_err(|_| Error::NoConvergence { iterations: k })?;
        // Eigenvalues come sorted ascending; the last one is the top Ritz value.
        let theta = evd.S().column_vector()[m - 1];
        let bound = b * evd.U()[(m - 1, m - 1)].abs();
        let scale = theta.abs().max(f64::MIN_POSITIVE);
        if bound <= tol * scale || m == n {
            return Ok(theta);
        }
        betas.push(b);
        basis.push(w.into_iter().map(|x| x / b).collect());
    }
    Err(Error::NoConvergence { iterations: MAX_ITER })
}

/// `κ₂(𝔄)` from `λ_max` (Lanczos on `𝔄`) and `λ_min` (Lanczos on `𝔄⁻¹` via a Cholesky factor).
pub fn condition_estimate(a: &SparseMatrix) -> Result<ConditionEstimate> {
    let n = a.nrows();
    if n == 0 || n != a.ncols() {
        return Err(invalid("condition estimate needs a nonempty square matrix"));
    }
    if !a.is_symmetric(1e-12) {
        return Err(invalid("condition estimate needs a symmetric matrix"));
    }
    let factor = Factor::new(a, true)?;
    if !factor.is_cholesky() {
        return Err(invalid("matrix is not positive definite"));
    }
    let tol = 1e-6;
    let lambda_max = lanczos_max(n, |x| a.mul_vec(x), tol, 7)?;
    let inv_max = lanczos_max(n, |x| factor.solve(x), tol, 11)?;
    let lambda_min = 1.0 / inv_max;
    Ok(ConditionEstimate { lambda_min, lambda_max, kappa: lambda_max / lambda_min })
}

/// `max |ℰ(u_h) − u_h^{FEM}|` over interior conforming dofs for `r = s = degree`
/// with facet-jump stabilisation `σ = c_σ 𝒜 𝐡`.
pub fn fem_equivalence_gap(mesh: &Arc<Mesh>, degree: usize, problem: &ProblemSpec, c_sigma: f64) -> Result<f64> {
    let dg = Arc::new(FeSpace::dg(mesh, degree)?);
    let cg = Arc::new(FeSpace::cg(mesh, degree)?);
    let op = build_recovery(&dg, &cg)?;
    let stab = StabSpec::facet_jump(c_sigma, 1.0)?;
    let u = solve(&build_rfem_system(&op, problem, &stab)?)?;
    let recovered = op.apply_coeffs(&u);
    let fem = solve_fem(&cg, problem)?;
    Ok(cg.interior_dofs().iter().map(|&i| (recovered[i] - fem.coeffs[i]).abs()).fold(0.0, f64::max))
}

/// Entrywise gaps `(‖𝔄 − K_IP‖_max, ‖𝔟 − b_DG‖_∞)` between R-FEM with identity
/// recovery plus interior-penalty stabilisation and the directly assembled dG system.
pub fn dg_equivalence_gap(dg: &Arc<FeSpace>, problem: &ProblemSpec, stab: &StabSpec) -> Result<(f64, f64)> {
    if stab.kind != StabKind::DgInteriorPenalty {
        return Err(invalid("dG equivalence needs interior-penalty stabilisation"));
    }
    let op = RecoveryOp::identity(dg);
    let rfem = build_rfem_system(&op, problem, stab)?;
    let k_ip = assemble_ip_dg(dg, problem, stab)?;
    let b_dg = assemble_load(dg, |x| (problem.source)(x));
    let rhs_gap = rfem.rhs.iter().zip(&b_dg).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((rfem.matrix.max_abs_diff(&k_ip)?, rhs_gap))
}

/// Size, fill and bandwidth of a matrix, for comparing sparsity patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparsityInfo {
    pub nrows: usize,
    pub ncols: usize,
    pub nnz: usize,
    pub bandwidth: usize,
}

impl SparsityInfo {
    pub fn of(m: &SparseMatrix) -> Self {
        Self { nrows: m.nrows(), ncols: m.ncols(), nnz: m.nnz(), bandwidth: m.bandwidth() }
    }
}

impl fmt::Display for SparsityInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} nnz={} bandwidth={}", self.nrows, self.ncols, self.nnz, self.bandwidth)
    }
}

/// Writes `row col value` lines.
pub fn write_triplets<W: std::io::Write>(m: &SparseMatrix, mut w: W) -> Result<()> {
    for (i, j, v) in m.triplets() {
        writeln!(w, "{i} {j} {v:.17e}")?;
    }
    Ok(())
}
