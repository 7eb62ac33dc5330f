//! Nodal-averaging recovery from a discontinuous `P_r` space into the
//! continuous `P_s` space with homogeneous boundary values.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::fespace::{FeFunction, FeSpace, RefBasis, SpaceKind};
use crate::quadrature::{edge_rule_clamped, tri_rule_clamped};
use crate::sparse::{SparseMatrix, TripletBuilder};

/// Largest column count for which [`recovery_rank`] runs a dense SVD.
pub const MAX_RANK_COLUMNS: usize = 5000;

/// Local transition matrix: entry `(i, j)` is DG basis `i` (degree `r`)
/// evaluated at the `j`-th Lagrange node of degree `s`.
pub fn transition_matrix(r: usize, s: usize) -> Result<Vec<Vec<f64>>> {
    if r > s || s == 0 || s > crate::fespace::MAX_DEGREE {
        return Err(invalid(format!("transition matrix needs 0 ≤ r ≤ s ≤ 3 with s ≥ 1, got r={r}, s={s}")));
    }
    let from = RefBasis::new(r)?;
    let to = RefBasis::new(s)?;
    let cols: Vec<Vec<f64>> = to.nodes.iter().map(|&p| from.values(p)).collect();
    Ok((0..from.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

/// The recovery operator `E: V_h^r → V_h^s ∩ H¹₀` as an `ndof_target × ndof_source` matrix.
#[derive(Debug, Clone)]
pub struct RecoveryOp {
    pub matrix: SparseMatrix,
    pub source: Arc<FeSpace>,
    pub target: Arc<FeSpace>,
}

impl RecoveryOp {
    /// The identity "recovery" on a DG space (no recovery at all).
    pub fn identity(dg: &Arc<FeSpace>) -> Self {
        Self { matrix: SparseMatrix::identity(dg.ndof), source: Arc::clone(dg), target: Arc::clone(dg) }
    }

    pub fn is_identity(&self) -> bool {
        Arc::ptr_eq(&self.source, &self.target)
    }

    pub fn apply(&self, v: &FeFunction) -> Result<FeFunction> {
        if !Arc::ptr_eq(&v.space, &self.source) && v.space.ndof != self.source.ndof {
            return Err(Error::DimensionMismatch("function is not in the recovery source space".into()));
        }
        FeFunction::new(Arc::clone(&self.target), self.matrix.mul_vec(&v.coeffs))
    }

    pub fn apply_coeffs(&self, v: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(v)
    }
}

/// Nodal averaging: interior node `ν` receives `|ω_ν|⁻¹ ∑_{T ∋ ν} v|_T(ν)`, boundary nodes 0.
pub fn build_recovery(dg: &Arc<FeSpace>, cg: &Arc<FeSpace>) -> Result<RecoveryOp> {
    if !dg.same_mesh(cg) {
        return Err(Error::MeshMismatch);
    }
    if dg.kind != SpaceKind::Dg || cg.kind != SpaceKind::Cg {
        return Err(invalid("recovery maps a DG space into a CG space"));
    }
    let trans = transition_matrix(dg.degree, cg.degree)?;
    let mut patch = vec![0usize; cg.ndof];
    for t in 0..cg.num_elements() {
        for &d in cg.element_dofs(t) {
            patch[d] += 1;
        }
    }
    let mut b = TripletBuilder::with_capacity(cg.ndof, dg.ndof, dg.ndof * cg.local_dim());
    for t in 0..cg.num_elements() {
        let src = dg.element_dofs(t);
        for (j, &node) in cg.element_dofs(t).iter().enumerate() {
            if cg.boundary_dofs[node] {
                continue;
            }
            let w = 1.0 / patch[node] as f64;
            for (i, &dof) in src.iter().enumerate() {
                b.push(node, dof, w * trans[i][j]);
            }
        }
    }
    Ok(RecoveryOp { matrix: b.build(), source: Arc::clone(dg), target: Arc::clone(cg) })
}

/// Restriction of a conforming function to the DG space of the same degree.
pub fn embed_conforming(cg_fn: &FeFunction, dg: &Arc<FeSpace>) -> Result<FeFunction> {
    if !dg.same_mesh(&cg_fn.space) {
        return Err(Error::MeshMismatch);
    }
    let mut coeffs = vec![0.0; dg.ndof];
    for t in 0..dg.num_elements() {
        for (i, &d) in dg.element_dofs(t).iter().enumerate() {
            coeffs[d] = cg_fn.eval(t, dg.basis.nodes[i]);
        }
    }
    FeFunction::new(Arc::clone(dg), coeffs)
}

/// Numerical rank of `E`: singular values above `1e-10 ×` the largest.
pub fn recovery_rank(op: &RecoveryOp) -> Result<usize> {
    numerical_rank(&op.matrix, 1e-10)
}

pub fn numerical_rank(m: &SparseMatrix, rel_tol: f64) -> Result<usize> {
    if m.ncols() > MAX_RANK_COLUMNS {
        return Err(invalid(format!("dense SVD refused above {MAX_RANK_COLUMNS} columns ({})", m.ncols())));
    }
    let sv = m
        .to_dense()
        .singular_values()
        .map_err(|_| Error::NoConvergence { iterations: 0 })?;
    let largest = sv.iter().copied().fold(0.0, f64::max);
    Ok(sv.iter().filter(|&&s| s > rel_tol * largest).count())
}

/// `∑_T |v − Ev|²_{α,T} / ‖h^{1/2−α}⟦v⟧‖²_Γ` for `α ∈ {0, 1}`; `0/0` is reported as 0.
pub fn kp_ratio(op: &RecoveryOp, v: &FeFunction, alpha: u32) -> Result<f64> {
    if alpha > 1 {
        return Err(invalid("kp_ratio supports α = 0 or 1"));
    }
    let recovered = op.apply(v)?;
    let dg = &op.source;
    let mesh = &dg.mesh;
    let rule = tri_rule_clamped(2 * op.target.degree.max(dg.degree) + 2);
    let mut num = 0.0;
    for t in 0..dg.num_elements() {
        let m = dg.map(t);
        for (p, w) in rule.iter() {
            let wt = w * m.jac_det();
            num += wt
                * if alpha == 0 {
                    (v.eval(t, p) - recovered.eval(t, p)).powi(2)
                } else {
                    let (a, b) = (v.eval_grad(t, p), recovered.eval_grad(t, p));
                    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
                };
        }
    }
    let erule = edge_rule_clamped(2 * dg.degree + 1);
    let mut den = 0.0;
    for (fi, facet) in mesh.facets.iter().enumerate() {
        let jump2: f64 = erule.iter().map(|(q, w)| w * v.jump(fi, q[0]).powi(2)).sum();
        den += mesh.facet_h[fi].powf(1.0 - 2.0 * alpha as f64) * jump2 * facet.length;
    }
    if den == 0.0 {
        return Ok(if num.abs() < 1e-28 { 0.0 } else { f64::INFINITY });
    }
    Ok(num / den)
}
