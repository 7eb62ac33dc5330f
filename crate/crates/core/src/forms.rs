//! Bilinear and linear forms: conforming stiffness, the stabilisations,
//! interior-penalty dG, upwind convection, reaction mass and loads.
//!
//! Facet integrals are assembled once per facet. The facet normal `n`
//! points out of the facet's first element, and scalar jumps are
//! `v⁺ − v⁻` with `+` that first element, so the vector jump is `(v⁺ − v⁻) n`.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::fespace::{facet_ref_point, FeFunction, FeSpace, SpaceKind};
use crate::mesh::{Mesh, Point};
use crate::quadrature::{edge_rule_clamped, tri_rule_clamped};
use crate::recovery::{transition_matrix, RecoveryOp};
use crate::sparse::{SparseMatrix, TripletBuilder};

pub type ScalarField = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
pub type TensorField = Arc<dyn Fn(Point) -> [[f64; 2]; 2] + Send + Sync>;

/// Coefficients and data of `−∇·A∇u + w·∇u + cu = f` with `u = 0` on `∂Ω`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub diffusion: TensorField,
    /// `A` is constant in space, so its projection is exact.
    pub constant_diffusion: bool,
    /// Overrides the element-wise magnitude `𝒜` (e.g. `𝒜 = ε`).
    pub diffusion_scale: Option<f64>,
    pub convection: Option<VectorField>,
    pub reaction: Option<ScalarField>,
    pub source: ScalarField,
    pub exact: Option<ScalarField>,
    pub exact_grad: Option<VectorField>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("constant_diffusion", &self.constant_diffusion)
            .field("diffusion_scale", &self.diffusion_scale)
            .field("convection", &self.convection.is_some())
            .field("reaction", &self.reaction.is_some())
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl ProblemSpec {
    /// `−Δu = f`.
    pub fn poisson(f: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            diffusion: Arc::new(|_| [[1.0, 0.0], [0.0, 1.0]]),
            constant_diffusion: true,
            diffusion_scale: None,
            convection: None,
            reaction: None,
            source: Arc::new(f),
            exact: None,
            exact_grad: None,
        }
    }

    /// `−εΔu + w·∇u + cu = f`, with `𝒜 = ε`.
    pub fn convection_diffusion(
        eps: f64,
        w: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static,
        c: Option<ScalarField>,
        f: impl Fn(Point) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(invalid(format!("diffusion parameter must be positive, got {eps}")));
        }
        Ok(Self {
            diffusion: Arc::new(move |_| [[eps, 0.0], [0.0, eps]]),
            constant_diffusion: true,
            diffusion_scale: Some(eps),
            convection: Some(Arc::new(w)),
            reaction: c,
            source: Arc::new(f),
            exact: None,
            exact_grad: None,
        })
    }

    pub fn with_diffusion(mut self, a: impl Fn(Point) -> [[f64; 2]; 2] + Send + Sync + 'static, constant: bool) -> Self {
        self.diffusion = Arc::new(a);
        self.constant_diffusion = constant;
        self
    }

    pub fn with_exact(
        mut self,
        u: impl Fn(Point) -> f64 + Send + Sync + 'static,
        grad: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static,
    ) -> Self {
        self.exact = Some(Arc::new(u));
        self.exact_grad = Some(Arc::new(grad));
        self
    }

    /// Checks that `A` is symmetric positive definite at every element centroid and vertex.
    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        let samples = (0..mesh.num_elements()).map(|t| mesh.centroid(t)).chain(mesh.vertices.iter().copied());
        for x in samples {
            let a = (self.diffusion)(x);
            if (a[0][1] - a[1][0]).abs() > 1e-12 * (a[0][0].abs() + a[1][1].abs()) {
                return Err(invalid(format!("diffusion tensor not symmetric at {x:?}")));
            }
            if eigen_sym(a).0 <= 0.0 {
                return Err(invalid(format!("diffusion tensor not positive definite at {x:?}")));
            }
        }
        Ok(())
    }

    /// `𝒜_T`: spectral norm of `A` at the centroid of `t`.
    pub fn magnitude(&self, mesh: &Mesh, t: usize) -> f64 {
        match self.diffusion_scale {
            Some(s) => s,
            None => {
                let (lo, hi) = eigen_sym((self.diffusion)(mesh.centroid(t)));
                lo.abs().max(hi.abs())
            }
        }
    }

    /// `𝒜_e`: the larger of the adjacent elements' magnitudes.
    pub fn facet_magnitude(&self, mesh: &Mesh, fi: usize) -> f64 {
        let facet = &mesh.facets[fi];
        let a = self.magnitude(mesh, facet.first());
        facet.second().map_or(a, |t| a.max(self.magnitude(mesh, t)))
    }
}

/// Eigenvalues `(λ_min, λ_max)` of a symmetric 2×2 matrix.
pub(crate) fn eigen_sym(a: [[f64; 2]; 2]) -> (f64, f64) {
    let mean = 0.5 * (a[0][0] + a[1][1]);
    let rad = (0.25 * (a[0][0] - a[1][1]).powi(2) + a[0][1] * a[1][0]).max(0.0).sqrt();
    (mean - rad, mean + rad)
}

fn mat_vec(a: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabKind {
    /// `∫_Γ σ ⟦w⟧·⟦v⟧`.
    FacetJump,
    /// `∫_Ω σ̃ (w − ℰw)(v − ℰv)`.
    VolumeResidual,
    /// Symmetric/nonsymmetric interior-penalty facet terms (with `ℰ = id`).
    DgInteriorPenalty,
}

/// Penalty law `σ = c_σ 𝒜 𝐡^power` on facets; the volume variant uses
/// `σ̃ = c_σ 𝒜 h_T^{power−1}` so that both scale alike.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabSpec {
    pub kind: StabKind,
    pub power: f64,
    pub c_sigma: f64,
    /// Symmetrisation parameter for the interior-penalty terms.
    pub theta: f64,
}

impl StabSpec {
    pub fn new(kind: StabKind, c_sigma: f64, power: f64, theta: f64) -> Result<Self> {
        if !(c_sigma > 0.0) || !c_sigma.is_finite() {
            return Err(invalid(format!("c_sigma must be positive, got {c_sigma}")));
        }
        if !(-1.0..=1.0).contains(&theta) {
            return Err(invalid(format!("theta must lie in [-1, 1], got {theta}")));
        }
        Ok(Self { kind, power, c_sigma, theta })
    }

    pub fn facet_jump(c_sigma: f64, power: f64) -> Result<Self> {
        Self::new(StabKind::FacetJump, c_sigma, power, 0.0)
    }

    pub fn volume(c_sigma: f64, power: f64) -> Result<Self> {
        Self::new(StabKind::VolumeResidual, c_sigma, power, 0.0)
    }

    /// `σ = c_σ 𝒜 𝐡⁻¹` with the given `θ`.
    pub fn interior_penalty(c_sigma: f64, theta: f64) -> Result<Self> {
        Self::new(StabKind::DgInteriorPenalty, c_sigma, -1.0, theta)
    }

    /// The law whose jump seminorm is `‖𝐡^{α−1/2}⟦v⟧‖²_Γ`, i.e. `σ ∝ 𝐡^{2α−1}`.
    pub fn from_alpha(kind: StabKind, alpha: f64, c_sigma: f64) -> Result<Self> {
        Self::new(kind, c_sigma, 2.0 * alpha - 1.0, 1.0)
    }

    pub fn alpha(&self) -> f64 {
        0.5 * (self.power + 1.0)
    }

    pub fn facet_sigma(&self, mesh: &Mesh, problem: &ProblemSpec, fi: usize) -> f64 {
        self.c_sigma * problem.facet_magnitude(mesh, fi) * mesh.facet_h[fi].powf(self.power)
    }

    pub fn volume_sigma(&self, mesh: &Mesh, problem: &ProblemSpec, t: usize) -> f64 {
        self.c_sigma * problem.magnitude(mesh, t) * mesh.elem_diameter[t].powf(self.power - 1.0)
    }
}

/// Quadrature data on one facet: the combined local dofs of both sides and,
/// per point, each dof's contribution to the scalar jump and to `{A∇v}·n`.
struct FacetTrace {
    dofs: Vec<usize>,
    weights: Vec<f64>,
    points: Vec<Point>,
    jump: Vec<Vec<f64>>,
    avg_flux: Vec<Vec<f64>>,
    values: [Vec<Vec<f64>>; 2],
    n_first: usize,
}

fn facet_trace(space: &FeSpace, problem: Option<&ProblemSpec>, fi: usize, degree: usize) -> FacetTrace {
    let mesh = &space.mesh;
    let facet = &mesh.facets[fi];
    let rule = edge_rule_clamped(degree);
    let sides: Vec<usize> = facet.elements.iter().flatten().copied().collect();
    let n_first = space.local_dim();
    let avg = if sides.len() == 2 { 0.5 } else { 1.0 };
    let mut dofs = space.element_dofs(sides[0]).to_vec();
    if let Some(&t1) = sides.get(1) {
        dofs.extend_from_slice(space.element_dofs(t1));
    }
    let mut tr = FacetTrace {
        dofs,
        weights: Vec::with_capacity(rule.len()),
        points: Vec::with_capacity(rule.len()),
        jump: Vec::new(),
        avg_flux: Vec::new(),
        values: [Vec::new(), Vec::new()],
        n_first,
    };
    for (q, w) in rule.iter() {
        let x = facet.point(mesh, q[0]);
        let a = problem.map(|p| (p.diffusion)(x));
        let mut jump = Vec::with_capacity(tr.dofs.len());
        let mut flux = Vec::with_capacity(tr.dofs.len());
        for (side, &t) in sides.iter().enumerate() {
            let (vals, grads) = space.eval_basis(t, facet_ref_point(mesh, fi, side, q[0]));
            let sign = if side == 0 { 1.0 } else { -1.0 };
            jump.extend(vals.iter().map(|v| sign * v));
            if let Some(a) = a {
                flux.extend(grads.iter().map(|&g| avg * dot(mat_vec(a, g), facet.normal)));
            }
            tr.values[side].push(vals);
        }
        tr.weights.push(w * facet.length);
        tr.points.push(x);
        tr.jump.push(jump);
        tr.avg_flux.push(flux);
    }
    tr
}

fn check_dg(space: &FeSpace) -> Result<()> {
    if space.kind != SpaceKind::Dg {
        return Err(invalid("operation requires a discontinuous space"));
    }
    Ok(())
}

/// `a(w, v) = ∑_T ∫_T A∇w·∇v`, element by element (broken on DG spaces).
pub fn assemble_stiffness(space: &FeSpace, problem: &ProblemSpec) -> SparseMatrix {
    let extra = if problem.constant_diffusion { 0 } else { 4 };
    let rule = tri_rule_clamped(2 * space.degree.saturating_sub(1) + extra);
    let nl = space.local_dim();
    let mut b = TripletBuilder::with_capacity(space.ndof, space.ndof, space.num_elements() * nl * nl);
    let mut local = vec![0.0; nl * nl];
    for t in 0..space.num_elements() {
        local.fill(0.0);
        let m = space.map(t);
        for (p, w) in rule.iter() {
            let a = (problem.diffusion)(m.map(p));
            let (_, grads) = space.eval_basis(t, p);
            let wt = w * m.jac_det();
            for (i, &gi) in grads.iter().enumerate() {
                let agi = mat_vec(a, gi);
                for (j, &gj) in grads.iter().enumerate() {
                    local[i * nl + j] += wt * dot(agi, gj);
                }
            }
        }
        let dofs = space.element_dofs(t);
        b.push_block(dofs, dofs, &local);
    }
    b.build()
}

/// `∫_Γ σ ⟦w⟧·⟦v⟧` over all facets, boundary facets included (`⟦v⟧ = v⁺n` there).
pub fn assemble_jump_penalty(space: &FeSpace, problem: &ProblemSpec, stab: &StabSpec) -> SparseMatrix {
    let mesh = &space.mesh;
    let mut b = TripletBuilder::new(space.ndof, space.ndof);
    for fi in 0..mesh.num_facets() {
        let sigma = stab.facet_sigma(mesh, problem, fi);
        let tr = facet_trace(space, None, fi, 2 * space.degree + 1);
        let nd = tr.dofs.len();
        let mut local = vec![0.0; nd * nd];
        for (q, &w) in tr.weights.iter().enumerate() {
            let jq = &tr.jump[q];
            for i in 0..nd {
                for j in 0..nd {
                    local[i * nd + j] += sigma * w * jq[i] * jq[j];
                }
            }
        }
        b.push_block(&tr.dofs, &tr.dofs, &local);
    }
    b.build()
}

/// Interior-penalty facet terms
/// `∫_Γ σ⟦w⟧·⟦v⟧ − {A∇w}·⟦v⟧ − θ{A∇v}·⟦w⟧` (rows are test functions).
pub fn assemble_dg_stab(space: &FeSpace, problem: &ProblemSpec, stab: &StabSpec) -> SparseMatrix {
    let mesh = &space.mesh;
    let extra = if problem.constant_diffusion { 0 } else { 2 };
    let mut b = TripletBuilder::new(space.ndof, space.ndof);
    for fi in 0..mesh.num_facets() {
        let sigma = stab.facet_sigma(mesh, problem, fi);
        let tr = facet_trace(space, Some(problem), fi, 2 * space.degree + 1 + extra);
        let nd = tr.dofs.len();
        let mut local = vec![0.0; nd * nd];
        for (q, &w) in tr.weights.iter().enumerate() {
            let (jq, fq) = (&tr.jump[q], &tr.avg_flux[q]);
            for i in 0..nd {
                for j in 0..nd {
                    local[i * nd + j] += w * (sigma * jq[i] * jq[j] - fq[j] * jq[i] - stab.theta * fq[i] * jq[j]);
                }
            }
        }
        b.push_block(&tr.dofs, &tr.dofs, &local);
    }
    b.build()
}

/// Element-weighted mass matrix `∫ ρ_T(x) w v`.
fn weighted_mass(space: &FeSpace, degree: usize, weight: impl Fn(usize, Point) -> f64) -> SparseMatrix {
    let rule = tri_rule_clamped(degree);
    let nl = space.local_dim();
    let mut b = TripletBuilder::with_capacity(space.ndof, space.ndof, space.num_elements() * nl * nl);
    let mut local = vec![0.0; nl * nl];
    for t in 0..space.num_elements() {
        local.fill(0.0);
        let m = space.map(t);
        for (p, w) in rule.iter() {
            let wt = w * m.jac_det() * weight(t, m.map(p));
            let vals = space.basis.values(p);
            for i in 0..nl {
                for j in 0..nl {
                    local[i * nl + j] += wt * vals[i] * vals[j];
                }
            }
        }
        let dofs = space.element_dofs(t);
        b.push_block(dofs, dofs, &local);
    }
    b.build()
}

/// `∫_Ω c w v`.
pub fn assemble_mass(space: &FeSpace, c: impl Fn(Point) -> f64) -> SparseMatrix {
    weighted_mass(space, 2 * space.degree + 2, |_, x| c(x))
}

/// Map `v ↦ v − ℰv`, written in the DG space of degree `max(r, s)`.
fn deviation_operator(op: &RecoveryOp) -> Result<(Arc<FeSpace>, SparseMatrix)> {
    let (dg, cg) = (&op.source, &op.target);
    let q = cg.degree.max(dg.degree);
    let fine = Arc::new(FeSpace::dg(&dg.mesh, q)?);
    let trans = transition_matrix(dg.degree, q)?;
    let mut b = TripletBuilder::new(fine.ndof, dg.ndof);
    for t in 0..dg.num_elements() {
        let rows = fine.element_dofs(t);
        for (i, &col) in dg.element_dofs(t).iter().enumerate() {
            for (j, &row) in rows.iter().enumerate() {
                b.push(row, col, trans[i][j]);
            }
        }
    }
    let prolong = b.build();
    let mut b = TripletBuilder::new(fine.ndof, cg.ndof);
    for t in 0..cg.num_elements() {
        for (&row, &col) in fine.element_dofs(t).iter().zip(cg.element_dofs(t)) {
            b.push(row, col, 1.0);
        }
    }
    let embed = b.build();
    let deviation = prolong.add_scaled(&embed.matmul(&op.matrix)?, -1.0)?;
    Ok((fine, deviation))
}

/// `∫_Ω σ̃ (w − ℰw)(v − ℰv)`; zero for the identity recovery.
pub fn assemble_volume_stab(op: &RecoveryOp, problem: &ProblemSpec, stab: &StabSpec) -> Result<SparseMatrix> {
    let n = op.source.ndof;
    if op.is_identity() {
        return Ok(SparseMatrix::zeros(n, n));
    }
    let (fine, dev) = deviation_operator(op)?;
    let mesh = &fine.mesh;
    let sig: Vec<f64> = (0..mesh.num_elements()).map(|t| stab.volume_sigma(mesh, problem, t)).collect();
    let mass = weighted_mass(&fine, 2 * fine.degree, |t, _| sig[t]);
    mass.congruence(&dev)
}

/// The stabilisation matrix `S` selected by `stab.kind`.
pub fn assemble_stabilisation(op: &RecoveryOp, problem: &ProblemSpec, stab: &StabSpec) -> Result<SparseMatrix> {
    check_dg(&op.source)?;
    Ok(match stab.kind {
        StabKind::FacetJump => assemble_jump_penalty(&op.source, problem, stab),
        StabKind::VolumeResidual => assemble_volume_stab(op, problem, stab)?,
        StabKind::DgInteriorPenalty => assemble_dg_stab(&op.source, problem, stab),
    })
}

/// Interior-penalty dG matrix assembled in one pass, as a reference for the
/// `ℰ = id` route. Facet couplings are built blockwise from the two sides'
/// outward normals rather than from a shared jump/average trace.
pub fn assemble_ip_dg(space: &FeSpace, problem: &ProblemSpec, stab: &StabSpec) -> Result<SparseMatrix> {
    check_dg(space)?;
    let mesh = &space.mesh;
    let nl = space.local_dim();
    let mut b = TripletBuilder::new(space.ndof, space.ndof);
    let rule = tri_rule_clamped((2 * space.degree).max(2) + if problem.constant_diffusion { 0 } else { 4 });
    for t in 0..space.num_elements() {
        let m = space.map(t);
        let mut local = vec![0.0; nl * nl];
        for (p, w) in rule.iter() {
            let a = (problem.diffusion)(m.map(p));
            let (_, g) = space.eval_basis(t, p);
            for i in 0..nl {
                for j in 0..nl {
                    local[i * nl + j] += w * m.jac_det() * dot(g[i], mat_vec(a, g[j]));
                }
            }
        }
        b.push_block(space.element_dofs(t), space.element_dofs(t), &local);
    }
    let erule = edge_rule_clamped(2 * space.degree + 1 + if problem.constant_diffusion { 0 } else { 2 });
    for (fi, facet) in mesh.facets.iter().enumerate() {
        let sigma = stab.facet_sigma(mesh, problem, fi);
        let sides: Vec<(usize, usize)> = facet.elements.iter().enumerate().filter_map(|(k, e)| e.map(|t| (k, t))).collect();
        let weight = if sides.len() == 2 { 0.5 } else { 1.0 };
        for &(ka, ta) in &sides {
            let na = if ka == 0 { facet.normal } else { [-facet.normal[0], -facet.normal[1]] };
            for &(kb, tb) in &sides {
                let nb = if kb == 0 { facet.normal } else { [-facet.normal[0], -facet.normal[1]] };
                let nanb = dot(na, nb);
                // Block (test on ta, trial on tb).
                let mut local = vec![0.0; nl * nl];
                for (q, w) in erule.iter() {
                    let x = facet.point(mesh, q[0]);
                    let a = (problem.diffusion)(x);
                    let (va, ga) = space.eval_basis(ta, facet_ref_point(mesh, fi, ka, q[0]));
                    let (vb, gb) = space.eval_basis(tb, facet_ref_point(mesh, fi, kb, q[0]));
                    let wl = w * facet.length;
                    for i in 0..nl {
                        for j in 0..nl {
                            let pen = sigma * vb[j] * va[i] * nanb;
                            let cons = weight * dot(mat_vec(a, gb[j]), na) * va[i];
                            let adj = weight * dot(mat_vec(a, ga[i]), nb) * vb[j];
                            local[i * nl + j] += wl * (pen - cons - stab.theta * adj);
                        }
                    }
                }
                b.push_block(space.element_dofs(ta), space.element_dofs(tb), &local);
            }
        }
    }
    Ok(b.build())
}

/// Upwinded convection `∑_T ∫_T (w·∇u) v + ∫_{∂₋T} |w·n| (u⁺ − u^{up}) v⁺`,
/// with upstream value 0 outside `Ω` (weak inflow condition).
pub fn assemble_upwind(space: &FeSpace, w: impl Fn(Point) -> [f64; 2]) -> Result<SparseMatrix> {
    check_dg(space)?;
    let mesh = &space.mesh;
    let nl = space.local_dim();
    let mut b = TripletBuilder::new(space.ndof, space.ndof);
    if space.degree > 0 {
        let rule = tri_rule_clamped(2 * space.degree + 2);
        for t in 0..space.num_elements() {
            let m = space.map(t);
            let mut local = vec![0.0; nl * nl];
            for (p, wq) in rule.iter() {
                let wx = w(m.map(p));
                let (vals, grads) = space.eval_basis(t, p);
                for i in 0..nl {
                    for j in 0..nl {
                        local[i * nl + j] += wq * m.jac_det() * dot(wx, grads[j]) * vals[i];
                    }
                }
            }
            b.push_block(space.element_dofs(t), space.element_dofs(t), &local);
        }
    }
    for fi in 0..mesh.num_facets() {
        let facet = &mesh.facets[fi];
        let tr = facet_trace(space, None, fi, 2 * space.degree + 3);
        let nf = tr.n_first;
        let nd = tr.dofs.len();
        let mut local = vec![0.0; nd * nd];
        for (q, &wl) in tr.weights.iter().enumerate() {
            let wn = dot(w(tr.points[q]), facet.normal);
            let jq = &tr.jump[q];
            // Downstream side: 0 if the flow enters the first element, else 1.
            let down = if wn < 0.0 { 0 } else if facet.second().is_some() { 1 } else { continue };
            let sign = if down == 0 { 1.0 } else { -1.0 };
            let offset = down * nf;
            for (i, vi) in tr.values[down][q].iter().enumerate() {
                for j in 0..nd {
                    // |w·n| (u_down − u_up) v_down, with u_down − u_up = sign · jump.
                    local[(offset + i) * nd + j] += wl * wn.abs() * sign * jq[j] * vi;
                }
            }
        }
        b.push_block(&tr.dofs, &tr.dofs, &local);
    }
    Ok(b.build())
}

/// `b_i = ∫_Ω f φ_i`.
pub fn assemble_load(space: &FeSpace, f: impl Fn(Point) -> f64) -> Vec<f64> {
    let rule = tri_rule_clamped(2 * space.degree + 4);
    let mut b = vec![0.0; space.ndof];
    for t in 0..space.num_elements() {
        let m = space.map(t);
        let dofs = space.element_dofs(t);
        for (p, w) in rule.iter() {
            let fw = w * m.jac_det() * f(m.map(p));
            for (v, &d) in space.basis.values(p).iter().zip(dofs) {
                b[d] += fw * v;
            }
        }
    }
    b
}

/// `𝔟 = Eᵀ b`, realising `ℓ(ℰ v_h)`.
pub fn rfem_rhs(op: &RecoveryOp, b_target: &[f64]) -> Result<Vec<f64>> {
    if b_target.len() != op.target.ndof {
        return Err(Error::DimensionMismatch(format!("load has {} entries, target space {}", b_target.len(), op.target.ndof)));
    }
    Ok(op.matrix.transpose().mul_vec(b_target))
}

/// Element-wise split `s_{h,T}(u, u)` of the stabilisation: interior facet
/// terms are shared half/half, boundary facets belong to their element.
pub fn local_stab_split(op: &RecoveryOp, u: &FeFunction, problem: &ProblemSpec, stab: &StabSpec) -> Result<Vec<f64>> {
    let space = &op.source;
    let mesh = &space.mesh;
    let mut out = vec![0.0; mesh.num_elements()];
    match stab.kind {
        StabKind::FacetJump | StabKind::DgInteriorPenalty => {
            let rule = edge_rule_clamped(2 * space.degree + 1);
            for (fi, facet) in mesh.facets.iter().enumerate() {
                let sigma = stab.facet_sigma(mesh, problem, fi);
                let j2: f64 = rule.iter().map(|(q, w)| w * u.jump(fi, q[0]).powi(2)).sum();
                let term = sigma * j2 * facet.length;
                match facet.second() {
                    Some(t1) => {
                        out[facet.first()] += 0.5 * term;
                        out[t1] += 0.5 * term;
                    }
                    None => out[facet.first()] += term,
                }
            }
        }
        StabKind::VolumeResidual => {
            if op.is_identity() {
                return Ok(out);
            }
            let rec = op.apply(u)?;
            let rule = tri_rule_clamped(2 * op.target.degree.max(space.degree));
            for (t, slot) in out.iter_mut().enumerate() {
                let m = space.map(t);
                let sig = stab.volume_sigma(mesh, problem, t);
                *slot = rule
                    .iter()
                    .map(|(p, w)| w * m.jac_det() * sig * (u.eval(t, p) - rec.eval(t, p)).powi(2))
                    .sum();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::FeFunction;
    use crate::mesh::{make_crisscross, Rect};
    use crate::recovery::{build_recovery, embed_conforming};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> Arc<Mesh> {
        Arc::new(make_crisscross(n, Rect::UNIT).unwrap())
    }

    fn laplace() -> ProblemSpec {
        ProblemSpec::poisson(|_| 1.0)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn stiffness_center_node() {
        let m = unit(1);
        let cg = FeSpace::cg(&m, 1).unwrap();
        let k = assemble_stiffness(&cg, &laplace());
        let center = (0..cg.ndof).find(|&i| !cg.boundary_dofs[i]).unwrap();
        assert!((k.get(center, center) - 4.0).abs() < 1e-14);
        assert!(k.asymmetry() < 1e-13);
        assert!(k.row_sums().iter().all(|s| s.abs() < 1e-13));
    }

    #[test]
    fn two_triangle_jump_oracle() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            vec![0, 0],
        )
        .unwrap();
        let m = Arc::new(mesh);
        let dg = FeSpace::dg(&m, 0).unwrap();
        let s = assemble_jump_penalty(&dg, &laplace(), &StabSpec::facet_jump(1.0, 0.0).unwrap());
        let v = [0.0, 1.0];
        assert!((s.bilinear(&v, &v) - (2f64.sqrt() + 2.0)).abs() < 1e-14);
    }

    #[test]
    fn jump_penalty_psd_and_blind_to_conforming() {
        let m = unit(2);
        let dg = Arc::new(FeSpace::dg(&m, 1).unwrap());
        let cg = FeSpace::cg(&m, 1).unwrap();
        let s = assemble_jump_penalty(&dg, &laplace(), &StabSpec::facet_jump(1.0, 1.0).unwrap());
        let eig = s.to_dense().self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        assert!(eig.iter().all(|&l| l >= -1e-12));
        let cgf = FeFunction::interpolate(Arc::new(cg), |p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]));
        let v = embed_conforming(&cgf, &dg).unwrap();
        assert!(s.bilinear(&v.coeffs, &v.coeffs).abs() < 1e-15);
    }

    #[test]
    fn facet_jump_matches_weighted_seminorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = unit(4);
        let problem = laplace().with_diffusion(|_| [[3.0, 0.0], [0.0, 3.0]], true);
        for alpha in [0.0, 0.5, 1.0, 2.0] {
            let stab = StabSpec::from_alpha(StabKind::FacetJump, alpha, 0.7).unwrap();
            for p in 0..=2 {
                let dg = Arc::new(FeSpace::dg(&m, p).unwrap());
                let s = assemble_jump_penalty(&dg, &problem, &stab);
                let v = FeFunction::new(Arc::clone(&dg), random_vec(&mut rng, dg.ndof)).unwrap();
                let rule = edge_rule_clamped(2 * p + 2);
                let seminorm: f64 = m
                    .facets
                    .iter()
                    .enumerate()
                    .map(|(fi, f)| {
                        m.facet_h[fi].powf(2.0 * alpha - 1.0)
                            * f.length
                            * rule.iter().map(|(q, w)| w * v.jump(fi, q[0]).powi(2)).sum::<f64>()
                    })
                    .sum();
                let lhs = s.bilinear(&v.coeffs, &v.coeffs);
                assert!((lhs - 0.7 * 3.0 * seminorm).abs() < 1e-12 * lhs.abs());
            }
        }
    }

    #[test]
    fn cauchy_schwarz_for_both_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = unit(3);
        let dg = Arc::new(FeSpace::dg(&m, 0).unwrap());
        let cg = Arc::new(FeSpace::cg(&m, 1).unwrap());
        let op = build_recovery(&dg, &cg).unwrap();
        for stab in [StabSpec::facet_jump(1.0, 1.0).unwrap(), StabSpec::volume(1.0, 1.0).unwrap()] {
            let s = assemble_stabilisation(&op, &laplace(), &stab).unwrap();
            for _ in 0..50 {
                let (w, v) = (random_vec(&mut rng, dg.ndof), random_vec(&mut rng, dg.ndof));
                let lhs = s.bilinear(&w, &v).abs();
                let rhs = (s.bilinear(&w, &w) * s.bilinear(&v, &v)).sqrt();
                assert!(lhs <= rhs * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn volume_stab_definition_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = unit(3);
        for (r, s) in [(0, 1), (1, 1), (1, 2)] {
            let dg = Arc::new(FeSpace::dg(&m, r).unwrap());
            let cg = Arc::new(FeSpace::cg(&m, s).unwrap());
            let op = build_recovery(&dg, &cg).unwrap();
            let stab = StabSpec::volume(1.0, 1.0).unwrap();
            let mat = assemble_volume_stab(&op, &laplace(), &stab).unwrap();
            assert!(mat.asymmetry() < 1e-13);
            let v = FeFunction::new(Arc::clone(&dg), random_vec(&mut rng, dg.ndof)).unwrap();
            let direct: f64 = local_stab_split(&op, &v, &laplace(), &stab).unwrap().iter().sum();
            let form = mat.bilinear(&v.coeffs, &v.coeffs);
            assert!((form - direct).abs() < 1e-12 * direct, "r={r} s={s}: {form} vs {direct}");
            let quad = assemble_volume_stab(&op, &laplace(), &StabSpec::volume(4.0, 1.0).unwrap()).unwrap();
            assert!((quad.bilinear(&v.coeffs, &v.coeffs) - 4.0 * form).abs() < 1e-12 * form);
            if r == s {
                let f = FeFunction::interpolate(Arc::clone(&cg), |p| (p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1])).sqrt());
                let mut f = f;
                for (c, &b) in f.coeffs.iter_mut().zip(&cg.boundary_dofs) {
                    if b {
                        *c = 0.0;
                    }
                }
                let e = embed_conforming(&f, &dg).unwrap();
                assert!(mat.bilinear(&e.coeffs, &e.coeffs).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ip_dg_symmetry_and_consistency() {
        let m = unit(2);
        let dg = Arc::new(FeSpace::dg(&m, 1).unwrap());
        let sym = assemble_ip_dg(&dg, &laplace(), &StabSpec::interior_penalty(10.0, 1.0).unwrap()).unwrap();
        assert!(sym.asymmetry() < 1e-13);
        let nonsym = assemble_ip_dg(&dg, &laplace(), &StabSpec::interior_penalty(10.0, 0.0).unwrap()).unwrap();
        assert!(nonsym.asymmetry() > 1e-3);

        let cg = Arc::new(FeSpace::cg(&m, 1).unwrap());
        let f = FeFunction::interpolate(Arc::clone(&cg), |p| p[0] * (1.0 - p[0]) + 0.0 * p[1]);
        let mut f = f;
        for (c, &b) in f.coeffs.iter_mut().zip(&cg.boundary_dofs) {
            if b {
                *c = 0.0;
            }
        }
        let v = embed_conforming(&f, &dg).unwrap();
        let k = assemble_stiffness(&dg, &laplace());
        let a = k.bilinear(&v.coeffs, &v.coeffs);
        assert!((sym.bilinear(&v.coeffs, &v.coeffs) - a).abs() < 1e-12 * a);
    }

    #[test]
    fn ip_dg_matches_split_assembly() {
        let m = unit(2);
        let problem = laplace().with_diffusion(|p| [[1.0 + p[0], 0.2], [0.2, 2.0 + p[1] * p[1]]], false);
        for p in [1, 2] {
            let dg = Arc::new(FeSpace::dg(&m, p).unwrap());
            for theta in [1.0, 0.0, -1.0] {
                let stab = StabSpec::interior_penalty(10.0, theta).unwrap();
                let mono = assemble_ip_dg(&dg, &problem, &stab).unwrap();
                let split = assemble_stiffness(&dg, &problem).add(&assemble_dg_stab(&dg, &problem, &stab)).unwrap();
                assert!(mono.max_abs_diff(&split).unwrap() < 1e-12 * mono.max_abs());
            }
        }
    }

    #[test]
    fn upwind_p0_row_sums_on_single_cell() {
        let m = unit(1);
        let dg = FeSpace::dg(&m, 0).unwrap();
        let c = assemble_upwind(&dg, |_| [1.0, 1.0]).unwrap();
        let sums = c.row_sums();
        for t in 0..m.num_elements() {
            let expect: f64 = m.elem_facets[t]
                .iter()
                .filter(|&&f| m.facets[f].is_boundary)
                .map(|&f| {
                    let wn = dot([1.0, 1.0], m.outward_normal(t, f));
                    if wn < 0.0 {
                        -wn * m.facets[f].length
                    } else {
                        0.0
                    }
                })
                .sum();
            assert!((sums[t] - expect).abs() < 1e-14);
        }
        assert!((sums.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn divergence_free_convection_is_nonnegative() {
        let w = |p: Point| [(2.0 * p[1] - 1.0) * (1.0 - p[0] * p[0]), 2.0 * p[0] * p[1] * (p[1] - 1.0)];
        // ∂₁w₁ + ∂₂w₂ = −2x(2y−1) + 2x(2y−1) = 0.
        let h = 1e-5;
        for p in [[0.3, 0.7], [0.9, 0.1], [0.5, 0.5]] {
            let div = (w([p[0] + h, p[1]])[0] - w([p[0] - h, p[1]])[0] + w([p[0], p[1] + h])[1] - w([p[0], p[1] - h])[1]) / (2.0 * h);
            assert!(div.abs() < 1e-8);
        }
        let m = unit(4);
        for p in [0, 1] {
            let dg = FeSpace::dg(&m, p).unwrap();
            let c = assemble_upwind(&dg, w).unwrap();
            let sym = c.add(&c.transpose()).unwrap().scaled(0.5);
            let eig = sym.to_dense().self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
            assert!(eig.iter().all(|&l| l >= -1e-10), "p={p}: {}", eig[0]);
        }
    }

    #[test]
    fn mass_matrices() {
        let m = unit(2);
        let dg = FeSpace::dg(&m, 0).unwrap();
        let mass = assemble_mass(&dg, |_| 1.0);
        for t in 0..m.num_elements() {
            assert!((mass.get(t, t) - m.area(t)).abs() < 1e-15);
        }
        assert_eq!(mass.nnz(), m.num_elements());
        assert_eq!(assemble_mass(&dg, |_| 0.0).nnz(), 0);

        let dg1 = Arc::new(FeSpace::dg(&m, 1).unwrap());
        let c = |p: Point| 1.0 + p[0] * p[1];
        let mass = assemble_mass(&dg1, c);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = FeFunction::new(Arc::clone(&dg1), random_vec(&mut rng, dg1.ndof)).unwrap();
        let rule = tri_rule_clamped(6);
        let direct: f64 = (0..m.num_elements())
            .map(|t| {
                let mp = dg1.map(t);
                rule.iter().map(|(p, w)| w * mp.jac_det() * c(mp.map(p)) * v.eval(t, p).powi(2)).sum::<f64>()
            })
            .sum();
        assert!((mass.bilinear(&v.coeffs, &v.coeffs) - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn load_vectors() {
        let m = unit(1);
        let cg = FeSpace::cg(&m, 1).unwrap();
        let b = assemble_load(&cg, |_| 1.0);
        let center = (0..cg.ndof).find(|&i| !cg.boundary_dofs[i]).unwrap();
        assert!((b[center] - 1.0 / 3.0).abs() < 1e-15);
        assert!(assemble_load(&cg, |_| 0.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rhs_realises_load_of_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = unit(3);
        let dg = Arc::new(FeSpace::dg(&m, 1).unwrap());
        let cg = Arc::new(FeSpace::cg(&m, 2).unwrap());
        let op = build_recovery(&dg, &cg).unwrap();
        let f = |p: Point| (3.0 * p[0]).sin() + p[1];
        let rhs = rfem_rhs(&op, &assemble_load(&cg, f)).unwrap();
        let rule = tri_rule_clamped(8);
        for _ in 0..10 {
            let v = FeFunction::new(Arc::clone(&dg), random_vec(&mut rng, dg.ndof)).unwrap();
            let rec = op.apply(&v).unwrap();
            let direct: f64 = (0..m.num_elements())
                .map(|t| {
                    let mp = cg.map(t);
                    rule.iter().map(|(p, w)| w * mp.jac_det() * f(mp.map(p)) * rec.eval(t, p)).sum::<f64>()
                })
                .sum();
            let alg: f64 = rhs.iter().zip(&v.coeffs).map(|(a, b)| a * b).sum();
            assert!((alg - direct).abs() < 1e-12 * direct.abs().max(1.0));
        }
        assert!(rfem_rhs(&op, &[0.0; 3]).is_err());
    }

    #[test]
    fn local_split_sums_to_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = unit(4);
        let dg = Arc::new(FeSpace::dg(&m, 1).unwrap());
        let cg = Arc::new(FeSpace::cg(&m, 2).unwrap());
        let op = build_recovery(&dg, &cg).unwrap();
        for stab in [StabSpec::facet_jump(2.0, 2.0).unwrap(), StabSpec::volume(2.0, 2.0).unwrap()] {
            let s = assemble_stabilisation(&op, &laplace(), &stab).unwrap();
            let v = FeFunction::new(Arc::clone(&dg), random_vec(&mut rng, dg.ndof)).unwrap();
            let total: f64 = local_stab_split(&op, &v, &laplace(), &stab).unwrap().iter().sum();
            let global = s.bilinear(&v.coeffs, &v.coeffs);
            assert!((total - global).abs() < 1e-12 * global);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(StabSpec::facet_jump(0.0, 1.0).is_err());
        assert!(StabSpec::interior_penalty(1.0, 2.0).is_err());
        assert!(ProblemSpec::convection_diffusion(0.0, |_| [1.0, 0.0], None, |_| 1.0).is_err());
        let bad = laplace().with_diffusion(|_| [[1.0, 0.0], [0.0, -1.0]], true);
        assert!(bad.validate(&unit(1)).is_err());
        assert!(laplace().validate(&unit(1)).is_ok());
        assert_eq!(StabSpec::from_alpha(StabKind::FacetJump, 3.0, 1.0).unwrap().power, 5.0);
    }
}
