//! Lagrange finite element spaces on triangles: element-wise discontinuous
//! `P_r` (DG) and globally continuous `P_s` (CG), with basis evaluation,
//! projections and error norms.

use std::collections::HashMap;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::Mat;

use crate::error::{invalid, Result};
use crate::mesh::{Mesh, Point};
use crate::quadrature::{edge_rule_clamped, tri_rule_clamped};

pub const MAX_DEGREE: usize = 3;

/// Dimension of `P_p` in two variables.
pub fn poly_dim(p: usize) -> usize {
    (p + 1) * (p + 2) / 2
}

/// Barycentric multi-indices `(a, b, c)`, `a + b + c = p`, of the Lagrange nodes.
///
/// Order: the three vertices, then the edge nodes of edge 0 (opposite vertex 0),
/// edge 1 and edge 2, each listed from the edge's first to its second vertex,
/// then interior nodes. For `p = 2` this puts the midpoint of edge `(1,2)` at
/// local index 3, of `(0,2)` at 4, of `(0,1)` at 5.
pub fn lagrange_multi_indices(p: usize) -> Vec<[usize; 3]> {
    if p == 0 {
        return vec![[0, 0, 0]];
    }
    let mut out = vec![[p, 0, 0], [0, p, 0], [0, 0, p]];
    for e in 0..3 {
        let (first, second) = ((e + 1) % 3, (e + 2) % 3);
        for k in 1..p {
            let mut m = [0; 3];
            m[first] = p - k;
            m[second] = k;
            out.push(m);
        }
    }
    for a in 1..p {
        for b in 1..p {
            if a + b < p {
                out.push([p - a - b, a, b]);
            }
        }
    }
    out
}

/// Reference-element Lagrange basis in monomial form.
#[derive(Debug, Clone)]
pub struct RefBasis {
    pub degree: usize,
    pub multi: Vec<[usize; 3]>,
    /// Reference coordinates of the Lagrange nodes.
    pub nodes: Vec<Point>,
    monomials: Vec<(i32, i32)>,
    /// Row `i` holds the monomial coefficients of basis function `i`.
    coeffs: Vec<f64>,
}

impl RefBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(invalid(format!("polynomial degree {degree} above {MAX_DEGREE}")));
        }
        let multi = lagrange_multi_indices(degree);
        let nodes: Vec<Point> = if degree == 0 {
            vec![[1.0 / 3.0, 1.0 / 3.0]]
        } else {
            multi.iter().map(|m| [m[1] as f64 / degree as f64, m[2] as f64 / degree as f64]).collect()
        };
        let monomials: Vec<(i32, i32)> =
            (0..=degree as i32).flat_map(|t| (0..=t).map(move |b| (t - b, b))).collect();
        let n = nodes.len();
        // Vandermonde V[j][k] = m_k(node_j); coefficients C satisfy C Vᵀ = I.
        let vt = Mat::<f64>::from_fn(n, n, |k, j| mono(monomials[k], nodes[j]));
        let inv = vt.partial_piv_lu().solve(Mat::<f64>::identity(n, n));
        let coeffs = (0..n).flat_map(|i| (0..n).map(move |k| (i, k))).map(|(i, k)| inv[(i, k)]).collect();
        Ok(Self { degree, multi, nodes, monomials, coeffs })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn combine<const K: usize>(&self, f: impl Fn((i32, i32)) -> [f64; K]) -> Vec<[f64; K]> {
        let n = self.len();
        let mv: Vec<[f64; K]> = self.monomials.iter().map(|&m| f(m)).collect();
        (0..n)
            .map(|i| {
                let mut acc = [0.0; K];
                for (k, v) in mv.iter().enumerate() {
                    let c = self.coeffs[i * n + k];
                    for d in 0..K {
                        acc[d] += c * v[d];
                    }
                }
                acc
            })
            .collect()
    }

    pub fn values(&self, p: Point) -> Vec<f64> {
        self.combine(|m| [mono(m, p)]).into_iter().map(|v| v[0]).collect()
    }

    /// Gradients with respect to reference coordinates.
    pub fn ref_gradients(&self, p: Point) -> Vec<[f64; 2]> {
        self.combine(|(a, b)| [dmono(a, p[0]) * pw(p[1], b), pw(p[0], a) * dmono(b, p[1])])
    }

    /// Reference Hessians `[∂xx, ∂xy, ∂yy]`.
    pub fn ref_hessians(&self, p: Point) -> Vec<[f64; 3]> {
        self.combine(|(a, b)| {
            [
                ddmono(a, p[0]) * pw(p[1], b),
                dmono(a, p[0]) * dmono(b, p[1]),
                pw(p[0], a) * ddmono(b, p[1]),
            ]
        })
    }
}

fn pw(x: f64, e: i32) -> f64 {
    if e <= 0 {
        1.0
    } else {
        x.powi(e)
    }
}

fn mono((a, b): (i32, i32), p: Point) -> f64 {
    pw(p[0], a) * pw(p[1], b)
}

fn dmono(a: i32, x: f64) -> f64 {
    if a == 0 {
        0.0
    } else {
        a as f64 * pw(x, a - 1)
    }
}

fn ddmono(a: i32, x: f64) -> f64 {
    if a < 2 {
        0.0
    } else {
        (a * (a - 1)) as f64 * pw(x, a - 2)
    }
}

/// Affine map from the reference triangle onto a mesh element.
#[derive(Debug, Clone, Copy)]
pub struct ElementMap {
    pub origin: Point,
    /// Columns are `v1 − v0` and `v2 − v0`.
    pub jac: [[f64; 2]; 2],
    /// `J^{-T}`.
    pub inv_t: [[f64; 2]; 2],
    pub det: f64,
}

impl ElementMap {
    pub fn new(mesh: &Mesh, t: usize) -> Self {
        let [a, b, c] = mesh.element_vertices(t);
        let jac = [[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]];
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        // J^{-1} = [[d, -b], [-c, a]] / det; transpose it.
        let inv_t = [[jac[1][1] / det, -jac[1][0] / det], [-jac[0][1] / det, jac[0][0] / det]];
        Self { origin: a, jac, inv_t, det }
    }

    pub fn map(&self, xi: Point) -> Point {
        [
            self.origin[0] + self.jac[0][0] * xi[0] + self.jac[0][1] * xi[1],
            self.origin[1] + self.jac[1][0] * xi[0] + self.jac[1][1] * xi[1],
        ]
    }

    pub fn inverse(&self, x: Point) -> Point {
        let d = [x[0] - self.origin[0], x[1] - self.origin[1]];
        // J^{-1} d = (J^{-T})ᵀ d.
        [
            self.inv_t[0][0] * d[0] + self.inv_t[1][0] * d[1],
            self.inv_t[0][1] * d[0] + self.inv_t[1][1] * d[1],
        ]
    }

    pub fn grad(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.inv_t[0][0] * g[0] + self.inv_t[0][1] * g[1],
            self.inv_t[1][0] * g[0] + self.inv_t[1][1] * g[1],
        ]
    }

    /// Physical Hessian `J^{-T} H J^{-1}` from a reference Hessian.
    pub fn hessian(&self, h: [f64; 3]) -> [f64; 3] {
        let m = self.inv_t;
        let hr = [[h[0], h[1]], [h[1], h[2]]];
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        s += m[i][k] * hr[k][l] * m[j][l];
                    }
                }
                out[i][j] = s;
            }
        }
        [out[0][0], out[0][1], out[1][1]]
    }

    /// `|det J|`, twice the element area.
    pub fn jac_det(&self) -> f64 {
        self.det.abs()
    }
}

/// Reference coordinates of the point at parameter `t` along facet `f`,
/// seen from its adjacent element on `side` (0 or 1).
pub fn facet_ref_point(mesh: &Mesh, f: usize, side: usize, t: f64) -> Point {
    const REF: [Point; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let facet = &mesh.facets[f];
    let elem = facet.elements[side].expect("requested side exists");
    let e = facet.local_edge[side];
    let tri = mesh.triangles[elem];
    let (a, b) = (REF[(e + 1) % 3], REF[(e + 2) % 3]);
    let s = if tri[(e + 1) % 3] == facet.vertices[0] { t } else { 1.0 - t };
    [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    /// Element-wise discontinuous `P_r`.
    Dg,
    /// Continuous `P_s`.
    Cg,
}

/// A Lagrange finite element space over a mesh.
#[derive(Debug, Clone)]
pub struct FeSpace {
    pub kind: SpaceKind,
    pub degree: usize,
    pub mesh: Arc<Mesh>,
    pub basis: RefBasis,
    pub ndof: usize,
    elem_dofs: Vec<usize>,
    /// Flags for dofs on `∂Ω` (always false for DG).
    pub boundary_dofs: Vec<bool>,
    pub node_coords: Vec<Point>,
    maps: Vec<ElementMap>,
}

impl FeSpace {
    pub fn new(mesh: Arc<Mesh>, kind: SpaceKind, degree: usize) -> Result<Self> {
        if kind == SpaceKind::Cg && degree == 0 {
            return Err(invalid("continuous Lagrange space needs degree ≥ 1"));
        }
        let basis = RefBasis::new(degree)?;
        let nloc = basis.len();
        let maps: Vec<ElementMap> = (0..mesh.num_elements()).map(|t| ElementMap::new(&mesh, t)).collect();
        let (ndof, elem_dofs, boundary_dofs, node_coords) = match kind {
            SpaceKind::Dg => {
                let ndof = nloc * mesh.num_elements();
                let coords = maps.iter().flat_map(|m| basis.nodes.iter().map(move |&p| m.map(p))).collect();
                (ndof, (0..ndof).collect(), vec![false; ndof], coords)
            }
            SpaceKind::Cg => number_cg(&mesh, &basis, &maps),
        };
        Ok(Self { kind, degree, mesh, basis, ndof, elem_dofs, boundary_dofs, node_coords, maps })
    }

    pub fn dg(mesh: &Arc<Mesh>, degree: usize) -> Result<Self> {
        Self::new(Arc::clone(mesh), SpaceKind::Dg, degree)
    }

    pub fn cg(mesh: &Arc<Mesh>, degree: usize) -> Result<Self> {
        Self::new(Arc::clone(mesh), SpaceKind::Cg, degree)
    }

    pub fn local_dim(&self) -> usize {
        self.basis.len()
    }

    pub fn num_elements(&self) -> usize {
        self.mesh.num_elements()
    }

    /// Global dof indices of element `t`, in local basis order.
    pub fn element_dofs(&self, t: usize) -> &[usize] {
        let n = self.local_dim();
        &self.elem_dofs[t * n..(t + 1) * n]
    }

    pub fn map(&self, t: usize) -> &ElementMap {
        &self.maps[t]
    }

    pub fn interior_dofs(&self) -> Vec<usize> {
        (0..self.ndof).filter(|&i| !self.boundary_dofs[i]).collect()
    }

    /// Basis values and physical gradients on element `t` at a reference point.
    pub fn eval_basis(&self, t: usize, xi: Point) -> (Vec<f64>, Vec<[f64; 2]>) {
        let m = &self.maps[t];
        let grads = self.basis.ref_gradients(xi).into_iter().map(|g| m.grad(g)).collect();
        (self.basis.values(xi), grads)
    }

    /// Physical Hessians `[∂xx, ∂xy, ∂yy]` of the local basis.
    pub fn eval_hessians(&self, t: usize, xi: Point) -> Vec<[f64; 3]> {
        let m = &self.maps[t];
        self.basis.ref_hessians(xi).into_iter().map(|h| m.hessian(h)).collect()
    }

    pub fn same_mesh(&self, other: &FeSpace) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh)
    }
}

type CgNumbering = (usize, Vec<usize>, Vec<bool>, Vec<Point>);

fn number_cg(mesh: &Mesh, basis: &RefBasis, maps: &[ElementMap]) -> CgNumbering {
    let nloc = basis.len();
    let nv = mesh.num_vertices();
    let mut elem_dofs = vec![0usize; nloc * mesh.num_elements()];
    let mut boundary = vec![false; nv];
    let mut coords = mesh.vertices.clone();
    boundary.copy_from_slice(&mesh.boundary_vertex);
    // Non-vertex nodes are keyed by their (vertex, multiplicity) pairs, sorted by vertex.
    let mut lookup: HashMap<[(usize, usize); 3], usize> = HashMap::new();
    for t in 0..mesh.num_elements() {
        let tri = mesh.triangles[t];
        for (i, m) in basis.multi.iter().enumerate() {
            let support: Vec<usize> = (0..3).filter(|&k| m[k] > 0).collect();
            let dof = if support.len() == 1 {
                tri[support[0]]
            } else {
                let mut key = [(usize::MAX, 0usize); 3];
                let mut parts: Vec<(usize, usize)> = support.iter().map(|&k| (tri[k], m[k])).collect();
                parts.sort_unstable();
                key[..parts.len()].copy_from_slice(&parts);
                *lookup.entry(key).or_insert_with(|| {
                    let on_boundary = if support.len() == 2 {
                        let edge = (0..3).find(|k| !support.contains(k)).unwrap();
                        mesh.facets[mesh.elem_facets[t][edge]].is_boundary
                    } else {
                        false
                    };
                    boundary.push(on_boundary);
                    coords.push(maps[t].map(basis.nodes[i]));
                    coords.len() - 1
                })
            };
            elem_dofs[t * nloc + i] = dof;
        }
    }
    (coords.len(), elem_dofs, boundary, coords)
}

/// A function in a finite element space.
#[derive(Debug, Clone)]
pub struct FeFunction {
    pub space: Arc<FeSpace>,
    pub coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn new(space: Arc<FeSpace>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.ndof {
            return Err(invalid(format!("coefficient length {} != ndof {}", coeffs.len(), space.ndof)));
        }
        Ok(Self { space, coeffs })
    }

    pub fn zeros(space: Arc<FeSpace>) -> Self {
        let n = space.ndof;
        Self { space, coeffs: vec![0.0; n] }
    }

    /// Nodal interpolant of `g`.
    pub fn interpolate(space: Arc<FeSpace>, g: impl Fn(Point) -> f64) -> Self {
        let coeffs = space.node_coords.iter().map(|&p| g(p)).collect();
        Self { space, coeffs }
    }

    pub fn local_coeffs(&self, t: usize) -> Vec<f64> {
        self.space.element_dofs(t).iter().map(|&d| self.coeffs[d]).collect()
    }

    pub fn eval(&self, t: usize, xi: Point) -> f64 {
        let vals = self.space.basis.values(xi);
        self.space.element_dofs(t).iter().zip(vals).map(|(&d, v)| self.coeffs[d] * v).sum()
    }

    pub fn eval_grad(&self, t: usize, xi: Point) -> [f64; 2] {
        let (_, grads) = self.space.eval_basis(t, xi);
        let mut g = [0.0; 2];
        for (&d, gr) in self.space.element_dofs(t).iter().zip(grads) {
            g[0] += self.coeffs[d] * gr[0];
            g[1] += self.coeffs[d] * gr[1];
        }
        g
    }

    /// Scalar jump `v⁺ − v⁻` across facet `fi` at facet parameter `t`
    /// (`v⁺` on boundary facets), with `+` the facet's first element.
    pub fn jump(&self, fi: usize, t: f64) -> f64 {
        let mesh = &self.space.mesh;
        let facet = &mesh.facets[fi];
        let inner = self.eval(facet.first(), facet_ref_point(mesh, fi, 0, t));
        match facet.second() {
            Some(t1) => inner - self.eval(t1, facet_ref_point(mesh, fi, 1, t)),
            None => inner,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { space: Arc::clone(&self.space), coeffs: self.coeffs.iter().map(|c| c * factor).collect() }
    }
}

/// Element-wise L² projection of `g` onto a DG space.
pub fn l2_project(space: &Arc<FeSpace>, g: impl Fn(Point) -> f64) -> Result<FeFunction> {
    if space.kind != SpaceKind::Dg {
        return Err(invalid("L2 projection is element-wise and needs a DG space"));
    }
    let n = space.local_dim();
    let rule = tri_rule_clamped(2 * space.degree + 4);
    let mut coeffs = vec![0.0; space.ndof];
    let ref_vals: Vec<Vec<f64>> = rule.points.iter().map(|&p| space.basis.values(p)).collect();
    // The reference mass matrix is shared by all elements up to the |det J| factor.
    let mass = Mat::<f64>::from_fn(n, n, |i, j| rule.weights.iter().zip(&ref_vals).map(|(w, v)| w * v[i] * v[j]).sum());
    let llt = mass.llt(faer::Side::Lower).map_err(|_| invalid("reference mass matrix not SPD"))?;
    for t in 0..space.num_elements() {
        let m = space.map(t);
        let mut rhs = Mat::<f64>::zeros(n, 1);
        for ((&p, &w), vals) in rule.points.iter().zip(&rule.weights).zip(&ref_vals) {
            let gv = g(m.map(p));
            for i in 0..n {
                rhs[(i, 0)] += w * gv * vals[i];
            }
        }
        let sol = llt.solve(&rhs);
        for (i, &d) in space.element_dofs(t).iter().enumerate() {
            coeffs[d] = sol[(i, 0)];
        }
    }
    FeFunction::new(Arc::clone(space), coeffs)
}

/// Component-wise projection of a 2×2 tensor field; returns `[xx, xy, yx, yy]`.
pub fn l2_project_tensor(space: &Arc<FeSpace>, a: impl Fn(Point) -> [[f64; 2]; 2]) -> Result<[FeFunction; 4]> {
    Ok([
        l2_project(space, |p| a(p)[0][0])?,
        l2_project(space, |p| a(p)[0][1])?,
        l2_project(space, |p| a(p)[1][0])?,
        l2_project(space, |p| a(p)[1][1])?,
    ])
}

/// `(‖u − f‖_Ω, ‖∇(u − f)‖_Ω)` for a discrete function `f`.
pub fn error_norms(
    f: &FeFunction,
    u: impl Fn(Point) -> f64,
    grad_u: impl Fn(Point) -> [f64; 2],
) -> (f64, f64) {
    let space = &f.space;
    let rule = tri_rule_clamped((2 * space.degree + 2).max(6));
    let (mut l2, mut h1) = (0.0, 0.0);
    for t in 0..space.num_elements() {
        let m = space.map(t);
        let local = f.local_coeffs(t);
        for (p, w) in rule.iter() {
            let (vals, grads) = space.eval_basis(t, p);
            let x = m.map(p);
            let v: f64 = local.iter().zip(&vals).map(|(c, b)| c * b).sum();
            let mut g = [0.0; 2];
            for (c, gr) in local.iter().zip(&grads) {
                g[0] += c * gr[0];
                g[1] += c * gr[1];
            }
            let gu = grad_u(x);
            let wt = w * m.jac_det();
            l2 += wt * (u(x) - v).powi(2);
            h1 += wt * ((gu[0] - g[0]).powi(2) + (gu[1] - g[1]).powi(2));
        }
    }
    (l2.sqrt(), h1.sqrt())
}

/// Energy-like DG norm `(∑_T ‖∇w‖²_T + ∑_e σ_e ‖⟦w⟧‖²_e)^{1/2}` of a DG function.
pub fn dg_norm(f: &FeFunction, sigma: impl Fn(usize) -> f64) -> f64 {
    dg_norm_of_error(f, |_| 0.0, |_| [0.0; 2], sigma)
}

/// DG norm of `u − f`, with `u` given by callbacks.
pub fn dg_norm_of_error(
    f: &FeFunction,
    u: impl Fn(Point) -> f64,
    grad_u: impl Fn(Point) -> [f64; 2],
    sigma: impl Fn(usize) -> f64,
) -> f64 {
    let space = &f.space;
    let mesh = &space.mesh;
    let rule = tri_rule_clamped((2 * space.degree).max(4));
    let mut total = 0.0;
    for t in 0..space.num_elements() {
        let m = space.map(t);
        for (p, w) in rule.iter() {
            let g = f.eval_grad(t, p);
            let gu = grad_u(m.map(p));
            total += w * m.jac_det() * ((gu[0] - g[0]).powi(2) + (gu[1] - g[1]).powi(2));
        }
    }
    let erule = edge_rule_clamped(2 * space.degree + 2);
    for (fi, facet) in mesh.facets.iter().enumerate() {
        let mut jump2 = 0.0;
        for (q, w) in erule.iter() {
            let x = facet.point(mesh, q[0]);
            let e0 = u(x) - f.eval(facet.first(), facet_ref_point(mesh, fi, 0, q[0]));
            let e1 = match facet.second() {
                Some(t1) => u(x) - f.eval(t1, facet_ref_point(mesh, fi, 1, q[0])),
                None => 0.0,
            };
            jump2 += w * (e0 - e1).powi(2);
        }
        total += sigma(fi) * jump2 * facet.length;
    }
    total.sqrt()
}
