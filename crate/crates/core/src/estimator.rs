//! Residual a posteriori indicators for the recovered solution `ℰ(u_h)`:
//! element residual and flux jumps of `ΠA∇ℰ(u_h)`, the diffusion
//! oscillation `‖(A − ΠA)∇ℰ(u_h)‖_T` and the scaled local stabilisation.

use std::io::Write;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::fespace::{facet_ref_point, l2_project_tensor, FeFunction, FeSpace};
use crate::forms::{local_stab_split, ProblemSpec, StabSpec};
use crate::mesh::Point;
use crate::quadrature::{edge_rule_clamped, tri_rule_clamped};
use crate::recovery::RecoveryOp;

#[derive(Debug, Clone)]
pub struct ErrorIndicators {
    /// `η_T`: residual plus (halved) interior flux-jump part.
    pub eta: Vec<f64>,
    /// The flux-jump share of `η_T²`.
    pub eta_jump_sq: Vec<f64>,
    /// `η_{A,T} = ‖(A − ΠA)∇ℰ(u_h)‖_T`.
    pub eta_a: Vec<f64>,
    /// `h_T^{2α} s_{h,T}(u_h, u_h)`.
    pub stab: Vec<f64>,
    pub total: f64,
}

impl ErrorIndicators {
    /// `(η_T² + h_T^{2α}s_{h,T} + η_{A,T}²)^{1/2}` per element, as used for marking.
    pub fn element_values(&self) -> Vec<f64> {
        (0..self.eta.len())
            .map(|t| (self.eta[t].powi(2) + self.stab[t] + self.eta_a[t].powi(2)).sqrt())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// CSV with columns `elem,eta,eta_A,stab,patch_ratio` (empty ratio if not given).
    pub fn write_csv<W: Write>(&self, patch_ratio: Option<&[f64]>, mut w: W) -> Result<()> {
        writeln!(w, "elem,eta,eta_A,stab,patch_ratio")?;
        for t in 0..self.len() {
            let ratio = patch_ratio.map(|r| format!("{:.17e}", r[t])).unwrap_or_default();
            writeln!(w, "{t},{:.17e},{:.17e},{:.17e},{ratio}", self.eta[t], self.eta_a[t], self.stab[t])?;
        }
        Ok(())
    }
}

/// Element-wise `P_{s−1}` projection of the diffusion tensor, or its exact
/// (constant) value.
enum ProjectedTensor {
    Constant([[f64; 2]; 2]),
    Projected([FeFunction; 4]),
}

impl ProjectedTensor {
    fn new(problem: &ProblemSpec, cg: &FeSpace) -> Result<Self> {
        if problem.constant_diffusion {
            let mesh = &cg.mesh;
            let x = if mesh.num_elements() > 0 { mesh.centroid(0) } else { [0.0; 2] };
            return Ok(Self::Constant((problem.diffusion)(x)));
        }
        let space = Arc::new(FeSpace::dg(&cg.mesh, cg.degree.saturating_sub(1))?);
        let a = Arc::clone(&problem.diffusion);
        Ok(Self::Projected(l2_project_tensor(&space, move |x| a(x))?))
    }

    fn value(&self, t: usize, xi: Point) -> [[f64; 2]; 2] {
        match self {
            Self::Constant(a) => *a,
            Self::Projected(c) => [[c[0].eval(t, xi), c[1].eval(t, xi)], [c[2].eval(t, xi), c[3].eval(t, xi)]],
        }
    }

    /// Divergence of the rows, `∂_j (ΠA)_{ij}`.
    fn row_divergence(&self, t: usize, xi: Point) -> [f64; 2] {
        match self {
            Self::Constant(_) => [0.0; 2],
            Self::Projected(c) => {
                let g: Vec<[f64; 2]> = c.iter().map(|f| f.eval_grad(t, xi)).collect();
                [g[0][0] + g[1][1], g[2][0] + g[3][1]]
            }
        }
    }
}

fn mat_vec(a: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

/// Indicators for the discrete solution `u_h` of the system built from `op`.
///
/// Only the data `A`, `f` of `problem` are read; an exact solution, if the
/// problem carries one, is never consulted.
pub fn compute_indicators(op: &RecoveryOp, u_h: &FeFunction, problem: &ProblemSpec, stab: &StabSpec) -> Result<ErrorIndicators> {
    let rec = op.apply(u_h)?;
    let cg = Arc::clone(&op.target);
    let mesh = Arc::clone(&cg.mesh);
    let pa = ProjectedTensor::new(problem, &cg)?;
    let nel = mesh.num_elements();
    let rule = tri_rule_clamped(2 * cg.degree + 4);

    let mut residual_sq = vec![0.0; nel];
    let mut eta_a = vec![0.0; nel];
    for t in 0..nel {
        let m = cg.map(t);
        let local = rec.local_coeffs(t);
        let h = mesh.elem_diameter[t];
        let (mut res, mut osc) = (0.0, 0.0);
        for (p, w) in rule.iter() {
            let x = m.map(p);
            let (_, grads) = cg.eval_basis(t, p);
            let hess = cg.eval_hessians(t, p);
            let mut g = [0.0; 2];
            let mut hs = [0.0; 3];
            for ((c, gr), hh) in local.iter().zip(&grads).zip(&hess) {
                g[0] += c * gr[0];
                g[1] += c * gr[1];
                hs.iter_mut().zip(hh).for_each(|(a, b)| *a += c * b);
            }
            let a_pi = pa.value(t, p);
            let div_a = pa.row_divergence(t, p);
            let div = div_a[0] * g[0]
                + div_a[1] * g[1]
                + a_pi[0][0] * hs[0]
                + (a_pi[0][1] + a_pi[1][0]) * hs[1]
                + a_pi[1][1] * hs[2];
            let wt = w * m.jac_det();
            res += wt * (h * ((problem.source)(x) + div)).powi(2);
            if !problem.constant_diffusion {
                let a = (problem.diffusion)(x);
                let d = mat_vec([[a[0][0] - a_pi[0][0], a[0][1] - a_pi[0][1]], [a[1][0] - a_pi[1][0], a[1][1] - a_pi[1][1]]], g);
                osc += wt * (d[0] * d[0] + d[1] * d[1]);
            }
        }
        residual_sq[t] = res;
        eta_a[t] = osc.sqrt();
    }

    let mut jump_sq = vec![0.0; nel];
    let erule = edge_rule_clamped(2 * cg.degree + 2);
    for (fi, facet) in mesh.facets.iter().enumerate() {
        let Some(t1) = facet.second() else { continue };
        let t0 = facet.first();
        let mut j2 = 0.0;
        for (q, w) in erule.iter() {
            let flux = |side: usize, t: usize| {
                let xi = facet_ref_point(&mesh, fi, side, q[0]);
                let fl = mat_vec(pa.value(t, xi), rec.eval_grad(t, xi));
                fl[0] * facet.normal[0] + fl[1] * facet.normal[1]
            };
            j2 += w * (flux(0, t0) - flux(1, t1)).powi(2);
        }
        let term = 0.5 * mesh.facet_h[fi] * j2 * facet.length;
        jump_sq[t0] += term;
        jump_sq[t1] += term;
    }

    let split = local_stab_split(op, u_h, problem, stab)?;
    let two_alpha = 2.0 * stab.alpha();
    let stab_terms: Vec<f64> = (0..nel).map(|t| mesh.elem_diameter[t].powf(two_alpha) * split[t]).collect();
    let eta: Vec<f64> = (0..nel).map(|t| (residual_sq[t] + jump_sq[t]).sqrt()).collect();
    let total = (0..nel).map(|t| eta[t].powi(2) + stab_terms[t] + eta_a[t].powi(2)).sum::<f64>().sqrt();
    Ok(ErrorIndicators { eta, eta_jump_sq: jump_sq, eta_a, stab: stab_terms, total })
}

/// Estimator over true energy error.
pub fn effectivity(ind: &ErrorIndicators, h1_error: f64) -> Result<f64> {
    if !(h1_error > 0.0) || !h1_error.is_finite() {
        return Err(invalid(format!("effectivity needs a positive finite error, got {h1_error}")));
    }
    Ok(ind.total / h1_error)
}

/// `‖√A∇(u − ℰu_h)‖²_T` per element.
pub fn element_energy_errors(recovered: &FeFunction, problem: &ProblemSpec, grad_u: impl Fn(Point) -> [f64; 2]) -> Vec<f64> {
    let space = &recovered.space;
    let rule = tri_rule_clamped((2 * space.degree + 2).max(6));
    (0..space.num_elements())
        .map(|t| {
            let m = space.map(t);
            rule.iter()
                .map(|(p, w)| {
                    let x = m.map(p);
                    let g = recovered.eval_grad(t, p);
                    let gu = grad_u(x);
                    let e = [gu[0] - g[0], gu[1] - g[1]];
                    let ae = mat_vec((problem.diffusion)(x), e);
                    w * m.jac_det() * (ae[0] * e[0] + ae[1] * e[1])
                })
                .sum()
        })
        .collect()
}

/// `η_T² / (‖√A∇(u − ℰu_h)‖²_{ω_T} + η_{A,T}²)` with `ω_T` = `T` and its facet
/// neighbours. A vanishing denominator gives 0 when `η_T` vanishes too, ∞ otherwise.
pub fn lower_bound_ratio(ind: &ErrorIndicators, recovered: &FeFunction, problem: &ProblemSpec) -> Result<Vec<f64>> {
    let grad_u = problem.exact_grad.as_ref().ok_or_else(|| invalid("lower bound ratio needs the exact gradient"))?;
    let mesh = &recovered.space.mesh;
    if ind.len() != mesh.num_elements() {
        return Err(invalid("indicators and mesh disagree in size"));
    }
    let local = element_energy_errors(recovered, problem, |x| grad_u(x));
    Ok((0..mesh.num_elements())
        .map(|t| {
            let patch: f64 = local[t] + mesh.facet_neighbors(t).iter().map(|&s| local[s]).sum::<f64>();
            let den = patch + ind.eta_a[t].powi(2);
            let num = ind.eta[t].powi(2);
            if den > 1e-28 {
                num / den
            } else if num <= 1e-20 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::error_norms;
    use crate::forms::StabSpec;
    use crate::mesh::{make_crisscross, Mesh, Rect};
    use crate::recovery::build_recovery;
    use crate::system::{build_rfem_system, solve};
    use std::f64::consts::PI;

    fn unit(n: usize) -> Arc<Mesh> {
        Arc::new(make_crisscross(n, Rect::UNIT).unwrap())
    }

    fn sine(scale: f64) -> ProblemSpec {
        ProblemSpec::poisson(move |p| scale * 2.0 * PI * PI * (PI * p[0]).sin() * (PI * p[1]).sin()).with_exact(
            move |p| scale * (PI * p[0]).sin() * (PI * p[1]).sin(),
            move |p| {
                [scale * PI * (PI * p[0]).cos() * (PI * p[1]).sin(), scale * PI * (PI * p[0]).sin() * (PI * p[1]).cos()]
            },
        )
    }

    fn solve_on(n: usize, r: usize, s: usize, problem: &ProblemSpec) -> (RecoveryOp, FeFunction, StabSpec) {
        let m = unit(n);
        let dg = Arc::new(FeSpace::dg(&m, r).unwrap());
        let cg = Arc::new(FeSpace::cg(&m, s).unwrap());
        let op = build_recovery(&dg, &cg).unwrap();
        let stab = StabSpec::facet_jump(1.0, 1.0).unwrap();
        let u = solve(&build_rfem_system(&op, problem, &stab).unwrap()).unwrap();
        (op, FeFunction::new(dg, u).unwrap(), stab)
    }

    #[test]
    fn zero_data_gives_zero_indicators() {
        let problem = ProblemSpec::poisson(|_| 0.0);
        let (op, _, stab) = solve_on(4, 0, 1, &problem);
        let ind = compute_indicators(&op, &FeFunction::zeros(Arc::clone(&op.source)), &problem, &stab).unwrap();
        assert_eq!(ind.total, 0.0);
        assert!(ind.element_values().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn p1_residual_is_data_only() {
        let problem = sine(1.0);
        let (op, u, stab) = solve_on(4, 0, 1, &problem);
        let ind = compute_indicators(&op, &u, &problem, &stab).unwrap();
        assert!(ind.eta_a.iter().all(|&e| e == 0.0));
        let mesh = &op.source.mesh;
        let rule = tri_rule_clamped(6);
        for t in 0..mesh.num_elements() {
            let m = op.target.map(t);
            let hf: f64 = rule.iter().map(|(p, w)| w * m.jac_det() * (mesh.elem_diameter[t] * (problem.source)(m.map(p))).powi(2)).sum();
            let eta2 = ind.eta[t].powi(2) - ind.eta_jump_sq[t];
            assert!((eta2 - hf).abs() < 1e-12 * hf.max(1e-300));
        }
    }

    #[test]
    fn facet_split_sums_to_global_jump_norm() {
        let problem = sine(1.0);
        let (op, u, stab) = solve_on(4, 1, 2, &problem);
        let ind = compute_indicators(&op, &u, &problem, &stab).unwrap();
        let rec = op.apply(&u).unwrap();
        let mesh = &op.target.mesh;
        let rule = edge_rule_clamped(6);
        let global: f64 = mesh
            .facets
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.is_boundary)
            .map(|(fi, f)| {
                let t1 = f.second().unwrap();
                let j2: f64 = rule
                    .iter()
                    .map(|(q, w)| {
                        let g0 = rec.eval_grad(f.first(), facet_ref_point(mesh, fi, 0, q[0]));
                        let g1 = rec.eval_grad(t1, facet_ref_point(mesh, fi, 1, q[0]));
                        w * ((g0[0] - g1[0]) * f.normal[0] + (g0[1] - g1[1]) * f.normal[1]).powi(2)
                    })
                    .sum();
                mesh.facet_h[fi] * j2 * f.length
            })
            .sum();
        let split: f64 = ind.eta_jump_sq.iter().sum();
        assert!((split - global).abs() < 1e-12 * global);
    }

    #[test]
    fn variable_diffusion_oscillation() {
        let problem = sine(1.0).with_diffusion(|p| [[1.0 + p[0] * p[0], 0.0], [0.0, 1.0 + p[1]]], false);
        let (op, u, stab) = solve_on(4, 0, 1, &problem);
        let ind = compute_indicators(&op, &u, &problem, &stab).unwrap();
        assert!(ind.eta_a.iter().all(|&e| e >= 0.0));
        assert!(ind.eta_a.iter().any(|&e| e > 0.0));
        let total2: f64 = ind.element_values().iter().map(|e| e * e).sum();
        assert!((total2.sqrt() - ind.total).abs() < 1e-12 * ind.total);
    }

    #[test]
    fn effectivity_is_homogeneous_and_bounded() {
        let mut ratios = Vec::new();
        for n in [4, 8, 16, 32] {
            let mut eff = Vec::new();
            for scale in [1.0, 2.0] {
                let problem = sine(scale);
                let (op, u, stab) = solve_on(n, 0, 1, &problem);
                let ind = compute_indicators(&op, &u, &problem, &stab).unwrap();
                let rec = op.apply(&u).unwrap();
                let (_, h1) = error_norms(&rec, problem.exact.as_ref().unwrap().as_ref(), problem.exact_grad.as_ref().unwrap().as_ref());
                eff.push(effectivity(&ind, h1).unwrap());
            }
            assert!((eff[0] - eff[1]).abs() < 1e-9 * eff[0]);
            ratios.push(eff[0]);
        }
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi / lo < 2.0, "{ratios:?}");
        assert!(effectivity(&ErrorIndicators { eta: vec![], eta_jump_sq: vec![], eta_a: vec![], stab: vec![], total: 1.0 }, 0.0).is_err());
    }

    #[test]
    fn patch_ratio_finite_for_exact_recovery() {
        let problem = ProblemSpec::poisson(|p| 2.0 * (p[0] * (1.0 - p[0]) + p[1] * (1.0 - p[1])))
            .with_exact(|p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]), |p| {
                [(1.0 - 2.0 * p[0]) * p[1] * (1.0 - p[1]), p[0] * (1.0 - p[0]) * (1.0 - 2.0 * p[1])]
            });
        let (op, u, stab) = solve_on(2, 2, 2, &problem);
        let ind = compute_indicators(&op, &u, &problem, &stab).unwrap();
        let rec = op.apply(&u).unwrap();
        let ratio = lower_bound_ratio(&ind, &rec, &problem).unwrap();
        assert!(ratio.iter().all(|r| r.is_finite() && *r >= 0.0));
        let mesh = &op.source.mesh;
        let inner = (0..mesh.num_elements()).find(|&t| mesh.elem_facets[t].iter().all(|&f| !mesh.facets[f].is_boundary)).unwrap();
        assert_eq!(mesh.facet_neighbors(inner).len() + 1, 4);
        assert!(lower_bound_ratio(&ind, &rec, &ProblemSpec::poisson(|_| 1.0)).is_err());

        // Exact discrete solution (u = 0, f = 0): 0/0 is reported as 0, not NaN.
        let zero = ProblemSpec::poisson(|_| 0.0).with_exact(|_| 0.0, |_| [0.0; 2]);
        let u0 = FeFunction::zeros(Arc::clone(&op.source));
        let ind = compute_indicators(&op, &u0, &zero, &stab).unwrap();
        let ratio = lower_bound_ratio(&ind, &op.apply(&u0).unwrap(), &zero).unwrap();
        assert!(ratio.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn csv_export() {
        let ind = ErrorIndicators { eta: vec![1.0], eta_jump_sq: vec![0.0], eta_a: vec![0.0], stab: vec![0.5], total: 1.5f64.sqrt() };
        let mut out = Vec::new();
        ind.write_csv(Some(&[2.0]), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("elem,eta,eta_A,stab,patch_ratio"));
        let fields: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(fields, vec![0.0, 1.0, 0.0, 0.5, 2.0]);
    }
}
