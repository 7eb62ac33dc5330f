//! SOLVE → ESTIMATE → MARK → REFINE with maximum-strategy marking.

use std::io::Write;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::estimator::{compute_indicators, effectivity};
use crate::fespace::{error_norms, FeFunction, FeSpace};
use crate::forms::{ProblemSpec, StabSpec};
use crate::mesh::Mesh;
use crate::recovery::build_recovery;
use crate::system::{build_rfem_system, solve};

/// `{T : η_T ≥ θ max η}`.
pub fn mark_maximum(etas: &[f64], theta: f64) -> Result<Vec<usize>> {
    if etas.is_empty() {
        return Err(invalid("no indicators to mark"));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(invalid(format!("marking ratio must lie in (0, 1], got {theta}")));
    }
    let max = etas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(invalid("indicators must be finite"));
    }
    let threshold = theta * max;
    Ok((0..etas.len()).filter(|&t| etas[t] >= threshold).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptRecord {
    pub iteration: usize,
    pub ndof: usize,
    pub ndof_conforming: usize,
    pub error: Option<f64>,
    pub estimator: f64,
    pub effectivity: Option<f64>,
    pub nelems: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptConfig {
    pub r: usize,
    pub s: usize,
    pub stab: StabSpec,
    pub theta: f64,
    /// Number of refinement steps; the loop solves at most `max_iter + 1` times.
    pub max_iter: usize,
    pub tol: f64,
}

impl AdaptConfig {
    pub fn new(r: usize, s: usize, stab: StabSpec) -> Self {
        Self { r, s, stab, theta: 0.25, max_iter: 25, tol: 1e-3 }
    }
}

#[derive(Debug)]
pub struct AdaptRun {
    pub records: Vec<AdaptRecord>,
    /// Mesh of the last solve.
    pub mesh: Arc<Mesh>,
    /// Discrete solution on the last mesh.
    pub solution: Option<FeFunction>,
    /// Set when a solve failed part-way; `records` holds the history so far.
    pub failure: Option<Error>,
}

pub fn adapt_loop(mesh: Mesh, problem: &ProblemSpec, cfg: &AdaptConfig) -> Result<AdaptRun> {
    adapt_loop_with(mesh, problem, cfg, |_, _| Ok(()))
}

/// As [`adapt_loop`], calling `observe(iteration, mesh)` before each solve.
pub fn adapt_loop_with(
    mesh: Mesh,
    problem: &ProblemSpec,
    cfg: &AdaptConfig,
    mut observe: impl FnMut(usize, &Mesh) -> Result<()>,
) -> Result<AdaptRun> {
    if !(cfg.theta > 0.0 && cfg.theta <= 1.0) {
        return Err(invalid(format!("marking ratio must lie in (0, 1], got {}", cfg.theta)));
    }
    let mut mesh = Arc::new(mesh);
    let mut run = AdaptRun { records: Vec::new(), mesh: Arc::clone(&mesh), solution: None, failure: None };
    for iteration in 0..=cfg.max_iter {
        observe(iteration, &mesh)?;
        let step = || -> Result<(AdaptRecord, FeFunction, Vec<f64>)> {
            let dg = Arc::new(FeSpace::dg(&mesh, cfg.r)?);
            let cg = Arc::new(FeSpace::cg(&mesh, cfg.s)?);
            let op = build_recovery(&dg, &cg)?;
            let u = FeFunction::new(Arc::clone(&dg), solve(&build_rfem_system(&op, problem, &cfg.stab)?)?)?;
            let ind = compute_indicators(&op, &u, problem, &cfg.stab)?;
            let error = match (&problem.exact, &problem.exact_grad) {
                (Some(e), Some(g)) => Some(error_norms(&op.apply(&u)?, |x| e(x), |x| g(x)).1),
                _ => None,
            };
            let eff = match error {
                Some(e) if e > 0.0 => Some(effectivity(&ind, e)?),
                _ => None,
            };
            let record = AdaptRecord {
                iteration,
                ndof: dg.ndof,
                ndof_conforming: cg.interior_dofs().len(),
                error,
                estimator: ind.total,
                effectivity: eff,
                nelems: mesh.num_elements(),
            };
            Ok((record, u, ind.element_values()))
        };
        let (record, u, etas) = match step() {
            Ok(v) => v,
            Err(e) if !run.records.is_empty() => {
                run.failure = Some(e);
                return Ok(run);
            }
            Err(e) => return Err(e),
        };
        let done = record.estimator < cfg.tol || iteration == cfg.max_iter;
        run.records.push(record);
        run.mesh = Arc::clone(&mesh);
        run.solution = Some(u);
        if done {
            break;
        }
        let marked = mark_maximum(&etas, cfg.theta)?;
        mesh = Arc::new(mesh.refine(&marked));
    }
    Ok(run)
}

/// CSV with columns `iter,ndof,error,estimator,effectivity,nelems`.
pub fn write_records_csv<W: Write>(records: &[AdaptRecord], mut w: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    writeln!(w, "iter,ndof,error,estimator,effectivity,nelems")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{:.17e},{},{}",
            r.iteration,
            r.ndof,
            opt(r.error),
            r.estimator,
            opt(r.effectivity),
            r.nelems
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_crisscross, Rect};
    use std::f64::consts::PI;

    #[test]
    fn maximum_marking() {
        assert_eq!(mark_maximum(&[1.0, 0.3, 0.2, 0.1], 0.25).unwrap(), vec![0, 1]);
        assert_eq!(mark_maximum(&[0.5, 2.0, 2.0, 1.0], 1.0).unwrap(), vec![1, 2]);
        assert_eq!(mark_maximum(&[0.7; 5], 0.25).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(mark_maximum(&[], 0.5).is_err());
        assert!(mark_maximum(&[1.0], 0.0).is_err());
        assert!(mark_maximum(&[1.0], 1.5).is_err());
    }

    #[test]
    fn marked_elements_are_refined() {
        let mesh = make_crisscross(4, Rect::UNIT).unwrap();
        let marked = vec![3, 17, 40];
        let (fine, parents) = mesh.refine_with_parents(&marked);
        for &m in &marked {
            assert!(parents.iter().filter(|&&p| p == m).count() >= 2);
        }
        assert!(fine.num_elements() > mesh.num_elements());
    }

    fn sine() -> ProblemSpec {
        ProblemSpec::poisson(|p| 2.0 * PI * PI * (PI * p[0]).sin() * (PI * p[1]).sin()).with_exact(
            |p| (PI * p[0]).sin() * (PI * p[1]).sin(),
            |p| [PI * (PI * p[0]).cos() * (PI * p[1]).sin(), PI * (PI * p[0]).sin() * (PI * p[1]).cos()],
        )
    }

    #[test]
    fn infinite_tolerance_stops_after_first_estimate() {
        let mut cfg = AdaptConfig::new(0, 1, StabSpec::facet_jump(1.0, 1.0).unwrap());
        cfg.tol = f64::INFINITY;
        let run = adapt_loop(make_crisscross(2, Rect::UNIT).unwrap(), &sine(), &cfg).unwrap();
        assert_eq!(run.records.len(), 1);
        assert!(run.failure.is_none());
    }

    #[test]
    fn loop_grows_ndof_and_reports() {
        let mut cfg = AdaptConfig::new(0, 1, StabSpec::facet_jump(1.0, 1.0).unwrap());
        cfg.max_iter = 4;
        let mut seen = Vec::new();
        let run = adapt_loop_with(make_crisscross(2, Rect::UNIT).unwrap(), &sine(), &cfg, |i, m| {
            seen.push((i, m.num_elements()));
            Ok(())
        })
        .unwrap();
        assert_eq!(run.records.len(), 5);
        assert_eq!(seen.len(), 5);
        assert!(run.records.windows(2).all(|w| w[1].ndof > w[0].ndof));
        assert!(run.records.iter().all(|r| r.error.is_some() && r.effectivity.is_some()));
        let mut out = Vec::new();
        write_records_csv(&run.records, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("iter,ndof,error,estimator,effectivity,nelems"));
        assert_eq!(text.lines().count(), 6);
    }
}
