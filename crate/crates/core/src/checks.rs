//! Pass/fail checks of the benchmark suite against the expected rates,
//! identities and orderings. Each check runs its own computations with fixed
//! seeds and reports a one-line verdict.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bench::{self, fit_loglog_slope, test1_problem, unit_square, Field};
use crate::error::Result;
use crate::estimator::{compute_indicators, lower_bound_ratio};
use crate::fespace::{error_norms, FeFunction, FeSpace};
use crate::forms::{assemble_upwind, local_stab_split, StabSpec};
use crate::mesh::{make_crisscross, Rect};
use crate::recovery::{build_recovery, kp_ratio, recovery_rank};
use crate::system::{build_rfem_system, dg_equivalence_gap, fem_equivalence_gap};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict} criterion {:>2} ({}): {}", self.id, self.name, self.detail)
    }
}

fn outcome(id: usize, name: &'static str, pass: bool, detail: String) -> CheckOutcome {
    CheckOutcome { id, name, pass, detail }
}

fn within(x: Option<f64>, target: f64, tol: f64) -> bool {
    x.is_some_and(|v| (v - target).abs() <= tol)
}

pub const RUNTIME_LIMIT_SECS: f64 = 120.0;

/// Smooth-solution rates on criss-cross levels 4..64, with the total wall time.
pub fn rates_smooth() -> Result<CheckOutcome> {
    // (r, s, σ exponent, expected H1 rate)
    let cases = [(0, 1, 1.0, 1.0), (1, 2, 2.0, 2.0), (2, 3, 3.0, 3.0), (1, 3, 3.0, 1.0)];
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (r, s, p, rate) in cases {
        let t = bench::run_test1(r, s, &StabSpec::facet_jump(1.0, p)?, &bench::DEFAULT_LEVELS)?;
        let (h1, l2) = (t.terminal_h1_eoc(), t.terminal_l2_eoc());
        let ok = within(h1, rate, 0.15) && within(l2, rate + 1.0, 0.2);
        pass &= ok;
        parts.push(format!("(r={r},s={s},h^{p}) H1 {:.3} L2 {:.3}", h1.unwrap_or(f64::NAN), l2.unwrap_or(f64::NAN)));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < RUNTIME_LIMIT_SECS;
    parts.push(format!("{secs:.1}s"));
    Ok(outcome(1, "smooth rates", pass, parts.join("; ")))
}

pub fn fem_equivalence() -> Result<CheckOutcome> {
    let mesh = Arc::new(unit_square(8)?);
    let problem = test1_problem();
    let mut worst: f64 = 0.0;
    for degree in [1, 2] {
        for c in [0.01, 1.0, 100.0] {
            worst = worst.max(fem_equivalence_gap(&mesh, degree, &problem, c)?);
        }
    }
    Ok(outcome(2, "FEM equivalence", worst < 1e-9, format!("max |E(u_h) - u_FEM| = {worst:.3e}")))
}

pub fn dg_degeneration() -> Result<CheckOutcome> {
    let mesh = Arc::new(unit_square(4)?);
    let problem = test1_problem();
    let (mut mat, mut rhs): (f64, f64) = (0.0, 0.0);
    for degree in [1, 2] {
        let dg = Arc::new(FeSpace::dg(&mesh, degree)?);
        for theta in [1.0, -1.0, 0.0] {
            let (m, b) = dg_equivalence_gap(&dg, &problem, &StabSpec::interior_penalty(10.0, theta)?)?;
            mat = mat.max(m);
            rhs = rhs.max(b);
        }
    }
    let pass = mat <= 1e-13 && rhs <= 1e-13;
    Ok(outcome(3, "dG degeneration", pass, format!("matrix gap {mat:.3e}, rhs gap {rhs:.3e}")))
}

/// `wᵀ𝔄w` against `‖√A∇ℰw‖² + s_h(w, w)` computed by quadrature.
pub fn coercivity_identity() -> Result<CheckOutcome> {
    let problem = test1_problem();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for n in [4, 8] {
        let mesh = Arc::new(unit_square(n)?);
        for (r, s) in [(0, 1), (1, 2)] {
            let dg = Arc::new(FeSpace::dg(&mesh, r)?);
            let cg = Arc::new(FeSpace::cg(&mesh, s)?);
            let op = build_recovery(&dg, &cg)?;
            for stab in [StabSpec::facet_jump(1.0, 1.0)?, StabSpec::volume(1.0, 1.0)?] {
                let a = build_rfem_system(&op, &problem, &stab)?.matrix;
                for _ in 0..100 {
                    let w: Vec<f64> = (0..dg.ndof).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let lhs = a.bilinear(&w, &w);
                    let wf = FeFunction::new(Arc::clone(&dg), w)?;
                    let energy = error_norms(&op.apply(&wf)?, |_| 0.0, |_| [0.0; 2]).1.powi(2);
                    let rhs = energy + local_stab_split(&op, &wf, &problem, &stab)?.iter().sum::<f64>();
                    worst = worst.max((lhs - rhs).abs() / rhs.abs());
                }
            }
        }
    }
    Ok(outcome(4, "coercivity identity", worst < 1e-11, format!("max relative error {worst:.3e} over 1600 samples")))
}

pub fn conditioning() -> Result<CheckOutcome> {
    let levels = [4, 8, 16, 32];
    let series: Vec<bench::ConditionSeries> =
        [0.0, 1.0, 3.0].par_iter().map(|&a| bench::run_condition(a, 1.0, &levels)).collect::<Result<_>>()?;
    let finest = |s: &bench::ConditionSeries| s.points.last().map_or(f64::NAN, |p| p.2);
    let slopes_ok = series[..2].iter().all(|s| (0.7..=1.3).contains(&s.exponent));
    let ordering_ok = finest(&series[2]) > finest(&series[0]) && finest(&series[2]) > finest(&series[1]);
    let detail = series
        .iter()
        .map(|s| format!("alpha={}: slope {:.3}, kappa(n=32) {:.3e}", s.alpha, s.exponent, finest(s)))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(outcome(5, "conditioning", slopes_ok && ordering_ok, detail))
}

pub fn surjectivity() -> Result<CheckOutcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [2, 4, 8] {
        let mesh = Arc::new(unit_square(n)?);
        let dg = Arc::new(FeSpace::dg(&mesh, 0)?);
        let cg = Arc::new(FeSpace::cg(&mesh, 1)?);
        let rank = recovery_rank(&build_recovery(&dg, &cg)?)?;
        let interior = cg.interior_dofs().len();
        pass &= rank == interior;
        parts.push(format!("n={n}: rank {rank} / interior {interior}"));
    }
    Ok(outcome(6, "recovery surjectivity", pass, parts.join("; ")))
}

/// Largest `kp_ratio` over random P0 functions, per level.
pub fn kp_maxima(alpha: u32, levels: &[usize], samples: usize, seed: u64) -> Result<Vec<f64>> {
    levels
        .iter()
        .map(|&n| {
            let mesh = Arc::new(unit_square(n)?);
            let dg = Arc::new(FeSpace::dg(&mesh, 0)?);
            let cg = Arc::new(FeSpace::cg(&mesh, 1)?);
            let op = build_recovery(&dg, &cg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + n as u64);
            let mut best: f64 = 0.0;
            for _ in 0..samples {
                let v: Vec<f64> = (0..dg.ndof).map(|_| rng.gen_range(-1.0..1.0)).collect();
                best = best.max(kp_ratio(&op, &FeFunction::new(Arc::clone(&dg), v)?, alpha)?);
            }
            Ok(best)
        })
        .collect()
}

pub fn kp_stability() -> Result<CheckOutcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for alpha in [0, 1] {
        let m = kp_maxima(alpha, &[4, 8, 16], 100, 77)?;
        let (lo, hi) = m.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        pass &= hi < 2.0 * lo;
        parts.push(format!("alpha={alpha}: {}", m.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")));
    }
    Ok(outcome(7, "KP stability", pass, parts.join("; ")))
}

/// Band width `max/min` allowed for effectivity indices.
pub const EFFECTIVITY_BAND: f64 = 2.0;

fn band(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)))
}

pub fn a_posteriori() -> Result<CheckOutcome> {
    let problem = test1_problem();
    let stab = StabSpec::facet_jump(1.0, 1.0)?;
    let grad = problem.exact_grad.clone().expect("test 1 has an exact gradient");
    let u = problem.exact.clone().expect("test 1 has an exact solution");
    let per_level: Vec<(f64, f64)> = [4, 8, 16, 32]
        .par_iter()
        .map(|&n| {
            let mesh = Arc::new(make_crisscross(n, Rect::UNIT)?);
            let sol = bench::solve_rfem(&mesh, 0, 1, &problem, &stab)?;
            let ind = compute_indicators(&sol.op, &sol.u, &problem, &stab)?;
            let err = error_norms(&sol.recovered, |x| u(x), |x| grad(x)).1;
            let lb = lower_bound_ratio(&ind, &sol.recovered, &problem)?;
            Ok((err / ind.total, lb.iter().copied().fold(0.0, f64::max)))
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = per_level.iter().map(|p| p.0).collect();
    let lbs: Vec<f64> = per_level.iter().map(|p| p.1).collect();
    let (rlo, rhi) = band(&ratios);
    let (llo, lhi) = band(&lbs);
    let ratio_ok = rhi < EFFECTIVITY_BAND * rlo;
    let lb_ok = lhi.is_finite() && lhi < EFFECTIVITY_BAND * llo;

    let run = bench::run_test3(&bench::test3_config(stab))?;
    let eff: Vec<f64> = run.records.iter().filter_map(|r| r.effectivity).collect();
    let (elo, ehi) = band(&eff);
    let adapt_ok = run.failure.is_none() && eff.len() == run.records.len() && ehi < EFFECTIVITY_BAND * elo;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    Ok(outcome(
        8,
        "a posteriori",
        ratio_ok && lb_ok && adapt_ok,
        format!(
            "error/estimator [{}]; max lower-bound ratio [{}]; adaptive effectivity in [{elo:.3}, {ehi:.3}] over {} solves",
            fmt(&ratios),
            fmt(&lbs),
            eff.len()
        ),
    ))
}

/// Iterations discarded before fitting the adaptive slope (pre-asymptotic phase).
pub const ADAPT_FIT_SKIP: usize = 3;

pub fn adaptive_optimality() -> Result<CheckOutcome> {
    let stab = StabSpec::facet_jump(1.0, 1.0)?;
    let (run, uniform) = rayon::join(
        || bench::run_test3(&bench::test3_config(stab)),
        || bench::run_test2(&stab, &[4, 8, 16, 32, 64]),
    );
    let (run, uniform) = (run?, uniform?);
    let tail: Vec<_> = run.records.iter().skip(ADAPT_FIT_SKIP).filter(|r| r.error.is_some()).collect();
    let slope = fit_loglog_slope(
        &tail.iter().map(|r| r.ndof as f64).collect::<Vec<_>>(),
        &tail.iter().map(|r| r.error.unwrap_or(f64::NAN)).collect::<Vec<_>>(),
    );
    let eoc = uniform.terminal_h1_eoc();
    let pass = run.failure.is_none() && (-0.65..=-0.35).contains(&slope) && within(eoc, 2.0 / 3.0, 0.15);
    Ok(outcome(
        9,
        "adaptive optimality",
        pass,
        format!("adaptive slope {slope:.3} in ndof; uniform H1 EOC {:.3} in h", eoc.unwrap_or(f64::NAN)),
    ))
}

pub fn convection_stability() -> Result<CheckOutcome> {
    let rep = bench::run_test4b(1e-3, bench::TEST4B_N, 1.0)?;
    let mesh = Arc::new(unit_square(8)?);
    let dg = FeSpace::dg(&mesh, 0)?;
    let min_eig = assemble_upwind(&dg, bench::convection_field(Field::A))?.min_symmetric_part_eigenvalue()?;
    let pass = rep.rfem.finite && rep.dg.finite && rep.rfem.overshoot < rep.dg.overshoot && min_eig >= -1e-10;
    Ok(outcome(
        10,
        "convection stability",
        pass,
        format!(
            "n={} eps=1e-3: R-FEM overshoot {:.3e} (range [{:.4}, {:.4}]), dG overshoot {:.3e} (range [{:.4}, {:.4}]); min eig of sym(C) {min_eig:.3e}",
            rep.n, rep.rfem.overshoot, rep.rfem.min, rep.rfem.max, rep.dg.overshoot, rep.dg.min, rep.dg.max
        ),
    ))
}

/// All checks in order; a check that errors is reported as a failure.
pub fn run_all() -> Vec<CheckOutcome> {
    let checks: [(usize, &'static str, fn() -> Result<CheckOutcome>); 10] = [
        (1, "smooth rates", rates_smooth),
        (2, "FEM equivalence", fem_equivalence),
        (3, "dG degeneration", dg_degeneration),
        (4, "coercivity identity", coercivity_identity),
        (5, "conditioning", conditioning),
        (6, "recovery surjectivity", surjectivity),
        (7, "KP stability", kp_stability),
        (8, "a posteriori", a_posteriori),
        (9, "adaptive optimality", adaptive_optimality),
        (10, "convection stability", convection_stability),
    ];
    checks
        .into_iter()
        .map(|(id, name, f)| f().unwrap_or_else(|e| outcome(id, name, false, format!("error: {e}"))))
        .collect()
}
