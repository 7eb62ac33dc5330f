//! Benchmark problems, convergence tables and their CSV/SVG output.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::adapt::{adapt_loop, AdaptConfig, AdaptRun};
use crate::error::{invalid, Error, Result};
use crate::fespace::{dg_norm_of_error, error_norms, FeFunction, FeSpace};
use crate::forms::{ProblemSpec, StabSpec};
use crate::mesh::{make_crisscross, make_lshape, Mesh, Point, Rect};
use crate::recovery::{build_recovery, RecoveryOp};
use crate::system::{build_ip_dg_system, build_rfem_system, condition_estimate, solve};

pub const DEFAULT_LEVELS: [usize; 5] = [4, 8, 16, 32, 64];

/// `log(e_{i−1}/e_i) / log(h_{i−1}/h_i)` for consecutive pairs.
pub fn eoc(errors: &[f64], hs: &[f64]) -> Vec<f64> {
    errors
        .windows(2)
        .zip(hs.windows(2))
        .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub level: usize,
    pub h: f64,
    pub ndof: usize,
    pub l2: f64,
    pub h1: f64,
    pub dg: Option<f64>,
    pub l2_eoc: Option<f64>,
    pub h1_eoc: Option<f64>,
    pub kappa: Option<f64>,
}

impl ConvergenceRow {
    pub fn new(level: usize, h: f64, ndof: usize, l2: f64, h1: f64) -> Self {
        Self { level, h, ndof, l2, h1, dg: None, l2_eoc: None, h1_eoc: None, kappa: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTable {
    /// Comment lines describing how the table was produced.
    pub provenance: Vec<String>,
    pub rows: Vec<ConvergenceRow>,
}

const COLUMNS: [&str; 9] = ["level", "h", "ndof", "l2_error", "h1_error", "dg_error", "l2_eoc", "h1_eoc", "kappa"];

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

impl ConvergenceTable {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self { provenance: vec![provenance.into()], rows: Vec::new() }
    }

    /// Appends a row, filling in its EOCs from the previous one.
    pub fn push(&mut self, mut row: ConvergenceRow) -> Result<()> {
        if let Some(prev) = self.rows.last() {
            if !(row.h < prev.h) {
                return Err(invalid(format!("mesh sizes must decrease: {} after {}", row.h, prev.h)));
            }
            row.l2_eoc = Some(eoc(&[prev.l2, row.l2], &[prev.h, row.h])[0]);
            row.h1_eoc = Some(eoc(&[prev.h1, row.h1], &[prev.h, row.h])[0]);
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn from_rows(provenance: impl Into<String>, mut rows: Vec<ConvergenceRow>) -> Result<Self> {
        rows.sort_by(|a, b| b.h.total_cmp(&a.h));
        let mut t = Self::new(provenance);
        for r in rows {
            t.push(r)?;
        }
        Ok(t)
    }

    pub fn terminal_l2_eoc(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.l2_eoc)
    }

    pub fn terminal_h1_eoc(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.h1_eoc)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for line in &self.provenance {
            writeln!(w, "# {line}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        out.write_record(COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                r.level.to_string(),
                fmt_f(r.h),
                r.ndof.to_string(),
                fmt_f(r.l2),
                fmt_f(r.h1),
                fmt_opt(r.dg),
                fmt_opt(r.l2_eoc),
                fmt_opt(r.h1_eoc),
                fmt_opt(r.kappa),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut text = String::new();
        let mut r = r;
        r.read_to_string(&mut text)?;
        let provenance = text.lines().filter_map(|l| l.strip_prefix("# ")).map(str::to_owned).collect();
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let parse_err = |e: &dyn std::fmt::Display| Error::Parse(e.to_string());
        let header = reader.headers().map_err(|e| parse_err(&e))?.clone();
        if header.iter().collect::<Vec<_>>() != COLUMNS {
            return Err(Error::Parse(format!("unexpected CSV header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| parse_err(&e))?;
            let f = |i: usize| -> Result<f64> { rec[i].parse().map_err(|e| parse_err(&e)) };
            let opt = |i: usize| -> Result<Option<f64>> {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    rec[i].parse().map(Some).map_err(|e| parse_err(&e))
                }
            };
            rows.push(ConvergenceRow {
                level: rec[0].parse().map_err(|e| parse_err(&e))?,
                h: f(1)?,
                ndof: rec[2].parse().map_err(|e| parse_err(&e))?,
                l2: f(3)?,
                h1: f(4)?,
                dg: opt(5)?,
                l2_eoc: opt(6)?,
                h1_eoc: opt(7)?,
                kappa: opt(8)?,
            });
        }
        Ok(Self { provenance, rows })
    }

    /// Log–log chart of the errors against `ndof`, with reference triangles for the
    /// given slopes (in `ndof`, e.g. `−1/2` for first order in `h` in 2D).
    pub fn to_svg(&self, title: &str, ref_slopes: &[f64]) -> String {
        let (w, h, pad) = (640.0, 480.0, 60.0);
        let mut series: Vec<(&str, &str, Vec<(f64, f64)>)> = vec![
            ("L2", "#1f77b4", self.rows.iter().map(|r| (r.ndof as f64, r.l2)).collect()),
            ("H1", "#d62728", self.rows.iter().map(|r| (r.ndof as f64, r.h1)).collect()),
        ];
        if self.rows.iter().all(|r| r.dg.is_some()) && !self.rows.is_empty() {
            series.push(("dG", "#2ca02c", self.rows.iter().map(|r| (r.ndof as f64, r.dg.unwrap_or(0.0))).collect()));
        }
        let pts: Vec<(f64, f64)> = series
            .iter()
            .flat_map(|s| s.2.iter().copied())
            .filter(|&(x, y)| x > 0.0 && y > 0.0 && y.is_finite())
            .collect();
        let mut svg = String::new();
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, xml_escape(title));
        if pts.is_empty() {
            svg.push_str("</svg>\n");
            return svg;
        }
        let lx = |x: f64| x.log10();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &pts {
            x0 = x0.min(lx(x));
            x1 = x1.max(lx(x));
            y0 = y0.min(lx(y));
            y1 = y1.max(lx(y));
        }
        let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
        let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
        let sx = |x: f64| pad + (lx(x) - x0) / (x1 - x0) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (lx(y) - y0) / (y1 - y0) * (h - 2.0 * pad);
        let _ = writeln!(
            svg,
            r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            w - 2.0 * pad,
            h - 2.0 * pad
        );
        for d in x0 as i32..=x1 as i32 {
            let x = sx(10f64.powi(d));
            let _ = writeln!(svg, r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-size="12">1e{d}</text>"#, h - pad + 18.0);
        }
        for d in y0 as i32..=y1 as i32 {
            let y = sy(10f64.powi(d));
            let _ = writeln!(svg, r#"<text x="{}" y="{y:.1}" text-anchor="end" font-size="12">1e{d}</text>"#, pad - 6.0);
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">ndof</text>"#, w / 2.0, h - 12.0);
        for (i, (name, colour, s)) in series.iter().enumerate() {
            let coords: Vec<String> =
                s.iter().filter(|p| p.1 > 0.0).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, coords.join(" "));
            let ly = pad + 16.0 + 16.0 * i as f64;
            let _ = writeln!(svg, r#"<text x="{}" y="{ly}" font-size="12" fill="{colour}">{name}</text>"#, w - pad - 40.0);
        }
        // Reference triangles anchored below the last H1 point.
        if let Some(&(xe, ye)) = series[1].2.last() {
            let xs = xe / 4.0;
            for (k, &slope) in ref_slopes.iter().enumerate() {
                let yb = ye * 0.5f64.powi(k as i32 + 1);
                let ys = yb * (xs / xe).powf(slope);
                let _ = writeln!(
                    svg,
                    r#"<polygon fill="none" stroke="gray" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}"/>"#,
                    sx(xs),
                    sy(ys),
                    sx(xe),
                    sy(yb),
                    sx(xs),
                    sy(yb)
                );
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="gray" text-anchor="end">{slope:.2}</text>"#,
                    sx(xs) - 4.0,
                    0.5 * (sy(ys) + sy(yb))
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// Problems

/// `u = sin(πx) sin(πy)` on the unit square, `A = I`.
pub fn test1_problem() -> ProblemSpec {
    ProblemSpec::poisson(|p| 2.0 * PI * PI * (PI * p[0]).sin() * (PI * p[1]).sin()).with_exact(sine_u, sine_grad)
}

fn sine_u(p: Point) -> f64 {
    (PI * p[0]).sin() * (PI * p[1]).sin()
}

fn sine_grad(p: Point) -> [f64; 2] {
    [PI * (PI * p[0]).cos() * (PI * p[1]).sin(), PI * (PI * p[0]).sin() * (PI * p[1]).cos()]
}

/// Polar angle in `[0, 2π)`.
fn angle(p: Point) -> f64 {
    let t = p[1].atan2(p[0]);
    if t < 0.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

/// `φ = r^{2/3} sin(2θ/3)`, harmonic away from the origin.
pub fn corner_phi(p: Point) -> f64 {
    let r = p[0].hypot(p[1]);
    r.powf(2.0 / 3.0) * (2.0 * angle(p) / 3.0).sin()
}

/// `∇φ = (2/3) r^{−1/3} (−sin(θ/3), cos(θ/3))`.
pub fn corner_phi_grad(p: Point) -> [f64; 2] {
    let r = p[0].hypot(p[1]);
    if r == 0.0 {
        return [0.0; 2];
    }
    let (s, c) = (angle(p) / 3.0).sin_cos();
    let k = 2.0 / 3.0 * r.powf(-1.0 / 3.0);
    [-k * s, k * c]
}

/// L-shape problem: `u = φψ` with `ψ = (x²−1)(y²−1)`, `f = −(2∇φ·∇ψ + φΔψ)`.
pub fn test2_problem() -> ProblemSpec {
    let psi = |p: Point| (p[0] * p[0] - 1.0) * (p[1] * p[1] - 1.0);
    let psi_grad = |p: Point| [2.0 * p[0] * (p[1] * p[1] - 1.0), 2.0 * p[1] * (p[0] * p[0] - 1.0)];
    let psi_lap = |p: Point| 2.0 * (p[1] * p[1] - 1.0) + 2.0 * (p[0] * p[0] - 1.0);
    ProblemSpec::poisson(move |p| {
        let (gf, gp) = (corner_phi_grad(p), psi_grad(p));
        -(2.0 * (gf[0] * gp[0] + gf[1] * gp[1]) + corner_phi(p) * psi_lap(p))
    })
    .with_exact(
        move |p| corner_phi(p) * psi(p),
        move |p| {
            let (gf, gp) = (corner_phi_grad(p), psi_grad(p));
            let (f, s) = (corner_phi(p), psi(p));
            [gf[0] * s + f * gp[0], gf[1] * s + f * gp[1]]
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    /// Divergence-free recirculating field `((2y−1)(1−x²), 2xy(y−1))`.
    A,
    /// Constant diagonal field `(1, 1)`.
    B,
}

pub fn convection_field(field: Field) -> fn(Point) -> [f64; 2] {
    match field {
        Field::A => |p| [(2.0 * p[1] - 1.0) * (1.0 - p[0] * p[0]), 2.0 * p[0] * p[1] * (p[1] - 1.0)],
        Field::B => |_| [1.0, 1.0],
    }
}

/// Convection–diffusion with `c = 0`: field (a) carries the manufactured
/// `u = sin(πx) sin(πy)`; field (b) has `f = 1` and no closed-form solution.
pub fn test4_problem(field: Field, eps: f64) -> Result<ProblemSpec> {
    let w = convection_field(field);
    match field {
        Field::A => Ok(ProblemSpec::convection_diffusion(
            eps,
            w,
            None,
            move |p| {
                let g = sine_grad(p);
                let wp = w(p);
                eps * 2.0 * PI * PI * sine_u(p) + wp[0] * g[0] + wp[1] * g[1]
            },
        )?
        .with_exact(sine_u, sine_grad)),
        Field::B => ProblemSpec::convection_diffusion(eps, w, None, |_| 1.0),
    }
}

// ---------------------------------------------------------------------------
// Runs

/// A solved R-FEM problem on one mesh.
#[derive(Debug)]
pub struct RfemSolution {
    pub op: RecoveryOp,
    pub u: FeFunction,
    pub recovered: FeFunction,
}

pub fn solve_rfem(mesh: &Arc<Mesh>, r: usize, s: usize, problem: &ProblemSpec, stab: &StabSpec) -> Result<RfemSolution> {
    let dg = Arc::new(FeSpace::dg(mesh, r)?);
    let cg = Arc::new(FeSpace::cg(mesh, s)?);
    let op = build_recovery(&dg, &cg)?;
    let coeffs = solve(&build_rfem_system(&op, problem, stab)?)?;
    let u = FeFunction::new(dg, coeffs)?;
    let recovered = op.apply(&u)?;
    Ok(RfemSolution { op, u, recovered })
}

fn exact_of(problem: &ProblemSpec) -> Result<(crate::forms::ScalarField, crate::forms::VectorField)> {
    match (&problem.exact, &problem.exact_grad) {
        (Some(u), Some(g)) => Ok((Arc::clone(u), Arc::clone(g))),
        _ => Err(invalid("convergence study needs an exact solution")),
    }
}

/// Errors of `ℰ(u_h)` on a family of meshes, levels run in parallel.
pub fn run_rfem_convergence(
    problem: &ProblemSpec,
    mesh_for: impl Fn(usize) -> Result<Mesh> + Sync,
    r: usize,
    s: usize,
    stab: &StabSpec,
    levels: &[usize],
    provenance: String,
) -> Result<ConvergenceTable> {
    let (u, g) = exact_of(problem)?;
    let rows: Vec<ConvergenceRow> = levels
        .par_iter()
        .map(|&n| {
            let mesh = Arc::new(mesh_for(n)?);
            let sol = solve_rfem(&mesh, r, s, problem, stab)?;
            let (l2, h1) = error_norms(&sol.recovered, |x| u(x), |x| g(x));
            Ok(ConvergenceRow::new(n, mesh.max_diameter(), sol.op.source.ndof, l2, h1))
        })
        .collect::<Result<_>>()?;
    ConvergenceTable::from_rows(provenance, rows)
}

pub fn unit_square(n: usize) -> Result<Mesh> {
    make_crisscross(n, Rect::UNIT)
}

fn describe(method: &str, r: usize, s: usize, stab: &StabSpec, mesh: &str) -> String {
    format!(
        "method={method} r={r} s={s} alpha={} c_sigma={} sigma=c_sigma*A*h^{} stab={:?} theta={} mesh={mesh}",
        stab.alpha(),
        stab.c_sigma,
        stab.power,
        stab.kind,
        stab.theta
    )
}

/// Test 1: smooth solution on criss-cross meshes.
pub fn run_test1(r: usize, s: usize, stab: &StabSpec, levels: &[usize]) -> Result<ConvergenceTable> {
    run_rfem_convergence(
        &test1_problem(),
        unit_square,
        r,
        s,
        stab,
        levels,
        describe("R-FEM", r, s, stab, "criss-cross unit square") + " u=sin(pi x)sin(pi y)",
    )
}

/// Interior-penalty dG reference run (errors of `u_h` itself).
pub fn run_ipdg_convergence(problem: &ProblemSpec, degree: usize, stab: &StabSpec, levels: &[usize]) -> Result<ConvergenceTable> {
    let (u, g) = exact_of(problem)?;
    let rows: Vec<ConvergenceRow> = levels
        .par_iter()
        .map(|&n| {
            let mesh = Arc::new(unit_square(n)?);
            let dg = Arc::new(FeSpace::dg(&mesh, degree)?);
            let coeffs = solve(&build_ip_dg_system(&dg, problem, stab)?)?;
            let uh = FeFunction::new(Arc::clone(&dg), coeffs)?;
            let (l2, h1) = error_norms(&uh, |x| u(x), |x| g(x));
            let sigma: Vec<f64> = (0..mesh.num_facets()).map(|f| stab.facet_sigma(&mesh, problem, f)).collect();
            let mut row = ConvergenceRow::new(n, mesh.max_diameter(), dg.ndof, l2, h1);
            row.dg = Some(dg_norm_of_error(&uh, |x| u(x), |x| g(x), |f| sigma[f]));
            Ok(row)
        })
        .collect::<Result<_>>()?;
    ConvergenceTable::from_rows(describe("IP-dG", degree, degree, stab, "criss-cross unit square"), rows)
}

/// The penalty values compared against interior-penalty dG: `σ = c𝐡` for these `c`.
pub const DG_COMPARE_CSIGMA: [f64; 4] = [10.0, 1.0, 0.1, 0.01];
/// `σ_IP = 10 𝐡⁻¹`.
pub const IP_PENALTY: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct DgComparison {
    pub rfem: Vec<(f64, ConvergenceTable)>,
    pub ipdg: ConvergenceTable,
}

impl DgComparison {
    /// Penalty values whose finest-level L2 error is at most the dG one.
    pub fn winning_c_sigma(&self) -> Vec<f64> {
        let Some(dg) = self.ipdg.rows.last() else { return Vec::new() };
        self.rfem
            .iter()
            .filter(|(_, t)| t.rows.last().is_some_and(|r| r.l2 <= dg.l2))
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Test 1 lowest order (`r = 0, s = 1`, `σ = c𝐡`) against P1 interior-penalty dG.
pub fn run_test1_dg_compare(c_sigmas: &[f64], levels: &[usize]) -> Result<DgComparison> {
    let rfem = c_sigmas
        .iter()
        .map(|&c| Ok((c, run_test1(0, 1, &StabSpec::facet_jump(c, 1.0)?, levels)?)))
        .collect::<Result<Vec<_>>>()?;
    let ipdg = run_ipdg_convergence(&test1_problem(), 1, &StabSpec::interior_penalty(IP_PENALTY, 1.0)?, levels)?;
    Ok(DgComparison { rfem, ipdg })
}

/// Test 2: corner singularity on the L-shape, uniform refinement, `r = 0, s = 1`.
pub fn run_test2(stab: &StabSpec, levels: &[usize]) -> Result<ConvergenceTable> {
    run_rfem_convergence(
        &test2_problem(),
        make_lshape,
        0,
        1,
        stab,
        levels,
        describe("R-FEM", 0, 1, stab, "criss-cross L-shape (-1,1)^2 minus [0,1)x(-1,0]")
            + " u=r^(2/3)sin(2theta/3)(x^2-1)(y^2-1)",
    )
}

/// Initial L-shape resolution for the adaptive run.
pub const TEST3_INITIAL_N: usize = 2;
pub const TEST3_ITERATIONS: usize = 11;

/// Test 3: adaptive refinement on the L-shape problem.
pub fn run_test3(cfg: &AdaptConfig) -> Result<AdaptRun> {
    adapt_loop(make_lshape(TEST3_INITIAL_N)?, &test2_problem(), cfg)
}

pub fn test3_config(stab: StabSpec) -> AdaptConfig {
    let mut cfg = AdaptConfig::new(0, 1, stab);
    cfg.max_iter = TEST3_ITERATIONS;
    cfg.tol = 0.0;
    cfg
}

/// Test 4 field (a): convergence for the manufactured smooth solution,
/// `σ = c_σ ε 𝐡`.
pub fn run_test4a(eps: f64, c_sigma: f64, levels: &[usize]) -> Result<ConvergenceTable> {
    let stab = StabSpec::facet_jump(c_sigma, 1.0)?;
    run_rfem_convergence(
        &test4_problem(Field::A, eps)?,
        unit_square,
        0,
        1,
        &stab,
        levels,
        describe("R-FEM+upwind", 0, 1, &stab, "criss-cross unit square")
            + &format!(" eps={eps} A=eps field=a c=0 u=sin(pi x)sin(pi y)"),
    )
}

/// Extremes of a discrete solution of the field (b) problem, whose exact
/// solution satisfies `0 ≤ u ≤ min(x, y) ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    /// Largest excursion outside `[0, 1]`.
    pub overshoot: f64,
    /// Largest excursion outside `[0, min(x, y)]`.
    pub envelope_violation: f64,
    pub finite: bool,
}

impl RangeStats {
    fn from_samples(samples: impl Iterator<Item = (Point, f64)>) -> Self {
        let mut s = RangeStats { min: f64::INFINITY, max: f64::NEG_INFINITY, overshoot: 0.0, envelope_violation: 0.0, finite: true };
        for (x, v) in samples {
            if !v.is_finite() {
                s.finite = false;
                continue;
            }
            s.min = s.min.min(v);
            s.max = s.max.max(v);
            s.overshoot = s.overshoot.max(v - 1.0).max(-v);
            s.envelope_violation = s.envelope_violation.max(v - x[0].min(x[1])).max(-v);
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StabilityReport {
    pub eps: f64,
    pub n: usize,
    pub rfem: RangeStats,
    pub dg: RangeStats,
}

/// Test 4 field (b): R-FEM (`r = 0, s = 1`, `σ = c_σ ε 𝐡`, values of `ℰ(u_h)` at the
/// vertices) against upwinded P1 interior-penalty dG (`σ = 10 ε 𝐡⁻¹`, element nodal values).
pub fn run_test4b(eps: f64, n: usize, c_sigma: f64) -> Result<StabilityReport> {
    let problem = test4_problem(Field::B, eps)?;
    let mesh = Arc::new(unit_square(n)?);
    let (rfem, dg) = rayon::join(
        || -> Result<RangeStats> {
            let sol = solve_rfem(&mesh, 0, 1, &problem, &StabSpec::facet_jump(c_sigma, 1.0)?)?;
            let cg = &sol.recovered.space;
            Ok(RangeStats::from_samples(cg.node_coords.iter().copied().zip(sol.recovered.coeffs.iter().copied())))
        },
        || -> Result<RangeStats> {
            let dg = Arc::new(FeSpace::dg(&mesh, 1)?);
            let coeffs = solve(&build_ip_dg_system(&dg, &problem, &StabSpec::interior_penalty(IP_PENALTY, 1.0)?)?)?;
            Ok(RangeStats::from_samples(dg.node_coords.iter().copied().zip(coeffs)))
        },
    );
    Ok(StabilityReport { eps, n, rfem: rfem?, dg: dg? })
}

/// Default and full resolutions for the field (b) stability runs.
pub const TEST4B_N: usize = 64;
pub const TEST4B_N_FULL: usize = 200;

#[derive(Debug, Clone)]
pub struct ConditionSeries {
    pub alpha: f64,
    /// `(n, N_D, κ)` per level.
    pub points: Vec<(usize, usize, f64)>,
    /// Fitted exponent `p` in `κ ~ N_D^p`.
    pub exponent: f64,
}

/// `κ(𝔄)` for `r = 0, s = 1`, facet-jump stabilisation with `σ = c_σ𝒜𝐡^{2α−1}`.
pub fn run_condition(alpha: f64, c_sigma: f64, levels: &[usize]) -> Result<ConditionSeries> {
    let stab = StabSpec::from_alpha(crate::forms::StabKind::FacetJump, alpha, c_sigma)?;
    let problem = test1_problem();
    let points: Vec<(usize, usize, f64)> = levels
        .par_iter()
        .map(|&n| {
            let mesh = Arc::new(unit_square(n)?);
            let dg = Arc::new(FeSpace::dg(&mesh, 0)?);
            let cg = Arc::new(FeSpace::cg(&mesh, 1)?);
            let op = build_recovery(&dg, &cg)?;
            let sys = build_rfem_system(&op, &problem, &stab)?;
            Ok((n, dg.ndof, condition_estimate(&sys.matrix)?.kappa))
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.1 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
    Ok(ConditionSeries { alpha, points, exponent: fit_loglog_slope(&xs, &ys) })
}
