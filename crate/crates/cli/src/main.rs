use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rfem::adapt::write_records_csv;
use rfem::bench::{self, ConvergenceTable, DgComparison, StabilityReport};
use rfem::fespace::FeSpace;
use rfem::forms::{StabKind, StabSpec};
use rfem::mesh::{make_crisscross, Rect};
use rfem::recovery::build_recovery;
use rfem::system::{build_rfem_system, write_triplets, SparsityInfo};

#[derive(Parser)]
#[command(name = "rfem", version, about = "Recovered finite element benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Smooth solution on the unit square: convergence table.
    Test1(Opts),
    /// Lowest-order R-FEM for several penalties against interior-penalty dG.
    #[command(name = "test1-dg")]
    Test1Dg(Opts),
    /// Corner singularity on the L-shape, uniform refinement.
    Test2(Opts),
    /// Adaptive refinement on the L-shape.
    Test3(Opts),
    /// Convection–diffusion: convergence for field (a), stability for field (b).
    Test4(Opts),
    /// Condition numbers of the R-FEM matrix against N_D.
    Condition(Opts),
    /// Write the mesh, system matrix or recovery matrix for inspection.
    Dump(Opts),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

#[derive(Args, Clone)]
struct Opts {
    /// DG degree.
    #[arg(long, default_value_t = 0)]
    r: usize,
    /// Conforming (recovery target) degree.
    #[arg(long, default_value_t = 1)]
    s: usize,
    /// Stabilisation exponent: σ = c_σ𝒜𝐡^{2α−1}. Defaults to the preset of each test.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    csigma: f64,
    /// Criss-cross resolutions, e.g. 4,8,16.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<usize>,
    /// Single mesh resolution.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Marking ratio of the maximum strategy.
    #[arg(long, default_value_t = 0.25)]
    theta: f64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Output file (stdout when absent). Commands producing several tables add a suffix per table.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dump_mesh: Option<PathBuf>,
    #[arg(long)]
    dump_matrix: Option<PathBuf>,
    #[arg(long)]
    dump_recovery: Option<PathBuf>,
    /// Run field (b) at the full resolution (n = 200) instead of the desk preset.
    #[arg(long)]
    full: bool,
    /// Check the expected rates/orderings and exit with status 2 on failure.
    #[arg(long)]
    check: bool,
}

impl Opts {
    fn levels_or(&self, default: &[usize]) -> Vec<usize> {
        if self.levels.is_empty() {
            default.to_vec()
        } else {
            self.levels.clone()
        }
    }

    /// Facet-jump stabilisation from `--alpha` if given, else `σ = c_σ𝒜𝐡^power`.
    fn stab(&self, power: f64) -> Result<StabSpec> {
        Ok(match self.alpha.first() {
            Some(&a) => StabSpec::from_alpha(StabKind::FacetJump, a, self.csigma)?,
            None => StabSpec::facet_jump(self.csigma, power)?,
        })
    }
}

/// Result of the `--check` of one command.
struct Verdict {
    pass: bool,
    detail: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(v)) => {
            eprintln!("{} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            if v.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<Option<Verdict>> {
    match cmd {
        Command::Test1(o) => test1(&o),
        Command::Test1Dg(o) => test1_dg(&o),
        Command::Test2(o) => test2(&o),
        Command::Test3(o) => test3(&o),
        Command::Test4(o) => test4(&o),
        Command::Condition(o) => condition(&o),
        Command::Dump(o) => dump(&o).map(|()| None),
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// `out.csv` + `c0.1` → `out-c0.1.csv`.
fn suffixed(path: &Path, label: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{label}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{label}"),
    };
    path.with_file_name(name)
}

fn emit_table(o: &Opts, table: &ConvergenceTable, title: &str, label: Option<&str>, ref_slopes: &[f64]) -> Result<()> {
    let path = match (&o.out, label) {
        (Some(p), Some(l)) => Some(suffixed(p, l)),
        (p, _) => p.clone(),
    };
    let mut w = open_out(path.as_deref())?;
    match o.format {
        Format::Csv => table.write_csv(&mut w)?,
        Format::Svg => w.write_all(table.to_svg(title, ref_slopes).as_bytes())?,
    }
    if o.out.is_none() {
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reference slopes in `ndof` for rates `k` in `h`.
fn ndof_slopes(rates: &[f64]) -> Vec<f64> {
    rates.iter().map(|k| -k / 2.0).collect()
}

fn test1(o: &Opts) -> Result<Option<Verdict>> {
    let stab = o.stab(o.s as f64)?;
    let table = bench::run_test1(o.r, o.s, &stab, &o.levels_or(&bench::DEFAULT_LEVELS))?;
    let s = o.s as f64;
    emit_table(o, &table, &format!("Test 1, r={} s={}", o.r, o.s), None, &ndof_slopes(&[s, s + 1.0]))?;
    Ok(o.check.then(|| {
        // r < s − 1 with σ ∝ 𝐡^s is capped at first order in H1.
        let h1_rate = if o.r + 1 < o.s { 1.0 } else { s };
        let (h1, l2) = (table.terminal_h1_eoc().unwrap_or(f64::NAN), table.terminal_l2_eoc().unwrap_or(f64::NAN));
        Verdict {
            pass: (h1 - h1_rate).abs() <= 0.15 && (l2 - h1_rate - 1.0).abs() <= 0.2,
            detail: format!("H1 EOC {h1:.3} (expected {h1_rate}), L2 EOC {l2:.3} (expected {})", h1_rate + 1.0),
        }
    }))
}

fn test1_dg(o: &Opts) -> Result<Option<Verdict>> {
    let cs: Vec<f64> = if o.alpha.is_empty() && o.csigma != 1.0 { vec![o.csigma] } else { bench::DG_COMPARE_CSIGMA.to_vec() };
    let cmp: DgComparison = bench::run_test1_dg_compare(&cs, &o.levels_or(&bench::DEFAULT_LEVELS))?;
    let slopes = ndof_slopes(&[1.0, 2.0]);
    for (c, t) in &cmp.rfem {
        emit_table(o, t, &format!("Test 1, R-FEM sigma={c}h"), Some(&format!("c{c}")), &slopes)?;
    }
    emit_table(o, &cmp.ipdg, "Test 1, IP dG sigma=10/h", Some("ipdg"), &slopes)?;
    let winners = cmp.winning_c_sigma();
    eprintln!("# c_sigma with finest-level L2 error <= IP dG: {winners:?}");
    Ok(o.check.then(|| Verdict { pass: !winners.is_empty(), detail: format!("winning c_sigma {winners:?}") }))
}

fn test2(o: &Opts) -> Result<Option<Verdict>> {
    let table = bench::run_test2(&o.stab(1.0)?, &o.levels_or(&bench::DEFAULT_LEVELS))?;
    emit_table(o, &table, "Test 2, L-shape uniform", None, &ndof_slopes(&[2.0 / 3.0, 4.0 / 3.0]))?;
    Ok(o.check.then(|| {
        let h1 = table.terminal_h1_eoc().unwrap_or(f64::NAN);
        Verdict { pass: (h1 - 2.0 / 3.0).abs() <= 0.15, detail: format!("H1 EOC {h1:.3} (expected 2/3)") }
    }))
}

fn test3(o: &Opts) -> Result<Option<Verdict>> {
    let mut cfg = bench::test3_config(o.stab(1.0)?);
    cfg.theta = o.theta;
    let run = bench::run_test3(&cfg)?;
    let mut w = open_out(o.out.as_deref())?;
    writeln!(
        w,
        "# method=R-FEM adaptive r=0 s=1 alpha={} c_sigma={} marking=maximum theta={} mesh=L-shape n0={}",
        cfg.stab.alpha(),
        cfg.stab.c_sigma,
        cfg.theta,
        bench::TEST3_INITIAL_N
    )?;
    write_records_csv(&run.records, &mut w)?;
    w.flush()?;
    if let Some(e) = &run.failure {
        eprintln!("warning: adaptive loop stopped early: {e}");
    }
    Ok(o.check.then(|| {
        let tail: Vec<_> = run.records.iter().skip(rfem::checks::ADAPT_FIT_SKIP).collect();
        let slope = bench::fit_loglog_slope(
            &tail.iter().map(|r| r.ndof as f64).collect::<Vec<_>>(),
            &tail.iter().map(|r| r.error.unwrap_or(f64::NAN)).collect::<Vec<_>>(),
        );
        Verdict {
            pass: run.failure.is_none() && (-0.65..=-0.35).contains(&slope),
            detail: format!("error-vs-ndof slope {slope:.3} (expected -1/2)"),
        }
    }))
}

fn report_line(r: &StabilityReport) -> String {
    format!(
        "eps={:e} n={} rfem_min={:.6} rfem_max={:.6} rfem_overshoot={:.6e} dg_min={:.6} dg_max={:.6} dg_overshoot={:.6e}",
        r.eps, r.n, r.rfem.min, r.rfem.max, r.rfem.overshoot, r.dg.min, r.dg.max, r.dg.overshoot
    )
}

fn test4(o: &Opts) -> Result<Option<Verdict>> {
    let (eps_a, eps_b) = if o.eps.is_empty() { (vec![1e-1, 1e-4], vec![1e-2, 1e-3]) } else { (o.eps.clone(), o.eps.clone()) };
    let levels = o.levels_or(&bench::DEFAULT_LEVELS);
    for &eps in &eps_a {
        let t = bench::run_test4a(eps, o.csigma, &levels)?;
        emit_table(o, &t, &format!("Test 4 field (a), eps={eps:e}"), Some(&format!("a-eps{eps:e}")), &ndof_slopes(&[1.0, 2.0]))?;
    }
    let n = o.n.unwrap_or(if o.full { bench::TEST4B_N_FULL } else { bench::TEST4B_N });
    let mut reports = Vec::new();
    for &eps in &eps_b {
        let rep = bench::run_test4b(eps, n, o.csigma)?;
        eprintln!("# field (b): {}", report_line(&rep));
        reports.push(rep);
    }
    Ok(o.check.then(|| {
        let pass = reports.iter().all(|r| r.rfem.finite && r.dg.finite)
            && reports.iter().filter(|r| r.eps <= 1e-3).all(|r| r.rfem.overshoot < r.dg.overshoot);
        Verdict { pass, detail: "field (b): R-FEM overshoot below dG for eps <= 1e-3, all solves finite".into() }
    }))
}

fn condition(o: &Opts) -> Result<Option<Verdict>> {
    let alphas = if o.alpha.is_empty() { vec![0.0, 1.0, 3.0] } else { o.alpha.clone() };
    let levels = o.levels_or(&[4, 8, 16, 32]);
    let mut w = open_out(o.out.as_deref())?;
    writeln!(w, "# method=R-FEM r=0 s=1 stab=facet-jump sigma=c_sigma*A*h^(2alpha-1) c_sigma={} mesh=criss-cross unit square", o.csigma)?;
    writeln!(w, "alpha,n,ndof,kappa")?;
    let mut series = Vec::new();
    for &a in &alphas {
        let s = bench::run_condition(a, o.csigma, &levels)?;
        for (n, ndof, k) in &s.points {
            writeln!(w, "{a},{n},{ndof},{k:.16e}")?;
        }
        writeln!(w, "# alpha={a}: fitted exponent of kappa vs N_D = {:.4}", s.exponent)?;
        series.push(s);
    }
    w.flush()?;
    Ok(o.check.then(|| {
        let bad: Vec<f64> = series.iter().filter(|s| s.alpha <= 1.0 && !(0.7..=1.3).contains(&s.exponent)).map(|s| s.alpha).collect();
        Verdict { pass: bad.is_empty(), detail: format!("exponent outside [0.7, 1.3] for alpha {bad:?}") }
    }))
}

fn dump(o: &Opts) -> Result<()> {
    if o.dump_mesh.is_none() && o.dump_matrix.is_none() && o.dump_recovery.is_none() {
        bail!("dump needs at least one of --dump-mesh, --dump-matrix, --dump-recovery");
    }
    let mesh = Arc::new(make_crisscross(o.n.unwrap_or(4), Rect::UNIT)?);
    if let Some(p) = &o.dump_mesh {
        mesh.write_text(open_out(Some(p))?)?;
    }
    let dg = Arc::new(FeSpace::dg(&mesh, o.r)?);
    let cg = Arc::new(FeSpace::cg(&mesh, o.s)?);
    let op = build_recovery(&dg, &cg)?;
    if let Some(p) = &o.dump_recovery {
        write_triplets(&op.matrix, open_out(Some(p))?)?;
        eprintln!("# recovery E: {}", SparsityInfo::of(&op.matrix));
    }
    if let Some(p) = &o.dump_matrix {
        let sys = build_rfem_system(&op, &bench::test1_problem(), &o.stab(o.s as f64)?)?;
        write_triplets(&sys.matrix, open_out(Some(p))?)?;
        eprintln!("# system matrix: {}", SparsityInfo::of(&sys.matrix));
    }
    Ok(())
}
