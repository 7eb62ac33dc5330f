use std::sync::Arc;

use rfem::bench::{self, test1_problem, unit_square, ConvergenceTable, Field};
use rfem::fespace::FeSpace;
use rfem::forms::StabSpec;
use rfem::recovery::build_recovery;
use rfem::system::{build_rfem_system, solve};

#[test]
fn galerkin_energy_at_the_solution() {
    let mesh = Arc::new(unit_square(8).unwrap());
    let problem = test1_problem();
    for (r, s) in [(0, 1), (1, 2), (2, 3)] {
        let dg = Arc::new(FeSpace::dg(&mesh, r).unwrap());
        let cg = Arc::new(FeSpace::cg(&mesh, s).unwrap());
        let op = build_recovery(&dg, &cg).unwrap();
        for stab in [StabSpec::facet_jump(1.0, 1.0).unwrap(), StabSpec::volume(1.0, 1.0).unwrap()] {
            let sys = build_rfem_system(&op, &problem, &stab).unwrap();
            let u = solve(&sys).unwrap();
            let energy = sys.matrix.bilinear(&u, &u);
            let load: f64 = sys.rhs.iter().zip(&u).map(|(b, x)| b * x).sum();
            assert!((energy - load).abs() <= 1e-10 * load.abs(), "r={r} s={s}: {energy} vs {load}");
        }
    }
}

#[test]
fn resolved_boundary_layer_has_small_overshoot() {
    let rep = bench::run_test4b(1e-2, bench::TEST4B_N, 1.0).unwrap();
    assert!(rep.rfem.finite && rep.dg.finite);
    assert!(rep.rfem.overshoot < 0.05, "R-FEM {}", rep.rfem.overshoot);
    assert!(rep.dg.overshoot < 0.05, "dG {}", rep.dg.overshoot);
}

#[test]
fn field_a_converges_at_first_order() {
    let t = bench::run_test4a(1e-1, 1.0, &[8, 16, 32]).unwrap();
    let h1 = t.terminal_h1_eoc().unwrap();
    assert!((h1 - 1.0).abs() < 0.15, "{h1}");
    // Diffusion-dominated and convection-dominated runs both stay finite.
    let t = bench::run_test4a(1e-4, 1.0, &[8, 16]).unwrap();
    assert!(t.rows.iter().all(|r| r.l2.is_finite() && r.h1.is_finite()));
    assert!(bench::test4_problem(Field::B, 1e-3).unwrap().exact.is_none());
}

#[test]
fn table_survives_a_file_round_trip() {
    let t = bench::run_test2(&StabSpec::facet_jump(1.0, 1.0).unwrap(), &[2, 4]).unwrap();
    let path = std::env::temp_dir().join(format!("rfem-table-{}.csv", std::process::id()));
    t.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let back = ConvergenceTable::read_csv(std::fs::File::open(&path).unwrap()).unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(back, t);
    assert!(back.provenance[0].contains("L-shape"));
}
