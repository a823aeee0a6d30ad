use heraldkey_sdp::{
    certified_bound, sdpa, solve, verify, Certificate, SdpProblem, Sense, SolveStatus,
    SolverOptions,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opts() -> SolverOptions {
    SolverOptions {
        keep_log: true,
        ..SolverOptions::default()
    }
}

/// max <diag(1,-1), X> s.t. tr X = 1, X ⪰ 0 with X = [[y0, y1], [y1, y2]].
fn eigenvalue_problem() -> SdpProblem {
    let mut p = SdpProblem::new(3, Sense::Maximize);
    let b = p.add_block(2);
    p.add_coefficient(0, b, 0, 0, 1.0);
    p.add_coefficient(1, b, 0, 1, 1.0);
    p.add_coefficient(2, b, 1, 1, 1.0);
    p.set_objective(0, 1.0);
    p.set_objective(2, -1.0);
    p.add_equality(vec![(0, 1.0), (2, 1.0)], 1.0);
    p
}

/// Level-1 moment matrix for CHSH in projector form over [1, A0, A1, B0, B1].
fn chsh_level1() -> SdpProblem {
    // vars: 0 A0, 1 A1, 2 B0, 3 B1, 4 A0A1, 5 B0B1, 6 A0B0, 7 A0B1, 8 A1B0, 9 A1B1
    let mut p = SdpProblem::new(10, Sense::Maximize);
    let b = p.add_block(5);
    p.add_constant(b, 0, 0, 1.0);
    for k in 0..4 {
        p.add_coefficient(k, b, 0, k + 1, 1.0);
        p.add_coefficient(k, b, k + 1, k + 1, 1.0);
    }
    p.add_coefficient(4, b, 1, 2, 1.0);
    p.add_coefficient(5, b, 3, 4, 1.0);
    p.add_coefficient(6, b, 1, 3, 1.0);
    p.add_coefficient(7, b, 1, 4, 1.0);
    p.add_coefficient(8, b, 2, 3, 1.0);
    p.add_coefficient(9, b, 2, 4, 1.0);
    // CHSH = 2 - 4 A0 - 4 B0 + 4 (A0B0 + A0B1 + A1B0 - A1B1)
    p.set_offset(2.0);
    p.set_objective(0, -4.0);
    p.set_objective(2, -4.0);
    p.set_objective(6, 4.0);
    p.set_objective(7, 4.0);
    p.set_objective(8, 4.0);
    p.set_objective(9, -4.0);
    p
}

#[test]
fn eigenvalue_problem_attains_largest_eigenvalue() {
    let p = eigenvalue_problem();
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!(
        (sol.primal_objective - 1.0).abs() < 1e-6,
        "{}",
        sol.primal_objective
    );
    assert!((sol.dual_objective - 1.0).abs() < 1e-6);
    let report = verify(&p, &sol);
    assert!(report.max_violation() <= 1e-7, "{report:?}");
}

#[test]
fn chsh_level_one_reaches_tsirelson() {
    let p = chsh_level1();
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, SolveStatus::Optimal);
    let tsirelson = 2.0 * 2f64.sqrt();
    assert!(
        (sol.primal_objective - tsirelson).abs() < 1e-5,
        "{}",
        sol.primal_objective
    );
    assert!((sol.dual_objective - tsirelson).abs() < 1e-5);
}

#[test]
fn diagonal_blocks_solve_a_linear_program() {
    // min x0 + 2 x1  s.t. x0 >= 0, x1 >= 0, x0 + x1 - 1 >= 0  ->  1 at (1, 0)
    let mut p = SdpProblem::new(2, Sense::Minimize);
    let b0 = p.add_block(1);
    let b1 = p.add_block(1);
    let b2 = p.add_block(1);
    p.add_coefficient(0, b0, 0, 0, 1.0);
    p.add_coefficient(1, b1, 0, 0, 1.0);
    p.add_coefficient(0, b2, 0, 0, 1.0);
    p.add_coefficient(1, b2, 0, 0, 1.0);
    p.add_constant(b2, 0, 0, -1.0);
    p.set_objective(0, 1.0);
    p.set_objective(1, 2.0);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!((sol.primal_objective - 1.0).abs() < 1e-6);
    assert!((sol.y[0] - 1.0).abs() < 1e-5 && sol.y[1].abs() < 1e-5);
}

#[test]
fn infeasible_problem_yields_farkas_certificate() {
    // y - 1 >= 0 and -y >= 0.
    let mut p = SdpProblem::new(1, Sense::Minimize);
    let b0 = p.add_block(1);
    let b1 = p.add_block(1);
    p.add_coefficient(0, b0, 0, 0, 1.0);
    p.add_constant(b0, 0, 0, -1.0);
    p.add_coefficient(0, b1, 0, 0, -1.0);
    p.set_objective(0, 1.0);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, SolveStatus::Infeasible);
    assert!(matches!(sol.certificate, Certificate::Farkas { .. }));
    let report = verify(&p, &sol);
    assert!(report.certificate_residual.unwrap() <= 1e-7, "{report:?}");
}

#[test]
fn inconsistent_equalities_are_reported() {
    let mut p = eigenvalue_problem();
    p.add_equality(vec![(0, 2.0), (2, 2.0)], 3.0);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, SolveStatus::Infeasible);
    assert!(matches!(
        sol.certificate,
        Certificate::EqualityConflict { .. }
    ));
    assert_eq!(verify(&p, &sol).certificate_residual, Some(0.0));
}

#[test]
fn unbounded_problem_yields_ray() {
    let mut p = SdpProblem::new(1, Sense::Minimize);
    let b = p.add_block(1);
    p.add_coefficient(0, b, 0, 0, 1.0);
    p.set_objective(0, -1.0);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, SolveStatus::Unbounded);
    assert!(verify(&p, &sol).certificate_residual.unwrap() <= 1e-7);
}

#[test]
fn redundant_equalities_are_dropped_and_reported() {
    let mut p = eigenvalue_problem();
    p.add_equality(vec![(0, 3.0), (2, 3.0)], 3.0);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert_eq!(sol.dropped_rows, vec![1]);
    assert!((sol.primal_objective - 1.0).abs() < 1e-6);
}

fn random_sym(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            if rng.random::<f64>() < density {
                out.push((i, j, rng.random::<f64>() * 2.0 - 1.0));
            }
        }
    }
    out
}

fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    &g * g.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Random problem with a strictly feasible primal point and a strictly
/// feasible dual point, hence a finite optimum.
fn random_feasible(seed: u64) -> SdpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [4usize, 3, 1];
    let nvars = 6;
    let mut p = SdpProblem::new(nvars, Sense::Minimize);
    for &d in &dims {
        p.add_block(d);
    }
    let y0: Vec<f64> = (0..nvars).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut ay0: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
    let x0: Vec<DMatrix<f64>> = dims.iter().map(|&d| random_pd(&mut rng, d)).collect();
    let mut c = vec![0.0; nvars];
    for k in 0..nvars {
        for (b, &d) in dims.iter().enumerate() {
            for (i, j, v) in random_sym(&mut rng, d, 0.5) {
                p.add_coefficient(k, b, i, j, v);
                ay0[b][(i, j)] += y0[k] * v;
                let t = if i == j {
                    v * x0[b][(i, i)]
                } else {
                    2.0 * v * x0[b][(i, j)]
                };
                c[k] += t;
                if i != j {
                    ay0[b][(j, i)] += y0[k] * v;
                }
            }
        }
        // keep every variable present in the first block
        p.add_coefficient(k, 0, k % dims[0], k % dims[0], 1.0);
        ay0[0][(k % dims[0], k % dims[0])] += y0[k];
        c[k] += x0[0][(k % dims[0], k % dims[0])];
        p.set_objective(k, c[k]);
    }
    for (b, &d) in dims.iter().enumerate() {
        let s0 = random_pd(&mut rng, d);
        let cmat = &s0 - &ay0[b];
        for i in 0..d {
            for j in i..d {
                p.add_constant(b, i, j, cmat[(i, j)]);
            }
        }
    }
    p
}

#[test]
fn random_feasible_problems_verify_independently() {
    for seed in 0..10 {
        let p = random_feasible(seed);
        let sol = solve(&p, &opts());
        assert_eq!(sol.status, SolveStatus::Optimal, "seed {seed}");
        let report = verify(&p, &sol);
        assert!(report.max_violation() <= 1e-7, "seed {seed}: {report:?}");
        for entry in &sol.log {
            assert!(entry.weak_duality_margin >= -1e-8 * (1.0 + entry.primal_objective.abs()));
        }
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    let p = random_feasible(42);
    let a = solve(&p, &opts());
    let b = solve(&p, &opts());
    assert_eq!(a.iterations, b.iterations);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.y), bits(&b.y));
    assert_eq!(a.primal_objective.to_bits(), b.primal_objective.to_bits());
}

#[test]
fn objective_scaling_scales_the_optimum() {
    let p = random_feasible(7);
    let base = solve(&p, &opts());
    let mut scaled = p.clone();
    scaled.scale_objective(3.5);
    let s = solve(&scaled, &opts());
    assert_eq!(s.status, SolveStatus::Optimal);
    let rel = (s.primal_objective - 3.5 * base.primal_objective).abs()
        / (3.5 * base.primal_objective.abs());
    assert!(rel < 1e-6, "relative difference {rel}");
}

#[test]
fn perturbed_solutions_are_flagged() {
    let p = eigenvalue_problem();
    let mut sol = solve(&p, &opts());
    let clean = verify(&p, &sol);
    assert!(clean.max_violation() <= 1e-7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for y in &mut sol.y {
        *y += 1e-3 * (if rng.random::<bool>() { 1.0 } else { -1.0 });
    }
    let dirty = verify(&p, &sol);
    assert!(dirty.max_violation() >= 1e-4, "{dirty:?}");
}

#[test]
fn sdpa_round_trip_preserves_optimum() {
    for p in [chsh_level1(), random_feasible(11), eigenvalue_problem()] {
        let text = sdpa::to_string(&p).unwrap();
        let parsed = sdpa::read(text.as_bytes()).unwrap();
        let again = sdpa::to_string(&parsed.problem).unwrap();
        // kept-map comment is dropped once the equalities are gone
        let strip = |s: &str| {
            s.lines()
                .filter(|l| !l.starts_with("\"kept"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&text), strip(&again));
        let a = solve(&p, &opts());
        let b = solve(&parsed.problem, &opts());
        assert!((a.primal_objective - b.primal_objective).abs() < 1e-6);
    }
}

#[test]
fn sdpa_reader_rejects_garbage() {
    let bad = "2\n1\n2\n1.0 x\n";
    assert!(sdpa::read(bad.as_bytes()).is_err());
}

#[test]
fn certified_bound_brackets_the_optimum() {
    let p = chsh_level1();
    let sol = solve(&p, &opts());
    let tsirelson = 2.0 * 2f64.sqrt();
    // Projector moments lie in [-1, 1]; the 5x5 moment matrix has unit diagonal bounds.
    let upper = certified_bound(&p, &sol, 1.0, &[5.0]).unwrap();
    assert!(upper >= tsirelson - 1e-12, "{upper}");
    assert!(upper <= tsirelson + 1e-6, "{upper}");

    // A damaged dual still certifies something valid, just looser.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut damaged = sol.clone();
    for block in &mut damaged.dual_blocks {
        for i in 0..block.nrows() {
            for j in 0..=i {
                let e = rng.random_range(-1e-3..1e-3);
                block[(i, j)] += e;
                block[(j, i)] = block[(i, j)];
            }
        }
    }
    let loose = certified_bound(&p, &damaged, 1.0, &[5.0]).unwrap();
    assert!(loose >= tsirelson - 1e-12, "{loose}");
    assert!(loose >= upper - 1e-12);
}
