use super::*;

fn identity_cols(m: usize, d: usize) -> Matrix<f64> {
    Matrix::from_fn(m, d, |r, c| if r == c { 1.0 } else { 0.0 })
}

#[test]
fn upper_bound_saturates_on_unit_columns() {
    let j = identity_cols(6, 6);
    let res = check_upper_bound(&j, 1.0, 1.0, 6, 200, 1).unwrap();
    assert!(res.pass);
    // Best corner gives sqrt(6); the bound S_6 = 6 is loose by 6 - sqrt(6).
    assert!((res.worst_slack - (6.0 - 6f64.sqrt()) / 6.0).abs() < 1e-12);
}

#[test]
fn upper_bound_is_tight_for_a_single_column() {
    let j = Matrix::from_fn(5, 4, |r, c| if c == 2 { (r + 1) as f64 } else { 0.0 });
    let res = check_upper_bound(&j, 100.0, 0.5, 1, 50, 2).unwrap();
    assert!(res.pass && res.worst_slack.abs() < 1e-15);
    assert_eq!(res.trials, 51);
    assert!(check_upper_bound(&j, 1.0, 0.5, 5, 1, 0).is_err());
    assert!(check_upper_bound(&j, 0.0, 0.5, 1, 1, 0).is_err());
}

#[test]
fn lower_bound_is_pythagoras_on_orthonormal_columns() {
    let j = identity_cols(4, 3);
    let f = vec![1.0, -2.0, 0.5, 0.0];
    let res = check_lower_bound(&j, &f, 1.0, 2).unwrap();
    assert_eq!(res.name, "lower_bound_equality");
    assert!(res.pass && res.worst_slack.abs() < 1e-15);
    let nf = norm2(&f);
    let observed = 2f64.sqrt() / nf;
    assert!((observed - 1.0 * 2f64.sqrt() / nf).abs() < 1e-15);
}

#[test]
fn coherent_columns_make_the_lower_bound_vacuous() {
    let j = Matrix::from_fn(3, 2, |r, _| [1.0, 2.0, 2.0][r]);
    let res = check_lower_bound(&j, &[1.0, 1.0, 1.0], 1.0, 2).unwrap();
    assert!(res.pass);
    let j3 = Matrix::from_fn(3, 3, |r, c| [1.0, 2.0, 2.0][r] * if c == 2 { 0.9 } else { 1.0 });
    let res = check_lower_bound(&j3, &[1.0, 1.0, 1.0], 1.0, 3).unwrap();
    assert!(res.pass);
    assert!(res.note.unwrap().starts_with("vacuous at coherence"));
}

#[test]
fn random_bounds_never_violate() {
    let (up, low) = fuzz_bounds(1000, 1.0, 3).unwrap();
    assert!(up.pass && low.pass, "{up:?} {low:?}");
    assert_eq!(up.trials, 1000 * 11);
    assert_eq!(low.trials, 1000);
}

#[test]
fn rho_bound_equality_cases() {
    for d in [1, 5, 34] {
        let s = vec![2.0; d];
        let rho = rho_table(&s).unwrap();
        for k in 1..=d {
            let want = (k as f64 / d as f64).sqrt();
            assert!((rho[k - 1] - want).abs() < 1e-12);
            assert!((rho_lower_bound(&s, k).unwrap() - want).abs() < 1e-12);
        }
    }
    let s = [1.0, 0.0, 0.0, 0.0];
    assert_eq!(d_eff(&s).unwrap(), 1.0);
    assert_eq!(rho_table(&s).unwrap()[0], 1.0);
    assert_eq!(rho_lower_bound(&s, 1).unwrap(), 1.0);
}

#[test]
fn rho_bounds_hold_on_ten_thousand_profiles() {
    let res = check_rho_bounds(10_000, 4).unwrap();
    assert!(res.pass, "{res:?}");
    assert!(res.trials > 10_000);
}

#[test]
fn profile_families_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for fam in [
        ProfileFamily::Dirichlet,
        ProfileFamily::Lognormal,
        ProfileFamily::Sparse,
    ] {
        for d in [1, 3, 40] {
            let s = sample_profile(fam, d, &mut rng);
            assert_eq!(s.len(), d);
            assert!(s.iter().all(|v| *v >= 0.0 && v.is_finite()) && s.iter().any(|v| *v > 0.0));
        }
    }
}

#[test]
fn gram_schmidt_preserves_requested_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Matrix::from_fn(20, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norms: Vec<f64> = (0..7).map(|i| 0.5 + i as f64).collect();
    let j = orthogonal_columns(&a, &norms).unwrap();
    for (s, want) in column_norms(&j).iter().zip(&norms) {
        assert!((s - want).abs() <= 1e-12 * want.max(1.0));
    }
    for p in 0..7 {
        for q in p + 1..7 {
            assert!(dot(&j.column(p), &j.column(q)).abs() < 1e-12 * norms[p] * norms[q]);
        }
    }
    assert!(orthogonal_columns(&Matrix::zeros(3, 4), &[1.0; 4]).is_err());
}

#[test]
fn two_factor_is_exact_on_orthogonal_columns() {
    let res = two_factor_ensemble(100, 1.0, 7).unwrap();
    assert!(res.pass, "{res:?}");
    // k = d reaches M exactly; k = 1 reaches eps * s_1 / ||f||.
    let j = orthogonal_columns(&identity_cols(5, 3), &[3.0, 1.0, 2.0]).unwrap();
    let f = vec![1.0, 1.0, 1.0, 1.0, 1.0];
    let nf = norm2(&f);
    let full = two_factor(&column_norms(&j), nf, 0.5, 3).unwrap();
    assert!((full.predicted - full.magnitude).abs() < 1e-15);
    let one = two_factor(&column_norms(&j), nf, 0.5, 1).unwrap();
    assert!((one.predicted - 0.5 * 3.0 / nf).abs() < 1e-15);
    assert!(check_two_factor(&j, &f, 0.5, 1).unwrap().pass);
}

struct Square;

impl DifferentiableMap for Square {
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eval(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![b[0] * b[0]])
    }
    fn vjp(&self, b: &[f64], seed: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![2.0 * b[0] * seed[0]])
    }
}

#[test]
fn linearization_closed_forms() {
    let eps = 0.3;
    let alpha = measure_linearization(&Square, &[vec![1.0]], eps, 1, 10, 1).unwrap();
    assert!((alpha - eps / 2.0).abs() < 1e-12, "{alpha}");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lin = LinearMap::new(Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0)), vec![1.0; 6]).unwrap();
    let samples = vec![vec![0.1, 0.2, -0.3, 0.4], vec![0.0; 4]];
    assert!(measure_linearization(&lin, &samples, 1.0, 2, 50, 2).unwrap() <= 1e-10);
    assert!(measure_linearization(&lin, &[], 1.0, 2, 5, 2).is_err());
}

#[test]
fn rank_one_ceiling_is_attained() {
    // g(b) = a . b + 2 with equal-magnitude weights, f = u g for a unit u.
    let a = [0.5, -0.5, 0.5, 0.5];
    let g = LinearMap::new(Matrix::from_vec(1, 4, a.to_vec()), vec![2.0]).unwrap();
    let u = [0.6, 0.0, 0.8];
    let f = LinearMap::new(
        Matrix::from_fn(3, 4, |r, c| u[r] * a[c]),
        u.iter().map(|x| 2.0 * x).collect(),
    )
    .unwrap();
    let b = vec![0.0; 4];
    let pc = check_low_rank_ceiling(&f, &g, std::slice::from_ref(&b), 1.0, 4, 64, 3).unwrap();
    assert!(pc.ceiling.pass && pc.isometry.pass, "{pc:?}");
    assert!(pc.alpha < 1e-12);
    // The ceiling eps * ||a|| * sqrt(4) / |g(0)| = 1 is hit by delta = sign(a).
    assert!((pc.max_bound - 1.0).abs() < 1e-15);
    let delta: Vec<f64> = a.iter().map(|x| x.signum()).collect();
    let moved = f.eval(&delta).unwrap();
    let f0 = f.eval(&b).unwrap();
    assert!((rel_l2_slices(&moved, &f0).unwrap() - 1.0).abs() < 1e-15);
    assert!(pc.ceiling.worst_slack.abs() < 1e-15, "{}", pc.ceiling.worst_slack);

    let same = check_low_rank_ceiling(&f, &g, &[b], 0.0, 1, 4, 3).unwrap();
    assert_eq!(same.max_bound, 0.0);
    assert!(same.ceiling.pass && same.isometry.pass);
}

#[test]
fn exact_surrogate_hits_the_floor() {
    let g = ladder_operator(1).unwrap();
    let b0 = vec![0.0; 8];
    let (i, _, err) = single_point_attack(&g, &b0, 0.5).unwrap();
    assert_eq!(i, 0);
    let floor = 0.5 * 4.0 / norm2(&g.eval(&b0).unwrap());
    assert!((err - floor).abs() < 1e-12);

    // Uniform columns: every coordinate gives the same error.
    let uni = LinearMap::new(orthogonal_columns(&g.a, &[1.0; 8]).unwrap(), g.offset.clone()).unwrap();
    let (_, _, e) = single_point_attack(&uni, &b0, 0.5).unwrap();
    assert!((e - 0.5 / norm2(&g.offset)).abs() < 1e-12);
}

#[test]
fn ladder_converges_to_the_operator_floor() {
    let g = ladder_operator(2).unwrap();
    let curve = impossibility_experiment(&g, &STANDARD_LADDER, 0.5, &[0.0; 8], 256, 11).unwrap();
    for r in &curve.rungs {
        eprintln!(
            "h {:>2} epochs {:>4}: approx {:.4} adv {:.4} gap {:.2}",
            r.hidden, r.epochs, r.approx_error, r.adv_error, r.gap
        );
    }
    eprintln!("floor {:.4}, non-monotone {:?}", curve.floor, curve.non_monotone);
    assert!(curve.final_pass);
    let n = curve.rungs.len();
    assert!(curve.rungs[n - 1].gap > curve.rungs[n - 2].gap);
    assert!(impossibility_experiment(&g, &[], 0.5, &[0.0; 8], 256, 1).is_err());
}

#[test]
fn report_serializes_and_gates() {
    let cfg = TheoryConfig {
        bound_draws: 20,
        rho_draws: 200,
        two_factor_instances: 5,
        ladder: STANDARD_LADDER[..2].to_vec(),
        ..Default::default()
    };
    let mut report = verify_synthetic(&cfg).unwrap();
    assert_eq!(report.checks.len(), 4);
    assert!(report.checks.iter().all(|c| c.pass));
    let back: TheoryReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
    report.checks[0].pass = false;
    assert!(!report.passed());
}
