use super::*;
use crate::attacks::{random_attack, THRESHOLDS};
use crate::numcore::Matrix;
use crate::operators::LinearMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear(d: usize, m: usize, seed: u64) -> LinearMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
    LinearMap::new(a, (0..m).map(|i| 2.0 + 0.1 * i as f64).collect()).unwrap()
}

fn inputs(n: usize, d: usize, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (i, (0..d).map(|_| rng.random_range(-0.9..0.9)).collect()))
        .collect()
}

#[test]
fn wilson_matches_reference_values() {
    let (lo, hi) = wilson_ci(293, 310, 0.95).unwrap();
    assert!((lo - 0.914).abs() <= 1e-3 && (hi - 0.965).abs() <= 1e-3, "{lo} {hi}");
    assert_eq!(wilson_ci(0, 10, 0.95).unwrap().0, 0.0);
    assert_eq!(wilson_ci(7, 7, 0.95).unwrap().1, 1.0);
    assert!(wilson_ci(0, 0, 0.95).is_err());
    assert!(wilson_ci(3, 2, 0.95).is_err());
    let (l90, h90) = wilson_ci(20, 50, 0.90).unwrap();
    let (l99, h99) = wilson_ci(20, 50, 0.99).unwrap();
    assert!(l99 < l90 && h90 < h99 && l90 < 0.4 && 0.4 < h90);
}

#[test]
fn branch_classification() {
    assert_eq!(classify_branch(&[0, 1], 2).unwrap(), BranchClass::B1Only);
    assert_eq!(classify_branch(&[5, 20], 2).unwrap(), BranchClass::B2Only);
    assert_eq!(classify_branch(&[1, 5], 2).unwrap(), BranchClass::Mixed);
    assert!(classify_branch(&[], 2).is_err());
}

#[test]
fn channel_summary_averages_each_channel() {
    let field = [1.0, 10.0, 3.0, 20.0, 5.0, 30.0];
    assert_eq!(channel_summary(&field, 2), vec![3.0, 20.0]);
}

fn stats_for(outputs: &[Vec<f64>]) -> OutputStats {
    OutputStats::from_outputs(outputs, 2).unwrap()
}

#[test]
fn stealth_flags_large_shifts() {
    let outs = vec![vec![1.0, 2.0, 1.0, 2.0], vec![3.0, 4.0, 3.0, 4.0]];
    let stats = stats_for(&outs);
    assert_eq!(stats.mean, vec![2.0, 3.0]);
    assert_eq!(stats.std, vec![1.0, 1.0]);
    let f = vec![2.0, 3.0, 2.0, 3.0];
    let b = vec![0.5, -0.5];

    let same = stealth_from_outputs(&f, &f, &b, &[0.9, -0.5], &stats).unwrap();
    assert!(same.z_pass);
    assert_eq!(same.amplification, Some(0.0));
    assert_eq!(same.channel_errors, vec![Some(0.0), Some(0.0)]);

    let shifted: Vec<f64> = f.iter().map(|v| v + 3.0).collect();
    let m = stealth_from_outputs(&f, &shifted, &b, &b, &stats).unwrap();
    assert!(!m.z_pass && (m.max_abs_z - 3.0).abs() < 1e-12);
    assert!(stealth_from_outputs(&f, &f, &[0.0, 0.0], &b, &stats)
        .unwrap()
        .amplification
        .is_none());
    assert!(OutputStats::from_outputs(&[f.clone(), f.clone()], 2).is_err());
}

#[test]
fn amplification_closed_form_on_linear_map() {
    let map = linear(6, 8, 1);
    let b = vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4];
    let adv = crate::attacks::apply(&b, &[2, 4], &[-1.0, 1.0]).unwrap();
    let fc = map.eval(&b).unwrap();
    let fa = map.eval(&adv).unwrap();
    let stats = stats_for(&[fc.clone(), fa.clone(), vec![0.0; 8]]);
    let m = stealth_from_outputs(&fc, &fa, &b, &adv, &stats).unwrap();
    let diff_out: Vec<f64> = fa.iter().zip(&fc).map(|(a, c)| a - c).collect();
    let diff_in: Vec<f64> = adv.iter().zip(&b).map(|(a, c)| a - c).collect();
    let want = (norm2(&diff_out) / norm2(&fc)) / (norm2(&diff_in) / norm2(&b));
    assert!((m.amplification.unwrap() - want).abs() <= 1e-10 * want);
}

fn records(map: &LinearMap, model: &str, samples: &[(usize, Vec<f64>)], k: usize) -> Vec<AttackRecord> {
    samples
        .iter()
        .map(|(id, b)| random_attack(map, model, *id, b, k, 30, *id as u64, &THRESHOLDS).unwrap())
        .collect()
}

#[test]
fn summary_rates_fall_with_threshold() {
    let map = linear(10, 8, 2);
    let samples = inputs(40, 10, 3);
    let mut recs = records(&map, "lin", &samples, 3);
    let by_id: BTreeMap<usize, Vec<f64>> = samples.iter().cloned().collect();
    let outs: Vec<Vec<f64>> = samples.iter().map(|(_, b)| b.clone()).collect();
    let stats = OutputStats::from_map(&map, &outs, 2).unwrap();
    annotate(&map, &mut recs, &by_id, &stats).unwrap();
    let mut broken = recs[0].clone();
    broken.valid = false;
    recs.push(broken);
    let clean = BTreeMap::from([("lin".to_string(), 0.05)]);
    let s = summarize(&recs, &THRESHOLDS, &clean, 0.95).unwrap();
    assert_eq!((s.rows.len(), s.invalid), (THRESHOLDS.len(), 1));
    assert!(s.rows.windows(2).all(|w| w[1].rate <= w[0].rate));
    for r in &s.rows {
        assert_eq!(r.n, 40);
        assert!(r.ci_lower <= r.rate && r.rate <= r.ci_upper);
        assert!(r.median_error <= r.max_error);
        if let Some(b) = r.branch {
            assert!((b.b1_only + b.b2_only + b.mixed - 1.0).abs() < 1e-12);
            assert!(
                (r.degradation.unwrap()
                    - 20.0 * mean_of(recs[..40].iter().filter(|x| x.succeeded(r.tau)).map(|x| x.fitness)).unwrap())
                .abs()
                    < 1e-9
            );
        }
    }
    assert!(s.rows[0].successes > 0, "threshold 0.1 should see some successes");

    let dir = tempfile::tempdir().unwrap();
    let paths = write_tables(&s, dir.path()).unwrap();
    assert_eq!(paths.len(), 5);
    let rates = fs::read_to_string(dir.path().join("success_rates.csv")).unwrap();
    assert_eq!(rates.lines().next().unwrap(), "method,tau,model,k=3");
    assert_eq!(rates.lines().count(), 1 + THRESHOLDS.len());
}

#[test]
fn transfer_to_self_and_clone_is_total() {
    let map = linear(8, 6, 4);
    let clone = linear(8, 6, 4);
    let other = linear(8, 6, 5);
    let samples = inputs(20, 8, 6);
    let recs = records(&map, "a", &samples, 4);
    let by_id: BTreeMap<usize, Vec<f64>> = samples.into_iter().collect();
    let targets: Vec<(&str, &dyn DifferentiableMap)> = vec![("a", &map), ("a2", &clone), ("b", &other)];
    let tm = transfer_matrix(&[("a", &recs), ("none", &[])], &targets, &by_id, 0.1).unwrap();
    assert!(tm.counts[0] > 0);
    assert_eq!(tm.rates[0][0], Some(1.0));
    assert_eq!(tm.rates[0][1], Some(1.0));
    assert!(tm.rates[1].iter().all(Option::is_none));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transfer.csv");
    write_transfer_csv(&tm, &path).unwrap();
    let text = fs::read_to_string(path).unwrap();
    assert!(text.starts_with("source,successes,a,a2,b\n"));
    assert!(text.contains("a,") && text.contains("100.000000"));
}

#[test]
fn repeated_seed_has_zero_spread() {
    let map = linear(8, 6, 7);
    let samples = inputs(3, 8, 8);
    let de = DEConfig {
        max_gen: 5,
        polish: false,
        ..Default::default()
    };
    let same = seed_sensitivity(&map, "m", &samples, 1, &de, &[4, 4, 4], 0.1).unwrap();
    assert_eq!((same.rate_std, same.mean_error_std), (0.0, 0.0));
    assert_eq!(same.rates.len(), 3);
    assert!(seed_sensitivity(&map, "m", &samples, 1, &de, &[4], 0.1).is_err());
}
