use super::*;
use crate::numcore::Matrix;
use crate::operators::LinearMap;
use crate::synthdata::feasibility_check;

/// `f(b) = A b + c` where column `dominant` is ten times the others.
fn dominant_column_map(d: usize, dominant: usize, seed: u64) -> LinearMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 24;
    let a = Matrix::from_fn(m, d, |_, j| {
        let v: f64 = rng.random_range(-1.0..1.0);
        if j == dominant {
            10.0 * v
        } else {
            v
        }
    });
    let c = (0..m).map(|i| 5.0 + (i as f64).sin()).collect();
    LinearMap::new(a, c).unwrap()
}

fn clean_input(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-0.8..0.8)).collect()
}

/// Best single-coordinate replacement over all `d x {-1, 1}` candidates.
/// Fitness is convex in the replacement value, so an endpoint is optimal.
fn exhaustive_single(map: &LinearMap, b: &[f64]) -> f64 {
    let mut obj = Objective::new(map, b).unwrap();
    let mut best = 0.0f64;
    for i in 0..b.len() {
        for v in [-1.0, 1.0] {
            best = best.max(obj.score(&apply(b, &[i], &[v]).unwrap()).unwrap());
        }
    }
    best
}

#[test]
fn decode_rounds_and_clamps() {
    assert_eq!(decode_pair(28.4, 0.7, 34), (28, 0.7));
    assert_eq!(decode_pair(40.9, 1.4, 34), (33, 1.0));
    assert_eq!(decode_pair(-3.0, -2.0, 34), (0, -1.0));
    assert_eq!(decode_pair(f64::NAN, f64::NAN, 34), (0, 0.0));
}

#[test]
fn decode_is_idempotent() {
    let g = Genome {
        pairs: vec![[3.6, 0.25], [40.0, -7.0], [0.49, 1.0], [3.6, -0.5]],
    };
    let once = g.decode(34);
    let twice = Genome::from_decoded(&once.indices, &once.values).decode(34);
    assert_eq!(once, twice);
    assert_eq!(Genome::from_flat(&g.to_flat()), g);
}

#[test]
fn apply_replaces_with_last_write_winning() {
    let b = vec![0.1, 0.2, 0.3];
    assert_eq!(apply(&b, &[], &[]).unwrap(), b);
    assert_eq!(apply(&b, &[1, 1], &[0.2, 0.9]).unwrap(), vec![0.1, 0.9, 0.3]);
    let same = apply(&b, &[2, 0], &[0.3, -1.0]).unwrap();
    assert_eq!(effective_support(&b, &same), vec![0]);
    assert!(apply(&b, &[3], &[0.0]).is_err());
    assert!(apply(&b, &[0], &[]).is_err());
}

#[test]
fn padding_keeps_the_perturbation() {
    let g = Genome {
        pairs: vec![[4.0, 0.5], [1.0, -0.3]],
    };
    let p = g.padded(5).unwrap();
    assert_eq!(p.k(), 5);
    let b = clean_input(8, 1);
    let (dg, dp) = (g.decode(8), p.decode(8));
    assert_eq!(
        apply(&b, &dg.indices, &dg.values).unwrap(),
        apply(&b, &dp.indices, &dp.values).unwrap()
    );
    assert!(g.padded(1).is_none());
}

#[test]
fn population_scales_with_budget() {
    let cfg = DEConfig::default();
    assert_eq!(cfg.pop_size(3), 120);
    assert_eq!(cfg.pop_size(1), 40);
    assert!(DEConfig {
        pop_per_gene: 1,
        ..cfg.clone()
    }
    .validate(1)
    .is_err());
    assert!(cfg.validate(0).is_err());
    assert!(DEConfig {
        crossover: 1.5,
        ..cfg.clone()
    }
    .validate(1)
    .is_err());
    assert!(DEConfig {
        f_min: 0.9,
        f_max: 0.5,
        ..cfg
    }
    .validate(1)
    .is_err());
}

#[test]
fn latin_hypercube_hits_every_stratum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 17;
    let pts = latin_hypercube(n, &[0.0, -1.0], &[33.0, 1.0], &mut rng);
    for (j, (lo, hi)) in [(0.0, 33.0), (-1.0, 1.0)].into_iter().enumerate() {
        let mut strata: Vec<usize> = pts
            .iter()
            .map(|p| (((p[j] - lo) / (hi - lo)) * n as f64) as usize)
            .collect();
        strata.sort_unstable();
        assert_eq!(strata, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn de_finds_the_dominant_coordinate() {
    let d = 12;
    let map = dominant_column_map(d, 7, 1);
    let b = clean_input(d, 2);
    let oracle = exhaustive_single(&map, &b);
    let cfg = DEConfig {
        seed: 9,
        ..Default::default()
    };
    let rec = de_attack(&map, "linear", 0, &b, 1, &cfg, &THRESHOLDS, None).unwrap();
    assert!(rec.valid);
    assert_eq!(rec.indices, vec![7]);
    assert_eq!(rec.values[0].abs(), 1.0);
    assert!(rec.fitness >= 0.99 * oracle, "{} vs {oracle}", rec.fitness);
}

#[test]
fn de_reaches_the_best_corner_of_a_monotone_map() {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Matrix::from_fn(16, d, |_, _| rng.random_range(0.1..1.0));
    let map = LinearMap::new(a, vec![3.0; 16]).unwrap();
    let b = clean_input(d, 5);
    let mut obj = Objective::new(&map, &b).unwrap();
    let mut oracle = 0.0f64;
    for mask in 0..(1u32 << d) {
        let corner: Vec<f64> = (0..d).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect();
        oracle = oracle.max(obj.score(&corner).unwrap());
    }
    // Duplicate index genes can leave a coordinate untouched when the stall
    // window closes, so judge the seed distribution rather than one run.
    let mut exact = 0;
    for seed in 0..10 {
        let cfg = DEConfig {
            seed,
            ..Default::default()
        };
        let rec = de_attack(&map, "linear", 0, &b, d, &cfg, &THRESHOLDS, None).unwrap();
        assert!(rec.fitness <= oracle * (1.0 + 1e-12));
        assert!(rec.fitness >= 0.85 * oracle, "seed {seed}: {} vs {oracle}", rec.fitness);
        exact += (rec.fitness >= oracle * (1.0 - 1e-9)) as usize;
    }
    assert!(exact >= 5, "{exact} of 10 runs found the corner");
}

#[test]
fn de_bookkeeping_and_feasibility() {
    let d = 20;
    let map = dominant_column_map(d, 3, 2);
    let b = clean_input(d, 6);
    for k in [1, 3, 5] {
        let cfg = DEConfig {
            seed: 100 + k as u64,
            ..Default::default()
        };
        let rec = de_attack(&map, "linear", 4, &b, k, &cfg, &THRESHOLDS, None).unwrap();
        assert_eq!(
            rec.evaluations,
            cfg.pop_size(k) * (rec.generations + 1) + cfg.polish_iters
        );
        assert_eq!(rec.trajectory.len(), rec.generations + 1);
        assert!(rec.trajectory.windows(2).all(|w| w[1] >= w[0]));
        assert!(rec.fitness >= *rec.trajectory.last().unwrap());
        assert!(rec.support.len() <= k && rec.indices.len() <= k);
        let rep = feasibility_check(&rec.b_adv, &rec.indices).unwrap();
        assert!(rep.in_bounds && rep.mahalanobis_contrib <= k as f64);
        for (i, (adv, clean)) in rec.b_adv.iter().zip(&b).enumerate() {
            if !rec.indices.contains(&i) {
                assert_eq!(adv, clean);
            }
        }
        assert_eq!(
            rec.success,
            THRESHOLDS.iter().map(|&t| rec.fitness > t).collect::<Vec<_>>()
        );
        let mut obj = Objective::new(&map, &b).unwrap();
        assert!((obj.score(&rec.b_adv).unwrap() - rec.fitness).abs() <= 1e-12);
    }
}

#[test]
fn de_is_deterministic_and_respects_warm_start() {
    let d = 16;
    let map = dominant_column_map(d, 11, 3);
    let b = clean_input(d, 7);
    let cfg = DEConfig {
        seed: 5,
        max_gen: 20,
        ..Default::default()
    };
    let a = de_attack(&map, "m", 0, &b, 3, &cfg, &THRESHOLDS, None).unwrap();
    assert_eq!(a, de_attack(&map, "m", 0, &b, 3, &cfg, &THRESHOLDS, None).unwrap());
    let warm = Genome::from_decoded(&[11, 2], &[1.0, -1.0]);
    let mut obj = Objective::new(&map, &b).unwrap();
    let dec = warm.decode(d);
    let warm_fit = obj.score(&apply(&b, &dec.indices, &dec.values).unwrap()).unwrap();
    let cfg = DEConfig {
        max_gen: 1,
        polish: false,
        ..cfg
    };
    let rec = de_attack(&map, "m", 0, &b, 3, &cfg, &THRESHOLDS, Some(&warm)).unwrap();
    assert!(rec.trajectory[0] >= warm_fit);
}

#[test]
fn de_stops_on_stall() {
    // A constant map never improves, so the stall window ends the run.
    let map = LinearMap::new(Matrix::zeros(4, 6), vec![1.0; 4]).unwrap();
    let cfg = DEConfig {
        seed: 2,
        ..Default::default()
    };
    let rec = de_attack(&map, "flat", 0, &[0.0; 6], 1, &cfg, &THRESHOLDS, None).unwrap();
    assert_eq!(rec.generations, cfg.stall_gen);
    assert_eq!(rec.fitness, 0.0);
}

struct Broken;

impl DifferentiableMap for Broken {
    fn input_dim(&self) -> usize {
        3
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn eval(&self, _: &[f64]) -> Result<Vec<f64>> {
        Err(Error::NonFinite)
    }
    fn vjp(&self, _: &[f64], _: &[f64]) -> Result<Vec<f64>> {
        Err(Error::NonFinite)
    }
}

#[test]
fn evaluation_failure_marks_the_record_invalid() {
    let b = [0.1, 0.2, 0.3];
    let de = de_attack(&Broken, "x", 0, &b, 1, &DEConfig::default(), &THRESHOLDS, None).unwrap();
    let rnd = random_attack(&Broken, "x", 0, &b, 1, 5, 0, &THRESHOLDS).unwrap();
    let pgd = pgd_attack(&Broken, "x", 0, &b, 1, &PgdConfig::default(), &THRESHOLDS).unwrap();
    for r in [de, rnd, pgd] {
        assert!(!r.valid && r.error.is_some());
        assert_eq!(r.b_adv, b.to_vec());
        assert!(!r.succeeded(0.0));
    }
}

#[test]
fn random_baseline_edge_cases() {
    let d = 100;
    let map = dominant_column_map(d, 40, 4);
    let b = clean_input(d, 8);
    let none = random_attack(&map, "m", 0, &b, 1, 0, 1, &THRESHOLDS).unwrap();
    assert_eq!((none.fitness, none.evaluations), (0.0, 0));
    assert!(none.success.iter().all(|s| !s));
    let oracle = exhaustive_single(&map, &b);
    let rec = random_attack(&map, "m", 0, &b, 1, 50, 1, &THRESHOLDS).unwrap();
    assert_eq!(rec.evaluations, 50);
    assert!(rec.fitness < oracle);
    assert_eq!(rec, random_attack(&map, "m", 0, &b, 1, 50, 1, &THRESHOLDS).unwrap());
    let k5 = random_attack(&map, "m", 0, &b, 5, 20, 2, &THRESHOLDS).unwrap();
    assert_eq!(k5.indices.len(), 5);
    assert!(feasibility_check(&k5.b_adv, &k5.indices).unwrap().in_bounds);
    assert!(random_attack(&map, "m", 0, &b, 101, 1, 0, &THRESHOLDS).is_err());
}

#[test]
fn pgd_reaches_a_corner_on_orthogonal_linear_map() {
    let s = [1.0, 2.0, 0.5, 1.5, 3.0, 0.7];
    let d = s.len();
    let a = Matrix::from_fn(d, d, |i, j| if i == j { s[j] } else { 0.0 });
    let map = LinearMap::new(a, vec![2.0; d]).unwrap();
    let b = vec![0.0; d];
    // Every corner is optimal: ||A sign|| / ||c||.
    let oracle = norm2(&s) / norm2(&[2.0; 6]);
    let rec = pgd_attack(
        &map,
        "lin",
        0,
        &b,
        d,
        &PgdConfig {
            seed: 3,
            ..Default::default()
        },
        &THRESHOLDS,
    )
    .unwrap();
    assert!(
        (rec.fitness - oracle).abs() <= 0.01 * oracle,
        "{} vs {oracle}",
        rec.fitness
    );
    assert!(rec.b_adv.iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn pgd_respects_sparsity_and_degenerate_cases() {
    let d = 10;
    let map = dominant_column_map(d, 2, 5);
    let b = clean_input(d, 9);
    let rec = pgd_attack(
        &map,
        "m",
        0,
        &b,
        2,
        &PgdConfig {
            seed: 1,
            ..Default::default()
        },
        &THRESHOLDS,
    )
    .unwrap();
    assert!(rec.support.len() <= 2);
    assert!(feasibility_check(&rec.b_adv, &rec.indices).unwrap().in_bounds);
    assert_eq!(rec.evaluations, 3 * 101);

    let flat = LinearMap::new(Matrix::zeros(3, d), vec![1.0; 3]).unwrap();
    let rec = pgd_attack(&flat, "flat", 0, &b, 3, &PgdConfig::default(), &THRESHOLDS).unwrap();
    assert_eq!(rec.fitness, 0.0);
    assert!(rec.trajectory.iter().all(|&f| f == 0.0));

    let still = pgd_attack(
        &map,
        "m",
        0,
        &b,
        3,
        &PgdConfig {
            step: 0.0,
            ..Default::default()
        },
        &THRESHOLDS,
    )
    .unwrap();
    assert_eq!((still.fitness, still.b_adv.clone()), (0.0, b.clone()));
    assert!(still.support.is_empty());
}

#[test]
fn campaign_orders_records_and_is_monotone_in_k() {
    let d = 14;
    let map = dominant_column_map(d, 5, 6);
    let samples: Vec<(usize, Vec<f64>)> = (0..4).map(|i| (10 + i, clean_input(d, 20 + i as u64))).collect();
    let cfg = CampaignConfig {
        ks: vec![3, 1],
        de: DEConfig {
            max_gen: 15,
            seed: 7,
            ..Default::default()
        },
        ..Default::default()
    };
    let recs = de_campaign(&map, "lin", &samples, &cfg).unwrap();
    let keys: Vec<(usize, usize)> = recs.iter().map(|r| (r.sample_id, r.k)).collect();
    let want: Vec<(usize, usize)> = (10..14).flat_map(|s| [(s, 1), (s, 3)]).collect();
    assert_eq!(keys, want);
    for pair in recs.chunks(2) {
        assert!(pair[1].fitness >= pair[0].fitness);
        assert_eq!(pair[0].seed, attack_seed(7, AttackMethod::De, pair[0].sample_id, 1));
    }
    assert_eq!(recs, de_campaign(&map, "lin", &samples, &cfg).unwrap());

    let mut buf = Vec::new();
    write_records(&recs, &mut buf).unwrap();
    assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
}

#[test]
fn baseline_campaigns_follow_campaign_order() {
    let d = 10;
    let map = dominant_column_map(d, 1, 8);
    let samples: Vec<(usize, Vec<f64>)> = (0..3).map(|i| (i, clean_input(d, 40 + i as u64))).collect();
    let rnd = random_campaign(&map, "lin", &samples, &[3, 1, 3], 10, 4, &THRESHOLDS).unwrap();
    let keys: Vec<(usize, usize)> = rnd.iter().map(|r| (r.sample_id, r.k)).collect();
    assert_eq!(keys, vec![(0, 1), (0, 3), (1, 1), (1, 3), (2, 1), (2, 3)]);
    assert!(rnd
        .iter()
        .all(|r| r.method == AttackMethod::Random && r.evaluations == 10));
    assert_eq!(rnd[3].seed, attack_seed(4, AttackMethod::Random, 1, 3));
    let pgd = pgd_campaign(
        &map,
        "lin",
        &samples,
        &[2],
        &PgdConfig {
            iters: 5,
            ..Default::default()
        },
        &THRESHOLDS,
    )
    .unwrap();
    assert_eq!(pgd.len(), 3);
    assert!(pgd
        .iter()
        .all(|r| r.method == AttackMethod::Pgd && r.support.len() <= 2));
}
