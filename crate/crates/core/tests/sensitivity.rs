use opstress::numcore::norm2;
use opstress::operators::{Arch, DifferentiableMap, ModelConfig, PreparedOperator};
use opstress::sensitivity::*;
use opstress::synthdata::{Dataset, DatasetConfig};
use opstress::training::{train, TrainConfig};

fn trained(arch: Arch) -> (Dataset, PreparedOperator<f64>) {
    let ds = Dataset::generate(DatasetConfig::default()).unwrap();
    let (model, report) = train(arch, &ds, &ModelConfig::default(), &TrainConfig::default()).unwrap();
    assert!(report.test_rel_l2 <= 0.10);
    let op = PreparedOperator::new(model, ds.trunk_norm()).unwrap();
    (ds, op)
}

fn fd_column_norms(map: &impl DifferentiableMap, b: &[f64], h: f64) -> Vec<f64> {
    (0..b.len())
        .map(|i| {
            let mut up = b.to_vec();
            let mut dn = b.to_vec();
            up[i] += h;
            dn[i] -= h;
            let (fu, fd) = (map.eval(&up).unwrap(), map.eval(&dn).unwrap());
            let col: Vec<f64> = fu.iter().zip(&fd).map(|(a, c)| (a - c) / (2.0 * h)).collect();
            norm2(&col)
        })
        .collect()
}

#[test]
fn column_norms_match_finite_differences_on_trained_models() {
    for arch in [Arch::Sdeeponet, Arch::Poddeeponet] {
        let (ds, op) = trained(arch);
        for sample in ds.standardized_test().iter().take(5) {
            let exact = column_norms(&jacobian_exact(&op, &sample.b).unwrap());
            let fd = fd_column_norms(&op, &sample.b, 1e-6);
            let scale = exact.iter().copied().fold(0.0, f64::max);
            for (e, f) in exact.iter().zip(&fd) {
                assert!(
                    (e - f).abs() <= 1e-4 * e.max(1e-3 * scale),
                    "{arch}: exact {e} vs fd {f}"
                );
            }
        }
    }
}

#[test]
fn pod_jacobian_norms_equal_coefficient_jacobian_norms() {
    let (ds, op) = trained(Arch::Poddeeponet);
    for sample in ds.standardized_test().iter().take(5) {
        let full = column_norms(&op.jacobian(&sample.b).unwrap());
        let coef = column_norms(&op.pod_coefficient_jacobian(&sample.b).unwrap());
        for (a, c) in full.iter().zip(&coef) {
            assert!((a - c).abs() <= 1e-10 * c.max(1e-12), "{a} vs {c}");
        }
    }
}

#[test]
fn thirty_projections_reproduce_desk_d_eff() {
    let (ds, op) = trained(Arch::Sdeeponet);
    let samples: Vec<(usize, Vec<f64>)> = ds
        .standardized_test()
        .into_iter()
        .take(20)
        .map(|s| s.b)
        .enumerate()
        .collect();
    let exact = profile_samples(&op, &samples, 1.0, JacobianMethod::Exact).unwrap();
    let est = profile_samples(&op, &samples, 1.0, JacobianMethod::Randomized { n_proj: 30, seed: 42 }).unwrap();
    let (de, dr) = (
        summarize(&exact).unwrap().d_eff.mean,
        summarize(&est).unwrap().d_eff.mean,
    );
    eprintln!("mean d_eff exact {de:.4}, randomized {dr:.4}");
    assert!((dr - de).abs() <= 0.15 * de);
    for p in exact.iter().chain(&est) {
        assert!(p.d_eff >= 1.0 && p.d_eff <= p.dim() as f64);
    }
}
