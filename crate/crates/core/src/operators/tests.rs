use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{DenseLayer, NoRng};
use crate::synthdata::{unit_grid, Dataset, DatasetConfig};

const N_B2: usize = 5;

fn cfg() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        hidden_layers: 2,
        latent: 4,
        gru_layers: 2,
        ..ModelConfig::default()
    }
}

fn grid() -> Matrix<f64> {
    unit_grid(3, 4).map(|v| 2.0 * v - 1.0)
}

fn random_fields(rng: &mut ChaCha8Rng, points: usize, m: usize) -> Vec<Matrix<f64>> {
    (0..m)
        .map(|_| Matrix::from_fn(points, CHANNELS, |_, _| rng.random_range(-1.0..1.0)))
        .collect()
}

fn model(arch: Arch, seed: u64) -> OperatorModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pod = (arch == Arch::Poddeeponet).then(|| {
        let fields = random_fields(&mut rng, grid().rows(), 10);
        PodBasis::from_fields(&grid(), &fields, 0.9, 3).unwrap()
    });
    let mut m = OperatorModel::new(arch, cfg(), N_B2, pod, &mut rng).unwrap();
    // Non-zero biases so every path is exercised.
    let mut flat = m.flatten_params();
    for v in flat.iter_mut() {
        if *v == 0.0 {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    m.load_params(&flat).unwrap();
    m
}

fn input(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

fn naive_dense(l: &DenseLayer<f64>, x: &[f64]) -> Vec<f64> {
    (0..l.output_size())
        .map(|o| {
            let mut acc = l.bias[o];
            for (i, xi) in x.iter().enumerate() {
                acc += l.weights[(o, i)] * xi;
            }
            l.activation.apply(acc)
        })
        .collect()
}

fn naive_mlp(m: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    m.layers.iter().fold(x.to_vec(), |h, l| naive_dense(l, &h))
}

#[test]
fn nomad_matches_per_equation_oracle() {
    let m = model(Arch::Nomad, 1);
    let b = input(2, m.input_dim());
    let t = grid();
    let got = m.evaluate(&b, &t).unwrap();
    let Branch2::Mlp(br2) = &m.branch2 else {
        panic!("NOMAD branch 2 is dense")
    };
    let b1 = naive_mlp(&m.branch1, &b[..2]);
    let b2 = naive_mlp(br2, &b[2..]);
    let fused: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
    let p = fused.len();
    for pt in 0..t.rows() {
        let tr = naive_mlp(m.trunk.as_ref().unwrap(), t.row(pt));
        let z: Vec<f64> = (0..CHANNELS * p).map(|j| fused[j % p] * tr[j]).collect();
        let s = naive_mlp(m.head.as_ref().unwrap(), &z);
        for c in 0..CHANNELS {
            assert!((got[(pt, c)] - s[c]).abs() <= 1e-10 * s[c].abs().max(1.0));
        }
    }
}

#[test]
fn mimonet_matches_concatenation_oracle() {
    let m = model(Arch::Mimonet, 3);
    let b = input(4, m.input_dim());
    let t = grid();
    let got = m.evaluate(&b, &t).unwrap();
    let Branch2::Mlp(br2) = &m.branch2 else { panic!() };
    let mut h = naive_mlp(&m.branch1, &b[..2]);
    h.extend(naive_mlp(br2, &b[2..]));
    for pt in 0..t.rows() {
        let mut hp = h.clone();
        hp.extend(naive_mlp(m.trunk.as_ref().unwrap(), t.row(pt)));
        let s = naive_mlp(m.head.as_ref().unwrap(), &hp);
        for c in 0..CHANNELS {
            assert!((got[(pt, c)] - s[c]).abs() <= 1e-10 * s[c].abs().max(1.0));
        }
    }
}

#[test]
fn sdeeponet_zero_branch_outputs_bias() {
    let mut m = model(Arch::Sdeeponet, 5);
    m.branch1 = m.branch1.zeros_like();
    m.branch2 = m.branch2.zeros_like();
    m.bias = vec![0.5, -1.0, 2.0, 0.25];
    let out = m.evaluate(&input(6, m.input_dim()), &grid()).unwrap();
    for pt in 0..out.rows() {
        assert_eq!(out.row(pt), &m.bias[..]);
    }
}

#[test]
fn pod_unit_coefficient_reproduces_first_mode() {
    let mut m = model(Arch::Poddeeponet, 7);
    let head = m.head.as_mut().unwrap();
    *head = head.zeros_like();
    head.layers.last_mut().unwrap().bias[0] = 1.0;
    let out = m.evaluate(&input(8, m.input_dim()), &grid()).unwrap();
    let phi = &m.pod.as_ref().unwrap().channels[0].phi;
    for pt in 0..out.rows() {
        assert_eq!(out[(pt, 0)], phi[(pt, 0)]);
        for c in 1..CHANNELS {
            assert_eq!(out[(pt, c)], 0.0);
        }
    }
}

#[test]
fn pod_outputs_stay_in_basis_span() {
    let m = model(Arch::Poddeeponet, 9);
    let out = m.evaluate(&input(10, m.input_dim()), &grid()).unwrap();
    for (c, basis) in m.pod.as_ref().unwrap().channels.iter().enumerate() {
        let o = out.column(c);
        let coeff = basis.phi.tmatvec(&o);
        let back = basis.phi.matvec(&coeff);
        let resid: f64 = o.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(resid <= 1e-10 * norm2(&o));
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn pod_of_identical_snapshots_is_rank_one() {
    let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + 0.2).collect();
    let snaps = Matrix::from_fn(12, 6, |i, _| v[i]);
    let basis = build_pod_basis(&snaps, 0.995, 16).unwrap();
    assert_eq!(basis.rank(), 1);
    let nv = norm2(&v);
    let dot: f64 = (0..12).map(|i| basis.phi[(i, 0)] * v[i] / nv).sum();
    assert!((dot.abs() - 1.0).abs() < 1e-12);
}

#[test]
fn pod_of_equal_norm_orthogonal_snapshots_needs_ceil_energy_modes() {
    // Columns of a scaled identity are orthogonal with equal norms, so every
    // mode carries 1/M of the energy.
    for m in [10, 40, 200, 400] {
        let snaps = Matrix::from_fn(m + 5, m, |i, j| if i == j { 3.0 } else { 0.0 });
        let basis = build_pod_basis(&snaps, 0.995, usize::MAX).unwrap();
        assert_eq!(basis.rank(), (0.995 * m as f64).ceil() as usize, "M = {m}");
    }
}

#[test]
fn pod_rank_respects_cap_and_truncation_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let snaps = Matrix::from_fn(30, 20, |_, _| rng.random_range(-1.0..1.0));
    let capped = build_pod_basis(&snaps, 0.995, 4).unwrap();
    assert_eq!(capped.rank(), 4);
    for energy in [0.5, 0.9, 0.99] {
        let b = build_pod_basis(&snaps, energy, usize::MAX).unwrap();
        assert!(b.retained_energy >= energy);
        let gram = b.phi.transpose().matmul(&b.phi);
        for i in 0..b.rank() {
            for j in 0..b.rank() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-10);
            }
        }
        let proj = b.phi.matmul(&b.phi.transpose().matmul(&snaps));
        let err: f64 = proj
            .as_slice()
            .iter()
            .zip(snaps.as_slice())
            .map(|(a, s)| (a - s).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= (1.0 - energy).sqrt() * snaps.frobenius_norm() + 1e-12);
    }
}

#[test]
fn pod_rejects_single_snapshot() {
    assert!(build_pod_basis(&Matrix::from_fn(5, 1, |i, _| i as f64), 0.9, 4).is_err());
}

#[test]
fn rank_deficient_snapshots_keep_numerical_rank() {
    let snaps = Matrix::from_fn(8, 6, |i, j| {
        (i as f64 + 1.0) * if j % 2 == 0 { 1.0 } else { -2.0 } + (j == 3) as i32 as f64 * i as f64
    });
    let b = build_pod_basis(&snaps, 1.0, 16).unwrap();
    assert_eq!(b.rank(), 2);
}

#[test]
fn vjp_matches_finite_differences_for_every_arch() {
    let t = grid();
    for (k, arch) in Arch::ALL.into_iter().enumerate() {
        let m = model(arch, 20 + k as u64);
        let b = input(30 + k as u64, m.input_dim());
        let seed = input(40 + k as u64, t.rows() * CHANNELS);
        let g = m.model_gradient(&b, &t, &seed).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..b.len())
            .map(|i| {
                let f = |delta: f64| {
                    let mut bp = b.clone();
                    bp[i] += delta;
                    let o = m.evaluate(&bp, &t).unwrap();
                    o.as_slice().iter().zip(&seed).map(|(x, s)| x * s).sum::<f64>()
                };
                (f(h) - f(-h)) / (2.0 * h)
            })
            .collect();
        assert!(rel(&g, &fd) < 1e-5, "{arch}: rel err {}", rel(&g, &fd));
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let t = grid();
    for (k, arch) in Arch::ALL.into_iter().enumerate() {
        let m = model(arch, 50 + k as u64);
        let inputs = Matrix::from_fn(3, m.input_dim(), |s, j| input(60 + s as u64, m.input_dim())[j]);
        let up = Matrix::from_vec(3 * t.rows(), CHANNELS, input(70, 3 * t.rows() * CHANNELS));
        let (_, mut tape) = m.forward_tape::<NoRng>(&inputs, &t, None).unwrap();
        let (grads, _) = m.backward_tape(&mut tape, &up, true).unwrap();
        let g = grads.unwrap().flatten_params();
        let base = m.flatten_params();
        let loss = |flat: &[f64]| {
            let mut mm = m.clone();
            mm.load_params(flat).unwrap();
            let (o, _) = mm.forward_tape::<NoRng>(&inputs, &t, None).unwrap();
            o.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let stride = (base.len() / 40).max(1);
        let idx: Vec<usize> = (0..base.len()).step_by(stride).collect();
        let h = 1e-6;
        let fd: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let mut p = base.clone();
                p[i] += h;
                let up_ = loss(&p);
                p[i] -= 2.0 * h;
                (up_ - loss(&p)) / (2.0 * h)
            })
            .collect();
        let an: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        assert!(rel(&an, &fd) < 1e-5, "{arch}: rel err {}", rel(&an, &fd));
    }
}

#[test]
fn linear_map_vjp_of_unit_seed_is_a_row() {
    let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 5.0, 0.5]]);
    let map = LinearMap::new(a.clone(), vec![0.0, 1.0]).unwrap();
    assert_eq!(map.vjp(&[0.3, 0.1, 0.2], &[0.0, 1.0]).unwrap(), a.row(1).to_vec());
    assert_eq!(map.jacobian(&[0.0; 3]).unwrap(), a);
}

#[test]
fn prepared_matches_direct_evaluation() {
    let t = grid();
    for (k, arch) in Arch::ALL.into_iter().enumerate() {
        let m = model(arch, 80 + k as u64);
        let prep = PreparedOperator::new(m.clone(), t.clone()).unwrap();
        let bs: Vec<Vec<f64>> = (0..3).map(|s| input(90 + s, m.input_dim())).collect();
        let many = prep.eval_many(&bs).unwrap();
        for (b, got) in bs.iter().zip(&many) {
            let direct = m.evaluate(b, &t).unwrap();
            assert!(rel(got, direct.as_slice()) < 1e-12, "{arch}");
            assert_eq!(prep.evaluate(b).unwrap(), prep.evaluate(b).unwrap());
        }
    }
}

#[test]
fn structured_jacobian_agrees_with_reverse_products() {
    let t = grid();
    for (k, arch) in Arch::ALL.into_iter().enumerate() {
        let m = model(arch, 100 + k as u64);
        let prep = PreparedOperator::new(m.clone(), t.clone()).unwrap();
        let b = input(110, m.input_dim());
        let jac = prep.jacobian(&b).unwrap();
        assert_eq!(jac.shape(), (t.rows() * CHANNELS, m.input_dim()));
        let seed = input(120, t.rows() * CHANNELS);
        let via_jac = jac.tmatvec(&seed);
        let via_vjp = prep.vjp(&b, &seed).unwrap();
        assert!(rel(&via_jac, &via_vjp) < 1e-10, "{arch}: {}", rel(&via_jac, &via_vjp));
    }
}

#[test]
fn pod_gradient_factors_through_coefficient_head() {
    let t = grid();
    let m = model(Arch::Poddeeponet, 130);
    let prep = PreparedOperator::new(m.clone(), t.clone()).unwrap();
    let b = input(131, m.input_dim());
    let seed = input(132, t.rows() * CHANNELS);
    let pod = m.pod.as_ref().unwrap();
    // Project the seed onto each channel's modes, then pull back through J_g.
    let mut projected = Vec::new();
    for (c, basis) in pod.channels.iter().enumerate() {
        let sc: Vec<f64> = (0..t.rows()).map(|n| seed[n * CHANNELS + c]).collect();
        projected.extend(basis.phi.tmatvec(&sc));
    }
    let jg = prep.pod_coefficient_jacobian(&b).unwrap();
    let oracle = jg.tmatvec(&projected);
    assert!(rel(&prep.vjp(&b, &seed).unwrap(), &oracle) < 1e-10);
}

#[test]
fn gru_branch_is_order_sensitive() {
    let m = model(Arch::Sdeeponet, 140);
    let mut b = input(141, m.input_dim());
    let before = m.evaluate(&b, &grid()).unwrap();
    b.swap(2, 3);
    assert_ne!(before, m.evaluate(&b, &grid()).unwrap());
}

#[test]
fn wrong_input_length_is_a_model_mismatch() {
    let m = model(Arch::Nomad, 150);
    let err = m.evaluate(&[0.0; 3], &grid()).unwrap_err();
    assert!(matches!(err, Error::ModelMismatch(_)));
}

#[test]
fn pod_arch_requires_basis() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(OperatorModel::<f64>::new(Arch::Poddeeponet, cfg(), N_B2, None, &mut rng).is_err());
}

#[test]
fn arch_names_parse() {
    for a in Arch::ALL {
        assert_eq!(a.tag().parse::<Arch>().unwrap(), a);
        assert_eq!(a.display_name().parse::<Arch>().unwrap(), a);
    }
    assert!("fno".parse::<Arch>().is_err());
}

fn normalizer() -> crate::synthdata::Normalizer {
    let cfg = DatasetConfig {
        n_train: 4,
        n_test: 1,
        n_b2: N_B2,
        grid_x: 4,
        grid_z: 4,
        seed: 1,
    };
    Dataset::generate(cfg).unwrap().normalizer
}

#[test]
fn checkpoint_round_trips_every_arch() {
    let dir = tempfile::tempdir().unwrap();
    for (k, arch) in Arch::ALL.into_iter().enumerate() {
        let ck = Checkpoint {
            model: model(arch, 160 + k as u64),
            normalizer: normalizer(),
        };
        let path = dir.path().join(format!("{arch}.ckpt"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }
}

#[test]
fn checkpoint_rejects_corruption_and_mismatch() {
    let ck = Checkpoint {
        model: model(Arch::Nomad, 170),
        normalizer: normalizer(),
    };
    let mut bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    // Claim a different architecture in an otherwise intact file.
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    header["arch"] = "mimonet".into();
    let json = serde_json::to_vec(&header).unwrap();
    let mut forged = CHECKPOINT_MAGIC.to_vec();
    forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
    forged.extend_from_slice(&json);
    forged.extend_from_slice(&bytes[16 + hlen..]);
    assert!(matches!(Checkpoint::from_bytes(&forged), Err(Error::ModelMismatch(_))));
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
}

#[test]
fn f32_cast_tracks_f64() {
    let t = grid();
    for (k, arch) in Arch::ALL.into_iter().enumerate() {
        let m = model(arch, 180 + k as u64);
        let b = input(181, m.input_dim());
        let m32: OperatorModel<f32> = m.cast();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let o32 = m32.evaluate(&b32, &t.map_into()).unwrap();
        let o64 = m.evaluate(&b, &t).unwrap();
        let up: Vec<f64> = o32.as_slice().iter().map(|&v| v as f64).collect();
        assert!(rel(&up, o64.as_slice()) < 1e-5, "{arch}");
        let back: OperatorModel<f64> = m32.cast();
        assert_eq!(back.param_count(), m.param_count());
    }
}
