//! Mini-batch Adam training with a plateau scheduler, early stopping and
//! best-weight restoration. Loss is mean squared error over all points and
//! channels in normalized space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{adam_step, AdamConfig, AdamState, Matrix, NoRng, Parameterized};
use crate::operators::{Arch, ModelConfig, OperatorModel, PodBasis};
use crate::synthdata::{Dataset, StandardizedSample, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub dropout: f64,
    /// Trailing fraction of the training split held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            plateau_factor: 0.5,
            plateau_patience: 10,
            min_lr: 1e-7,
            batch_size: 8,
            max_epochs: 300,
            early_stop_patience: 50,
            dropout: 0.1,
            val_fraction: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("plateau_factor", self.plateau_factor),
            ("min_lr", self.min_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.plateau_factor >= 1.0 {
            return Err(Error::Config("plateau_factor must be below 1".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("weight_decay must be >= 0 and dropout in [0, 1)".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "patience, batch size and epoch counts must be at least 1".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Halves (by `factor`) the learning rate once the monitored loss has failed
/// to improve for more than `patience` consecutive epochs. An epoch counts
/// as an improvement when it beats the best loss by a relative `1e-4`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    const THRESHOLD: f64 = 1e-4;

    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss; returns the new rate when it decays.
    pub fn step(&mut self, loss: f64) -> Option<f64> {
        if loss < self.best * (1.0 - Self::THRESHOLD) {
            self.best = loss;
            self.bad_epochs = 0;
            return None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            let next = (self.lr * self.factor).max(self.min_lr);
            if self.lr - next > 1e-12 * self.lr {
                self.lr = next;
                return Some(next);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrEvent {
    pub epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: Arch,
    /// All losses and errors are in normalized units.
    pub loss_space: String,
    pub param_count: usize,
    pub n_fit: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub lr_decays: Vec<LrEvent>,
    pub best_val_mse: f64,
    /// Mean over test samples of the per-sample relative L2 error.
    pub test_rel_l2: f64,
    pub test_rel_l2_per_channel: Vec<f64>,
    pub pod_ranks: Option<Vec<usize>>,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
}

/// `||pred - ref|| / ||ref||` over all entries.
pub fn relative_l2(pred: &Matrix<f64>, reference: &Matrix<f64>) -> Result<f64> {
    rel_l2_slices(pred.as_slice(), reference.as_slice())
}

/// Relative L2 error restricted to one channel of `[N x C]` fields.
pub fn relative_l2_channel(pred: &Matrix<f64>, reference: &Matrix<f64>, channel: usize) -> Result<f64> {
    if channel >= reference.cols() {
        return Err(Error::InvalidInput(format!("channel {channel} out of range")));
    }
    rel_l2_slices(&pred.column(channel), &reference.column(channel))
}

pub fn rel_l2_slices(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "prediction has {} entries, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    let den = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// Splits the training split into (fit, validation), validation being the
/// trailing `val_fraction`.
pub fn validation_split(n_train: usize, val_fraction: f64) -> Result<(usize, usize)> {
    if n_train < 2 {
        return Err(Error::InvalidInput(
            "training needs at least 2 samples for a validation split".into(),
        ));
    }
    let n_val = ((n_train as f64 * val_fraction).round() as usize).clamp(1, n_train - 1);
    Ok((n_train - n_val, n_val))
}

fn stack_inputs(samples: &[&StandardizedSample]) -> Matrix<f64> {
    let d = samples[0].b.len();
    Matrix::from_fn(samples.len(), d, |s, j| samples[s].b[j])
}

fn stack_targets(samples: &[&StandardizedSample]) -> Matrix<f64> {
    let (n, c) = samples[0].targets.shape();
    let mut data = Vec::with_capacity(samples.len() * n * c);
    for s in samples {
        data.extend_from_slice(s.targets.as_slice());
    }
    Matrix::from_vec(samples.len() * n, c, data)
}

/// Mean squared error of the model over `samples`, dropout off.
pub fn dataset_mse(model: &OperatorModel<f64>, samples: &[StandardizedSample], trunk: &Matrix<f64>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(16) {
        let refs: Vec<&StandardizedSample> = chunk.iter().collect();
        let (out, _) = model.forward_tape::<NoRng>(&stack_inputs(&refs), trunk, None)?;
        let target = stack_targets(&refs);
        sum += out
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        count += out.as_slice().len();
    }
    Ok(sum / count as f64)
}

/// Test metrics: mean per-sample relative L2 (aggregate and per channel).
pub fn evaluate_rel_l2(
    model: &OperatorModel<f64>,
    samples: &[StandardizedSample],
    trunk: &Matrix<f64>,
) -> Result<(f64, Vec<f64>)> {
    let mut agg = 0.0;
    let mut per = vec![0.0; CHANNELS];
    for s in samples {
        let pred = model.evaluate(&s.b, trunk)?;
        agg += relative_l2(&pred, &s.targets)?;
        for (c, acc) in per.iter_mut().enumerate() {
            *acc += relative_l2_channel(&pred, &s.targets, c)?;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((agg / n, per.into_iter().map(|v| v / n).collect()))
}

/// Trains `arch` on a generated dataset; the POD basis (if any) is built
/// from the fit portion of the training split.
pub fn train(
    arch: Arch,
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(OperatorModel<f64>, TrainReport)> {
    let trunk = dataset.trunk_norm();
    train_on(
        arch,
        &dataset.standardized_train(),
        &dataset.standardized_test(),
        &trunk,
        model_cfg,
        cfg,
    )
}

/// Training on pre-standardized samples sharing one set of trunk points.
pub fn train_on(
    arch: Arch,
    train: &[StandardizedSample],
    test: &[StandardizedSample],
    trunk: &Matrix<f64>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(OperatorModel<f64>, TrainReport)> {
    cfg.validate()?;
    model_cfg.validate()?;
    let (n_fit, n_val) = validation_split(train.len(), cfg.val_fraction)?;
    let (fit, val) = train.split_at(n_fit);
    let d = fit[0].b.len();
    if d < 3 {
        return Err(Error::InvalidInput(format!(
            "standardized inputs need at least 3 entries, got {d}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pod = if arch == Arch::Poddeeponet {
        let fields: Vec<Matrix<f64>> = fit.iter().map(|s| s.targets.clone()).collect();
        Some(PodBasis::from_fields(
            trunk,
            &fields,
            model_cfg.pod_energy,
            model_cfg.pod_max_rank,
        )?)
    } else {
        None
    };
    let mut model = OperatorModel::new(arch, *model_cfg, d - 2, pod, &mut rng)?;
    let mut params = model.flatten_params();
    let mut adam = AdamState::new(params.len());
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);

    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut train_mse = Vec::new();
    let mut val_mse = Vec::new();
    let mut lr_decays = Vec::new();
    let mut order: Vec<usize> = (0..n_fit).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&StandardizedSample> = idx.iter().map(|&i| &fit[i]).collect();
            let inputs = stack_inputs(&batch);
            let target = stack_targets(&batch);
            let (out, mut tape) = model.forward_tape(&inputs, trunk, Some((cfg.dropout, &mut rng)))?;
            let scale = 2.0 / out.as_slice().len() as f64;
            let mut up = Matrix::zeros(out.rows(), out.cols());
            let mut batch_sum = 0.0;
            for ((u, &o), &t) in up.as_mut_slice().iter_mut().zip(out.as_slice()).zip(target.as_slice()) {
                let r = o - t;
                batch_sum += r * r;
                *u = scale * r;
            }
            if !batch_sum.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "training loss is not finite".into(),
                });
            }
            sum += batch_sum;
            count += out.as_slice().len();
            let (grads, _) = model.backward_tape(&mut tape, &up, true)?;
            let grads = grads.expect("parameter gradients requested").flatten_params();
            adam_step(&mut params, &grads, &mut adam, &cfg.adam(sched.lr))?;
            model.load_params(&params)?;
        }
        let tr = sum / count as f64;
        let va = dataset_mse(&model, val, trunk)?;
        if !va.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "validation loss is not finite".into(),
            });
        }
        train_mse.push(tr);
        val_mse.push(va);
        log::debug!("{arch} epoch {epoch}: train {tr:.3e} val {va:.3e} lr {:.1e}", sched.lr);
        if va < best.0 {
            best = (va, epoch, params.clone());
        }
        if let Some(lr) = sched.step(va) {
            lr_decays.push(LrEvent { epoch, lr });
        }
        if epoch - best.1 >= cfg.early_stop_patience {
            break;
        }
    }

    model.load_params(&best.2)?;
    let (test_rel_l2, test_rel_l2_per_channel) = if test.is_empty() {
        (f64::NAN, vec![f64::NAN; CHANNELS])
    } else {
        evaluate_rel_l2(&model, test, trunk)?
    };
    let report = TrainReport {
        arch,
        loss_space: "normalized".into(),
        param_count: model.param_count(),
        n_fit,
        n_val,
        n_test: test.len(),
        epochs_run: train_mse.len(),
        best_epoch: best.1,
        train_mse,
        val_mse,
        lr_decays,
        best_val_mse: best.0,
        test_rel_l2,
        test_rel_l2_per_channel,
        pod_ranks: model.pod.as_ref().map(PodBasis::ranks),
        train_config: *cfg,
        model_config: *model_cfg,
    };
    log::info!(
        "{arch}: {} epochs (best {}), val MSE {:.3e}, test rel L2 {:.2}%",
        report.epochs_run,
        report.best_epoch,
        report.best_val_mse,
        100.0 * report.test_rel_l2
    );
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{unit_grid, DatasetConfig};

    #[test]
    fn relative_l2_examples() {
        let r = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        assert_eq!(relative_l2(&r, &r).unwrap(), 0.0);
        let scaled = r.map(|v| 1.3 * v);
        assert!((relative_l2(&scaled, &r).unwrap() - 0.3).abs() < 1e-12);
        let mut shifted = r.clone();
        shifted[(0, 0)] += r.frobenius_norm();
        assert!((relative_l2(&shifted, &r).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            relative_l2(&r, &Matrix::zeros(2, 2)),
            Err(Error::ZeroReference)
        ));
        assert!((relative_l2_channel(&scaled, &r, 1).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn two_plateaus_quarter_the_rate() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 10, 1e-7);
        let mut events = Vec::new();
        s.step(1.0);
        for epoch in 0..40 {
            if let Some(lr) = s.step(1.0) {
                events.push((epoch, lr));
            }
        }
        assert_eq!(events.len(), 3);
        assert_eq!(events[0], (10, 5e-4));
        assert!((events[1].1 - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn plateau_rate_floors_at_min() {
        let mut s = PlateauScheduler::new(1e-6, 0.5, 1, 1e-7);
        for _ in 0..100 {
            s.step(1.0);
        }
        assert_eq!(s.lr, 1e-7);
    }

    #[test]
    fn improvements_reset_patience() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 2, 1e-7);
        let mut loss = 1.0;
        for _ in 0..50 {
            loss *= 0.9;
            assert_eq!(s.step(loss), None);
        }
    }

    #[test]
    fn validation_is_trailing_tenth() {
        assert_eq!(validation_split(200, 0.1).unwrap(), (180, 20));
        assert_eq!(validation_split(2, 0.1).unwrap(), (1, 1));
        assert!(validation_split(1, 0.1).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            plateau_patience: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            dropout: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn constant_samples(n: usize, d: usize, points: usize) -> Vec<StandardizedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| StandardizedSample {
                b: (0..d).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect(),
                targets: Matrix::from_fn(points, CHANNELS, |_, c| 0.3 - 0.2 * c as f64),
            })
            .collect()
    }

    #[test]
    fn constant_targets_are_fit_by_every_arch() {
        let trunk = unit_grid(4, 4).map(|v| 2.0 * v - 1.0);
        let samples = constant_samples(20, 6, trunk.rows());
        let mcfg = ModelConfig {
            hidden: 16,
            latent: 8,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig {
            lr: 3e-3,
            max_epochs: 150,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        for arch in Arch::ALL {
            let (model, report) = train_on(arch, &samples, &[], &trunk, &mcfg, &tcfg).unwrap();
            let mse = dataset_mse(&model, &samples, &trunk).unwrap();
            assert!(mse < 1e-4, "{arch}: {mse}");
            for (e, &v) in report.val_mse.iter().enumerate() {
                assert!(report.best_val_mse <= v, "epoch {e}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let ds = Dataset::generate(DatasetConfig {
            n_train: 24,
            n_test: 4,
            n_b2: 6,
            grid_x: 4,
            grid_z: 4,
            seed: 9,
        })
        .unwrap();
        let mcfg = ModelConfig {
            hidden: 12,
            latent: 6,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig {
            max_epochs: 8,
            early_stop_patience: 3,
            ..TrainConfig::default()
        };
        for arch in [Arch::Nomad, Arch::Sdeeponet] {
            let (a, ra) = train(arch, &ds, &mcfg, &tcfg).unwrap();
            let (b, rb) = train(arch, &ds, &mcfg, &tcfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(ra, rb);
            let val: Vec<StandardizedSample> = ds.standardized_train()[ra.n_fit..].to_vec();
            let restored = dataset_mse(&a, &val, &ds.trunk_norm()).unwrap();
            assert!((restored - ra.best_val_mse).abs() <= 1e-12 * ra.best_val_mse);
            assert!(ra.val_mse.iter().all(|&v| ra.best_val_mse <= v));
        }
    }
}
