//! Input-output sensitivity of a differentiable map at one input.
//!
//! The profile is built from the Jacobian column norms `s_i = ||J[:, i]||`.
//! Two summaries matter for sparse attacks:
//!
//! - `d_eff = (sum s)^2 / sum s^2`, the inverse Herfindahl index of the
//!   norms: 1 when one coordinate carries all sensitivity, `d` when all are
//!   equal.
//! - The two-factor split of the best linearized `k`-sparse attack,
//!   `E*(k) = M * rho(k)` with magnitude `M = eps ||s|| / ||f(b)||` and
//!   concentration `rho(k) = sqrt(sum_{top k} s^2) / ||s||`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::numcore::{norm2, Matrix};
use crate::operators::DifferentiableMap;

/// Full `[m x d]` Jacobian of `map` at `b`.
pub fn jacobian_exact<M: DifferentiableMap + ?Sized>(map: &M, b: &[f64]) -> Result<Matrix<f64>> {
    map.jacobian(b)
}

/// Euclidean norm of every column of `j`.
pub fn column_norms(j: &Matrix<f64>) -> Vec<f64> {
    let mut sq = vec![0.0; j.cols()];
    for r in 0..j.rows() {
        for (acc, v) in sq.iter_mut().zip(j.row(r)) {
            *acc += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Column norms estimated from `n_proj` Gaussian probes using reverse-mode
/// products only: `s_i^2 ~ mean_j (J^T g_j)_i^2`, unbiased for `s_i^2`.
pub fn jacobian_randomized<M: DifferentiableMap + ?Sized>(
    map: &M,
    b: &[f64],
    n_proj: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_proj == 0 {
        return Err(Error::InvalidInput("n_proj must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; map.input_dim()];
    let mut g = vec![0.0; map.output_dim()];
    for _ in 0..n_proj {
        for v in g.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let jt_g = map.vjp(b, &g)?;
        for (a, v) in acc.iter_mut().zip(&jt_g) {
            *a += v * v;
        }
    }
    Ok(acc.into_iter().map(|a| (a / n_proj as f64).sqrt()).collect())
}

fn check_profile(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::InvalidInput("sensitivity vector is empty".into()));
    }
    if let Some(v) = s.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "sensitivities must be finite and non-negative, got {v}"
        )));
    }
    if s.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroSensitivity);
    }
    Ok(())
}

/// Effective perturbation dimension `(sum s)^2 / sum s^2`.
pub fn d_eff(s: &[f64]) -> Result<f64> {
    check_profile(s)?;
    // Rescaling by the largest entry keeps the squares in range.
    let top = s.iter().copied().fold(0.0, f64::max);
    let (l1, l2sq) = s.iter().fold((0.0, 0.0), |(a, b), v| {
        let u = v / top;
        (a + u, b + u * u)
    });
    Ok(l1 * l1 / l2sq)
}

/// Indices of `s` ordered by decreasing value; ties keep index order.
pub fn descending_order(s: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    order
}

/// `rho(k)` for `k = 1..=d` (entry `k - 1`). The last entry is exactly 1.
pub fn rho_table(s: &[f64]) -> Result<Vec<f64>> {
    check_profile(s)?;
    let order = descending_order(s);
    let top = s[order[0]];
    let total: f64 = s.iter().map(|v| (v / top).powi(2)).sum();
    let mut acc = 0.0;
    let mut rho: Vec<f64> = order
        .iter()
        .map(|&i| {
            acc += (s[i] / top).powi(2);
            (acc / total).sqrt().min(1.0)
        })
        .collect();
    *rho.last_mut().expect("non-empty") = 1.0;
    Ok(rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoFactor {
    /// `eps * ||s|| / ||f(b)||`.
    pub magnitude: f64,
    pub rho_k: f64,
    /// `magnitude * rho_k`, the best first-order `k`-sparse relative error
    /// when the Jacobian columns are orthogonal.
    pub predicted: f64,
}

pub fn two_factor(s: &[f64], f_norm: f64, epsilon: f64, k: usize) -> Result<TwoFactor> {
    let rho = rho_table(s)?;
    if k == 0 || k > s.len() {
        return Err(Error::InvalidInput(format!("k = {k} outside [1, {}]", s.len())));
    }
    if !(f_norm > 0.0) || !f_norm.is_finite() {
        return Err(Error::ZeroReference);
    }
    let magnitude = epsilon * norm2(s) / f_norm;
    let rho_k = rho[k - 1];
    Ok(TwoFactor {
        magnitude,
        rho_k,
        predicted: magnitude * rho_k,
    })
}

/// One row of sensitivity output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub sample_id: usize,
    pub s: Vec<f64>,
    pub d_eff: f64,
    pub mean_col_norm: f64,
    /// `||f(b)||` of the clean output.
    pub f_norm: f64,
    pub epsilon: f64,
    /// Magnitude factor `M`.
    pub magnitude: f64,
    /// `rho(k)` at entry `k - 1`.
    pub rho: Vec<f64>,
    /// Coordinates by decreasing sensitivity.
    pub order: Vec<usize>,
    /// `S_k`, the sum of the `k` largest sensitivities, at entry `k - 1`.
    pub partial_sums: Vec<f64>,
}

impl SensitivityProfile {
    pub fn from_norms(sample_id: usize, s: Vec<f64>, f_norm: f64, epsilon: f64) -> Result<Self> {
        let d_eff = d_eff(&s)?;
        let rho = rho_table(&s)?;
        let tf = two_factor(&s, f_norm, epsilon, 1)?;
        let order = descending_order(&s);
        let mut acc = 0.0;
        let partial_sums = order
            .iter()
            .map(|&i| {
                acc += s[i];
                acc
            })
            .collect();
        Ok(Self {
            sample_id,
            mean_col_norm: s.iter().sum::<f64>() / s.len() as f64,
            d_eff,
            f_norm,
            epsilon,
            magnitude: tf.magnitude,
            rho,
            order,
            partial_sums,
            s,
        })
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    /// Predicted best `k`-sparse relative error, `M * rho(k)`.
    pub fn predicted_error(&self, k: usize) -> Option<f64> {
        k.checked_sub(1)
            .and_then(|i| self.rho.get(i))
            .map(|r| self.magnitude * r)
    }

    /// Whether the two-factor model puts this input in the vulnerable
    /// region `M * rho(k) > tau` for `k`-sparse attacks.
    pub fn vulnerable(&self, k: usize, tau: f64) -> bool {
        self.predicted_error(k).is_some_and(|e| e > tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum JacobianMethod {
    Exact,
    Randomized { n_proj: usize, seed: u64 },
}

/// Profile of `map` at `b`.
pub fn profile<M: DifferentiableMap + ?Sized>(
    map: &M,
    sample_id: usize,
    b: &[f64],
    epsilon: f64,
    method: JacobianMethod,
) -> Result<SensitivityProfile> {
    let s = match method {
        JacobianMethod::Exact => column_norms(&jacobian_exact(map, b)?),
        JacobianMethod::Randomized { n_proj, seed } => {
            jacobian_randomized(map, b, n_proj, derive_seed(seed, &format!("sensitivity/{sample_id}")))?
        }
    };
    let f_norm = norm2(&map.eval(b)?);
    SensitivityProfile::from_norms(sample_id, s, f_norm, epsilon)
}

/// Profiles for `(sample id, input)` pairs, computed in parallel and
/// returned in input order.
pub fn profile_samples<M: DifferentiableMap + ?Sized>(
    map: &M,
    samples: &[(usize, Vec<f64>)],
    epsilon: f64,
    method: JacobianMethod,
) -> Result<Vec<SensitivityProfile>> {
    samples
        .par_iter()
        .map(|(id, b)| profile(map, *id, b, epsilon, method))
        .collect()
}

/// Mean and population standard deviation of a statistic over samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: v.len(),
        })
    }
}

/// Per-model aggregate over a set of profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySummary {
    pub d_eff: MeanStd,
    pub s_norm: MeanStd,
    pub magnitude: MeanStd,
    /// Mean `rho(k)` over samples for each `k`.
    pub mean_rho: Vec<f64>,
}

pub fn summarize(profiles: &[SensitivityProfile]) -> Option<SensitivitySummary> {
    let first = profiles.first()?;
    let d = first.dim();
    if profiles.iter().any(|p| p.dim() != d) {
        return None;
    }
    let n = profiles.len() as f64;
    let mean_rho = (0..d)
        .map(|k| profiles.iter().map(|p| p.rho[k]).sum::<f64>() / n)
        .collect();
    Some(SensitivitySummary {
        d_eff: MeanStd::of(profiles.iter().map(|p| p.d_eff))?,
        s_norm: MeanStd::of(profiles.iter().map(|p| norm2(&p.s)))?,
        magnitude: MeanStd::of(profiles.iter().map(|p| p.magnitude))?,
        mean_rho,
    })
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(profiles: &[SensitivityProfile], mut out: W) -> Result<()> {
    for p in profiles {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
