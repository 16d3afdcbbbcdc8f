use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Scalar};

/// Retained modes of one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBasis<T> {
    /// `[N x r]` with orthonormal columns.
    pub phi: Matrix<T>,
    /// Full singular spectrum of the snapshot matrix, descending.
    pub singular_values: Vec<f64>,
    /// Fraction of squared singular mass captured by the retained modes.
    pub retained_energy: f64,
}

impl<T: Scalar> ChannelBasis<T> {
    pub fn rank(&self) -> usize {
        self.phi.cols()
    }
}

/// Per-channel POD bases over a fixed set of (normalized) basis points.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis<T> {
    /// `[N x 2]` coordinates the basis rows live on.
    pub points: Matrix<T>,
    pub channels: Vec<ChannelBasis<T>>,
    /// Energy threshold the ranks were chosen against.
    pub energy: f64,
}

impl<T: Scalar> PodBasis<T> {
    /// Builds one basis per channel from normalized training fields.
    /// `fields[m]` is the `[N x C]` target of snapshot `m`.
    pub fn from_fields(points: &Matrix<T>, fields: &[Matrix<f64>], energy: f64, max_rank: usize) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidInput("POD needs at least two snapshots".into()))?;
        let (n, c) = first.shape();
        if n != points.rows() {
            return Err(Error::InvalidInput(format!(
                "snapshots have {n} points but the basis grid has {}",
                points.rows()
            )));
        }
        let channels = (0..c)
            .map(|ch| {
                let snaps = Matrix::from_fn(n, fields.len(), |i, m| fields[m][(i, ch)]);
                build_pod_basis(&snaps, energy, max_rank).map(|b| b.cast())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            points: points.clone(),
            channels,
            energy,
        })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.channels.iter().map(ChannelBasis::rank).collect()
    }

    pub fn total_rank(&self) -> usize {
        self.channels.iter().map(ChannelBasis::rank).sum()
    }

    /// Start of each channel's block in the coefficient vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.channels.len());
        let mut acc = 0;
        for ch in &self.channels {
            off.push(acc);
            acc += ch.rank();
        }
        off
    }

    /// Nearest basis point for every query point.
    pub fn lookup(&self, query: &Matrix<T>) -> Vec<usize> {
        (0..query.rows())
            .map(|q| {
                let (qx, qz) = (query[(q, 0)], query[(q, 1)]);
                let mut best = (0, T::infinity());
                for i in 0..self.points.rows() {
                    let d = (self.points[(i, 0)] - qx).powi(2) + (self.points[(i, 1)] - qz).powi(2);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best.0
            })
            .collect()
    }

    /// Basis rows gathered at the query points, one `[N_q x r_c]` per channel.
    pub fn gather(&self, query: &Matrix<T>) -> Vec<Matrix<T>> {
        let rows = self.lookup(query);
        self.channels
            .iter()
            .map(|ch| Matrix::from_fn(rows.len(), ch.rank(), |q, k| ch.phi[(rows[q], k)]))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> PodBasis<U> {
        PodBasis {
            points: self.points.map_into(),
            channels: self.channels.iter().map(ChannelBasis::cast).collect(),
            energy: self.energy,
        }
    }
}

impl<T: Scalar> ChannelBasis<T> {
    pub fn cast<U: Scalar>(&self) -> ChannelBasis<U> {
        ChannelBasis {
            phi: self.phi.map_into(),
            singular_values: self.singular_values.clone(),
            retained_energy: self.retained_energy,
        }
    }
}

/// Truncated left singular vectors of an `[N x M]` snapshot matrix.
///
/// Keeps the smallest `r` whose cumulative squared singular values reach
/// `energy` of the total, never more than the numerical rank or `max_rank`.
/// Snapshots are not mean-centered.
pub fn build_pod_basis(snapshots: &Matrix<f64>, energy: f64, max_rank: usize) -> Result<ChannelBasis<f64>> {
    let (n, m) = snapshots.shape();
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "POD needs at least two snapshots, got {m}"
        )));
    }
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidInput(format!("energy threshold {energy} outside (0, 1]")));
    }
    let svd = DMatrix::from_row_slice(n, m, snapshots.as_slice()).svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let tol = sigma.first().copied().unwrap_or(0.0) * (n.max(m) as f64) * f64::EPSILON;
    let numerical_rank = sigma.iter().filter(|&&s| s > tol).count();
    if numerical_rank == 0 {
        return Err(Error::InvalidInput("snapshot matrix is identically zero".into()));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut cum = 0.0;
    let mut r_energy = sigma.len();
    for (k, s) in sigma.iter().enumerate() {
        cum += s * s;
        // Relative slack absorbs round-off when singular values tie.
        if cum >= energy * total * (1.0 - 1e-12) {
            r_energy = k + 1;
            break;
        }
    }
    let r = r_energy.min(numerical_rank).min(max_rank);
    let phi = Matrix::from_fn(n, r, |i, k| u[(i, order[k])]);
    let retained_energy = sigma[..r].iter().map(|s| s * s).sum::<f64>() / total;
    Ok(ChannelBasis {
        phi,
        singular_values: sigma,
        retained_energy,
    })
}
