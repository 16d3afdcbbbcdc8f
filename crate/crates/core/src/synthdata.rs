//! Desk-scale synthetic heat-exchanger benchmark and its normalization.
//!
//! Each case draws inlet velocity, inlet temperature and peak wall heat flux
//! uniformly, discretizes the sinusoidal wall flux into the branch-2
//! profile, and evaluates a fixed analytic field operator on a regular
//! `(x, z)` grid over the unit square.
//!
//! Branch inputs are z-scored with training statistics (branch 2 shares one
//! pooled mean/std), trunk coordinates and the four output channels are
//! min-max scaled to `[-1, 1]`.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const CHANNELS: usize = 4;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["P", "u", "v", "w"];
/// Number of global (branch-1) inputs: inlet velocity and temperature.
pub const BRANCH1_DIM: usize = 2;

pub const V_IN_RANGE: (f64, f64) = (4.0, 5.0);
pub const T_IN_RANGE: (f64, f64) = (263.0, 323.0);
pub const Q_MAX_RANGE: (f64, f64) = (8_000.0, 20_000.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Number of wall heat-flux sample points (branch-2 width).
    pub n_b2: usize,
    pub grid_x: usize,
    pub grid_z: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 50,
            n_b2: 32,
            grid_x: 16,
            grid_z: 16,
            seed: 42,
        }
    }
}

impl DatasetConfig {
    pub fn n_points(&self) -> usize {
        self.grid_x * self.grid_z
    }

    /// Standardized branch width `d = 2 + n_b2`.
    pub fn input_dim(&self) -> usize {
        BRANCH1_DIM + self.n_b2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_test < 1 {
            return Err(Error::Config("n_train and n_test must be at least 1".into()));
        }
        if self.n_b2 < 4 {
            return Err(Error::Config(format!("n_b2 must be at least 4, got {}", self.n_b2)));
        }
        if self.grid_x < 2 || self.grid_z < 2 || self.n_points() < 16 {
            return Err(Error::Config(format!(
                "grid {}x{} must have at least 16 points and 2 per axis",
                self.grid_x, self.grid_z
            )));
        }
        Ok(())
    }
}

/// One benchmark case in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    /// Inlet velocity, m/s.
    pub v_in: f64,
    /// Inlet temperature, K.
    pub t_in: f64,
    /// Peak wall heat flux, W/m².
    pub q_max: f64,
    /// `q''(z_j) = q_max sin(pi z_j)` at the branch-2 stations, W/m².
    pub q_profile: Vec<f64>,
    /// `[N x 4]` fields `(P, u, v, w)` at the trunk points.
    pub fields: Matrix<f64>,
}

/// Physical branch inputs recovered from a standardized vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalInputs {
    pub v_in: f64,
    pub t_in: f64,
    pub q_profile: Vec<f64>,
}

/// Branch stations `z_j = j / (n_b2 - 1)`.
pub fn flux_stations(n_b2: usize) -> Vec<f64> {
    (0..n_b2).map(|j| j as f64 / (n_b2 - 1) as f64).collect()
}

pub fn heat_flux_profile(q_max: f64, n_b2: usize) -> Vec<f64> {
    flux_stations(n_b2)
        .into_iter()
        .map(|z| q_max * (PI * z).sin())
        .collect()
}

/// Regular grid over the unit square, x-major: point `i * grid_z + j` is
/// `(x_i, z_j)`.
pub fn unit_grid(grid_x: usize, grid_z: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(grid_x * grid_z, 2);
    for i in 0..grid_x {
        for j in 0..grid_z {
            let r = i * grid_z + j;
            m[(r, 0)] = i as f64 / (grid_x - 1) as f64;
            m[(r, 1)] = j as f64 / (grid_z - 1) as f64;
        }
    }
    m
}

/// Ground-truth `(P, u, v, w)` at `(x, z)`.
///
/// `Q(z) = q_max (1 - cos(pi z)) / pi` is the wall heat input accumulated
/// from the inlet.
pub fn analytic_fields(v_in: f64, t_in: f64, q_max: f64, x: f64, z: f64) -> [f64; CHANNELS] {
    let q_acc = q_max * (1.0 - (PI * z).cos()) / PI;
    let p = 101_325.0 - 40.0 * v_in * v_in * z + 2e-3 * q_acc * x * (1.0 - x);
    let u = 0.15 * v_in * (2.0 * PI * z).sin() * (1.0 - 2.0 * x);
    let v = 0.05 * v_in * (PI * x).sin() * (PI * z).cos() * (1.0 + (t_in - 293.0) / 300.0);
    let w = 4.0 * v_in * x * (1.0 - x) * (1.0 + 1e-5 * q_acc);
    [p, u, v, w]
}

impl RawSample {
    pub fn new(v_in: f64, t_in: f64, q_max: f64, n_b2: usize, trunk: &Matrix<f64>) -> Self {
        let mut fields = Matrix::zeros(trunk.rows(), CHANNELS);
        for r in 0..trunk.rows() {
            let f = analytic_fields(v_in, t_in, q_max, trunk[(r, 0)], trunk[(r, 1)]);
            fields.row_mut(r).copy_from_slice(&f);
        }
        Self {
            v_in,
            t_in,
            q_max,
            q_profile: heat_flux_profile(q_max, n_b2),
            fields,
        }
    }
}

/// Training-split statistics for every input and output normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub branch1_mean: [f64; BRANCH1_DIM],
    pub branch1_std: [f64; BRANCH1_DIM],
    pub branch2_mean: f64,
    pub branch2_std: f64,
    pub trunk_min: [f64; 2],
    pub trunk_max: [f64; 2],
    pub field_min: [f64; CHANNELS],
    pub field_max: [f64; CHANNELS],
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

impl Normalizer {
    /// Fits on the training split only. Standard deviations are population
    /// (divide by n).
    pub fn fit(train: &[RawSample], trunk: &Matrix<f64>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::DegenerateStatistic {
                what: "empty training split".into(),
            });
        }
        let (m_v, s_v) = mean_std(train.iter().map(|s| s.v_in));
        let (m_t, s_t) = mean_std(train.iter().map(|s| s.t_in));
        let (m_q, s_q) = mean_std(train.iter().flat_map(|s| s.q_profile.iter().copied()));
        for (what, s) in [("v_in", s_v), ("T_in", s_t), ("q'' profile", s_q)] {
            if !(s > 0.0) {
                return Err(Error::DegenerateStatistic { what: what.into() });
            }
        }
        let mut trunk_min = [0.0; 2];
        let mut trunk_max = [0.0; 2];
        for a in 0..2 {
            let (lo, hi) = min_max((0..trunk.rows()).map(|r| trunk[(r, a)]));
            if !(hi > lo) {
                return Err(Error::DegenerateStatistic {
                    what: format!("trunk axis {a}"),
                });
            }
            trunk_min[a] = lo;
            trunk_max[a] = hi;
        }
        let mut field_min = [0.0; CHANNELS];
        let mut field_max = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            let (lo, hi) = min_max(
                train
                    .iter()
                    .flat_map(|s| (0..s.fields.rows()).map(move |r| s.fields[(r, c)])),
            );
            if !(hi > lo) {
                return Err(Error::DegenerateStatistic {
                    what: format!("field channel {}", CHANNEL_NAMES[c]),
                });
            }
            field_min[c] = lo;
            field_max[c] = hi;
        }
        Ok(Self {
            branch1_mean: [m_v, m_t],
            branch1_std: [s_v, s_t],
            branch2_mean: m_q,
            branch2_std: s_q,
            trunk_min,
            trunk_max,
            field_min,
            field_max,
        })
    }

    /// `(mu_i, sigma_i)` of standardized coordinate `i`.
    pub fn input_stats(&self, i: usize) -> (f64, f64) {
        if i < BRANCH1_DIM {
            (self.branch1_mean[i], self.branch1_std[i])
        } else {
            (self.branch2_mean, self.branch2_std)
        }
    }

    pub fn standardize_inputs(&self, v_in: f64, t_in: f64, q_profile: &[f64]) -> Vec<f64> {
        let mut b = Vec::with_capacity(BRANCH1_DIM + q_profile.len());
        b.push((v_in - self.branch1_mean[0]) / self.branch1_std[0]);
        b.push((t_in - self.branch1_mean[1]) / self.branch1_std[1]);
        b.extend(q_profile.iter().map(|q| (q - self.branch2_mean) / self.branch2_std));
        b
    }

    /// Inverse of [`Normalizer::standardize_inputs`]: `b_i = mu_i + b~_i sigma_i`.
    pub fn destandardize_input(&self, b: &[f64]) -> Result<PhysicalInputs> {
        if b.len() <= BRANCH1_DIM {
            return Err(Error::InvalidInput(format!(
                "standardized input needs more than {BRANCH1_DIM} coordinates, got {}",
                b.len()
            )));
        }
        let phys = |i: usize| {
            let (mu, sigma) = self.input_stats(i);
            mu + b[i] * sigma
        };
        Ok(PhysicalInputs {
            v_in: phys(0),
            t_in: phys(1),
            q_profile: (BRANCH1_DIM..b.len()).map(phys).collect(),
        })
    }

    pub fn normalize_trunk(&self, trunk: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(trunk.rows(), 2, |r, a| {
            2.0 * (trunk[(r, a)] - self.trunk_min[a]) / (self.trunk_max[a] - self.trunk_min[a]) - 1.0
        })
    }

    pub fn normalize_fields(&self, fields: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(fields.rows(), CHANNELS, |r, c| {
            2.0 * (fields[(r, c)] - self.field_min[c]) / (self.field_max[c] - self.field_min[c]) - 1.0
        })
    }

    pub fn denormalize_fields(&self, fields: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(fields.rows(), CHANNELS, |r, c| {
            (fields[(r, c)] + 1.0) * 0.5 * (self.field_max[c] - self.field_min[c]) + self.field_min[c]
        })
    }

    pub fn standardize(&self, sample: &RawSample) -> StandardizedSample {
        StandardizedSample {
            b: self.standardize_inputs(sample.v_in, sample.t_in, &sample.q_profile),
            targets: self.normalize_fields(&sample.fields),
        }
    }
}

/// One case in model space. Trunk coordinates are shared across cases and
/// live on [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedSample {
    /// `b[0..2]` branch 1, `b[2..]` branch 2.
    pub b: Vec<f64>,
    /// `[N x 4]` targets, min-max scaled.
    pub targets: Matrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub in_bounds: bool,
    /// Squared Mahalanobis contribution of the perturbed coordinates,
    /// `sum b~_i^2` over the distinct perturbed set.
    pub mahalanobis_contrib: f64,
}

/// Checks that every perturbed standardized coordinate sits in `[-1, 1]`,
/// i.e. within one training standard deviation of the mean.
pub fn feasibility_check(b_adv: &[f64], perturbed: &[usize]) -> Result<FeasibilityReport> {
    let mut set: Vec<usize> = perturbed.to_vec();
    set.sort_unstable();
    set.dedup();
    if let Some(&bad) = set.iter().find(|&&i| i >= b_adv.len()) {
        return Err(Error::InvalidInput(format!(
            "perturbed index {bad} outside [0, {})",
            b_adv.len()
        )));
    }
    let in_bounds = set.iter().all(|&i| (-1.0..=1.0).contains(&b_adv[i]));
    let mahalanobis_contrib = set.iter().map(|&i| b_adv[i] * b_adv[i]).sum();
    Ok(FeasibilityReport {
        in_bounds,
        mahalanobis_contrib,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    /// `[N x 2]` physical coordinates.
    pub trunk: Matrix<f64>,
    pub train: Vec<RawSample>,
    pub test: Vec<RawSample>,
    pub normalizer: Normalizer,
}

impl Dataset {
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let trunk = unit_grid(config.grid_x, config.grid_z);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let total = config.n_train + config.n_test;
        let mut samples: Vec<RawSample> = (0..total)
            .map(|_| {
                let v = rng.random_range(V_IN_RANGE.0..=V_IN_RANGE.1);
                let t = rng.random_range(T_IN_RANGE.0..=T_IN_RANGE.1);
                let q = rng.random_range(Q_MAX_RANGE.0..=Q_MAX_RANGE.1);
                RawSample::new(v, t, q, config.n_b2, &trunk)
            })
            .collect();
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng);
        let mut slots: Vec<Option<RawSample>> = samples.drain(..).map(Some).collect();
        let mut take = |i: usize| slots[i].take().expect("each index used once");
        let train: Vec<RawSample> = order[..config.n_train].iter().map(|&i| take(i)).collect();
        let test: Vec<RawSample> = order[config.n_train..].iter().map(|&i| take(i)).collect();
        let normalizer = Normalizer::fit(&train, &trunk)?;
        Ok(Self {
            config,
            trunk,
            train,
            test,
            normalizer,
        })
    }

    pub fn trunk_norm(&self) -> Matrix<f64> {
        self.normalizer.normalize_trunk(&self.trunk)
    }

    pub fn standardized_train(&self) -> Vec<StandardizedSample> {
        self.train.iter().map(|s| self.normalizer.standardize(s)).collect()
    }

    pub fn standardized_test(&self) -> Vec<StandardizedSample> {
        self.test.iter().map(|s| self.normalizer.standardize(s)).collect()
    }

    /// Normalized test targets falling outside `[-1, 1]` (no clipping is
    /// applied; this only reports them).
    pub fn test_target_exceedances(&self) -> usize {
        self.standardized_test()
            .iter()
            .map(|s| s.targets.as_slice().iter().filter(|v| v.abs() > 1.0).count())
            .sum()
    }

    /// Writes `manifest.json` plus little-endian f64 arrays into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut arrays = Vec::new();
        let mut write = |name: &str, shape: Vec<usize>, data: &[f64]| -> Result<()> {
            let file = format!("{name}.bin");
            write_f64_file(&dir.join(&file), data)?;
            arrays.push(ArrayEntry {
                name: name.into(),
                file,
                shape,
            });
            Ok(())
        };
        write("trunk", vec![self.trunk.rows(), 2], self.trunk.as_slice())?;
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            let n = samples.len();
            let scalars: Vec<f64> = samples.iter().flat_map(|s| [s.v_in, s.t_in, s.q_max]).collect();
            write(&format!("{split}_scalars"), vec![n, 3], &scalars)?;
            let profiles: Vec<f64> = samples.iter().flat_map(|s| s.q_profile.iter().copied()).collect();
            write(&format!("{split}_profiles"), vec![n, self.config.n_b2], &profiles)?;
            let fields: Vec<f64> = samples
                .iter()
                .flat_map(|s| s.fields.as_slice().iter().copied())
                .collect();
            write(
                &format!("{split}_fields"),
                vec![n, self.trunk.rows(), CHANNELS],
                &fields,
            )?;
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            config: self.config,
            n_points: self.trunk.rows(),
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            scalar_columns: vec!["v_in".into(), "T_in".into(), "q_max".into()],
            normalizer: self.normalizer.clone(),
            test_target_exceedances: self.test_target_exceedances(),
            arrays,
        };
        let mut f = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_reader(fs::File::open(dir.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Format {
                kind: "dataset manifest",
                detail: format!("unknown format {:?}", manifest.format),
            });
        }
        let cfg = manifest.config;
        let read = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let entry = manifest
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Format {
                    kind: "dataset manifest",
                    detail: format!("missing array {name}"),
                })?;
            let data = read_f64_file(&dir.join(&entry.file))?;
            if data.len() != entry.shape.iter().product::<usize>() {
                return Err(Error::Format {
                    kind: "dataset array",
                    detail: format!("{name}: {} values for shape {:?}", data.len(), entry.shape),
                });
            }
            Ok((entry.shape.clone(), data))
        };
        let (tshape, tdata) = read("trunk")?;
        let trunk = Matrix::from_vec(tshape[0], 2, tdata);
        let n_points = trunk.rows();
        let load_split = |split: &str| -> Result<Vec<RawSample>> {
            let (sshape, scalars) = read(&format!("{split}_scalars"))?;
            let (_, profiles) = read(&format!("{split}_profiles"))?;
            let (_, fields) = read(&format!("{split}_fields"))?;
            let n = sshape[0];
            let per_field = n_points * CHANNELS;
            Ok((0..n)
                .map(|i| RawSample {
                    v_in: scalars[3 * i],
                    t_in: scalars[3 * i + 1],
                    q_max: scalars[3 * i + 2],
                    q_profile: profiles[i * cfg.n_b2..(i + 1) * cfg.n_b2].to_vec(),
                    fields: Matrix::from_vec(n_points, CHANNELS, fields[i * per_field..(i + 1) * per_field].to_vec()),
                })
                .collect())
        };
        let train = load_split("train")?;
        let test = load_split("test")?;
        Ok(Self {
            config: cfg,
            trunk,
            train,
            test,
            normalizer: manifest.normalizer,
        })
    }
}

const DATASET_FORMAT: &str = "opstress-dataset/1";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    config: DatasetConfig,
    n_points: usize,
    channels: Vec<String>,
    scalar_columns: Vec<String>,
    normalizer: Normalizer,
    test_target_exceedances: usize,
    /// Row-major little-endian f64 arrays.
    arrays: Vec<ArrayEntry>,
}

pub(crate) fn write_f64_file(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    f64s_from_le(&bytes).ok_or_else(|| Error::Format {
        kind: "f64 array",
        detail: format!("{}: length {} not a multiple of 8", path.display(), bytes.len()),
    })
}

pub(crate) fn f64s_from_le(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    )
}
