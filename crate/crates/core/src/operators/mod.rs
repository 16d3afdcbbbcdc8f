//! The four-model operator zoo behind one evaluation interface
//! `f(b, trunk) -> [N x C]` fields.
//!
//! All models split the standardized input `b` into branch 1 (the two
//! global parameters) and branch 2 (the boundary profile). MIMONet
//! concatenates the branch and trunk encodings and decodes each point on its
//! own; the other three fuse the branches by element-wise sum:
//!
//! - NOMAD decodes `Flatten(b ⊙ t(y))`, with the trunk producing a
//!   channel-major `[C x p]` block per point.
//! - S-DeepONet runs branch 2 through a GRU and takes the per-channel inner
//!   product `sum_i b_i t_{c,i}(y) + bias_c`.
//! - POD-DeepONet predicts per-channel coefficients and reconstructs each
//!   channel in a fixed POD basis.
//!
//! Flattened outputs are row-major over `[N x C]`: entry `n * C + c`.

mod checkpoint;
mod map;
mod pod;
mod prepared;
mod tape;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Activation, GruStack, Matrix, Mlp, Parameterized, Scalar};
use crate::synthdata::{BRANCH1_DIM, CHANNELS};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use map::{DifferentiableMap, LinearMap};
pub use pod::{build_pod_basis, ChannelBasis, PodBasis};
pub use prepared::PreparedOperator;
pub use tape::{ModelCache, ModelTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mimonet,
    Nomad,
    Sdeeponet,
    Poddeeponet,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Mimonet, Arch::Nomad, Arch::Sdeeponet, Arch::Poddeeponet];

    /// Lower-case tag used in file names and configs.
    pub fn tag(self) -> &'static str {
        match self {
            Arch::Mimonet => "mimonet",
            Arch::Nomad => "nomad",
            Arch::Sdeeponet => "sdeeponet",
            Arch::Poddeeponet => "poddeeponet",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Arch::Mimonet => "MIMONet",
            Arch::Nomad => "NOMAD",
            Arch::Sdeeponet => "S-DeepONet",
            Arch::Poddeeponet => "POD-DeepONet",
        }
    }

    /// Branch fusion is an element-wise sum for every model but MIMONet.
    pub fn fuses_branches(self) -> bool {
        self != Arch::Mimonet
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Arch::ALL
            .into_iter()
            .find(|a| a.tag() == key)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

/// Width and depth settings shared by all four architectures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Latent width `p`; also the GRU hidden size so the branches can be
    /// summed.
    pub latent: usize,
    pub gru_layers: usize,
    pub activation: Activation,
    pub pod_energy: f64,
    pub pod_max_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            hidden_layers: 2,
            latent: 32,
            gru_layers: 2,
            activation: Activation::Relu,
            pod_energy: 0.995,
            pod_max_rank: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.hidden_layers == 0 || self.gru_layers == 0 {
            return Err(Error::Config("model widths and depths must be positive".into()));
        }
        if !(self.pod_energy > 0.0 && self.pod_energy <= 1.0) || self.pod_max_rank == 0 {
            return Err(Error::Config(
                "POD energy must lie in (0, 1] and the rank cap be positive".into(),
            ));
        }
        Ok(())
    }

    fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        w.push(output);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Branch2<T> {
    Mlp(Mlp<T>),
    Gru(GruStack<T>),
}

impl<T: Scalar> Branch2<T> {
    fn zeros_like(&self) -> Self {
        match self {
            Branch2::Mlp(m) => Branch2::Mlp(m.zeros_like()),
            Branch2::Gru(g) => Branch2::Gru(g.zeros_like()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel<T> {
    pub arch: Arch,
    pub config: ModelConfig,
    pub n_b2: usize,
    pub branch1: Mlp<T>,
    pub branch2: Branch2<T>,
    /// Absent for POD-DeepONet, whose spatial structure is the basis.
    pub trunk: Option<Mlp<T>>,
    /// Decoder (MIMONet, NOMAD) or coefficient head (POD-DeepONet).
    pub head: Option<Mlp<T>>,
    /// Per-channel output bias; S-DeepONet only, empty otherwise.
    pub bias: Vec<T>,
    pub pod: Option<PodBasis<T>>,
}

impl<T: Scalar> OperatorModel<T> {
    /// Glorot-initialized model. POD-DeepONet requires its basis up front
    /// because the coefficient head width depends on the retained ranks.
    pub fn new<R: Rng + ?Sized>(
        arch: Arch,
        config: ModelConfig,
        n_b2: usize,
        pod: Option<PodBasis<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(arch, config, n_b2, pod, Some(rng))
    }

    /// All-zero parameters with the same layout as [`OperatorModel::new`].
    pub fn zeros(arch: Arch, config: ModelConfig, n_b2: usize, pod: Option<PodBasis<T>>) -> Result<Self> {
        Self::build::<crate::numcore::NoRng>(arch, config, n_b2, pod, None)
    }

    fn build<R: Rng + ?Sized>(
        arch: Arch,
        config: ModelConfig,
        n_b2: usize,
        pod: Option<PodBasis<T>>,
        mut rng: Option<&mut R>,
    ) -> Result<Self> {
        config.validate()?;
        if n_b2 == 0 {
            return Err(Error::Config("branch 2 needs at least one input".into()));
        }
        let (p, act, c) = (config.latent, config.activation, CHANNELS);
        match (arch, &pod) {
            (Arch::Poddeeponet, None) => return Err(Error::ModelMismatch("POD-DeepONet requires a POD basis".into())),
            (Arch::Poddeeponet, Some(b)) if b.channels.len() != c => {
                return Err(Error::ModelMismatch(format!(
                    "POD basis has {} channels, expected {c}",
                    b.channels.len()
                )))
            }
            (a, Some(_)) if a != Arch::Poddeeponet => {
                return Err(Error::ModelMismatch(format!("{a} does not take a POD basis")))
            }
            _ => {}
        }
        let mlp = |w: Vec<usize>, rng: &mut Option<&mut R>| match rng.as_deref_mut() {
            Some(r) => Mlp::glorot(&w, act, r),
            None => Mlp::zeros(&w, act),
        };
        // Draw order (branch 1, branch 2, trunk, head) fixes the init stream.
        let branch1 = mlp(config.widths(BRANCH1_DIM, p), &mut rng);
        let branch2 = if arch == Arch::Sdeeponet {
            Branch2::Gru(match rng.as_deref_mut() {
                Some(r) => GruStack::uniform(1, p, config.gru_layers, r),
                None => GruStack::zeros(1, p, config.gru_layers),
            })
        } else {
            Branch2::Mlp(mlp(config.widths(n_b2, p), &mut rng))
        };
        let (trunk, head) = match arch {
            Arch::Mimonet => (
                Some(mlp(config.widths(2, p), &mut rng)),
                Some(mlp(config.widths(3 * p, c), &mut rng)),
            ),
            Arch::Nomad => (
                Some(mlp(config.widths(2, c * p), &mut rng)),
                Some(mlp(config.widths(c * p, c), &mut rng)),
            ),
            Arch::Sdeeponet => (Some(mlp(config.widths(2, c * p), &mut rng)), None),
            Arch::Poddeeponet => {
                let total = pod.as_ref().map_or(0, PodBasis::total_rank);
                (None, Some(mlp(config.widths(p, total), &mut rng)))
            }
        };
        let bias = if arch == Arch::Sdeeponet {
            vec![T::zero(); c]
        } else {
            Vec::new()
        };
        Ok(Self {
            arch,
            config,
            n_b2,
            branch1,
            branch2,
            trunk,
            head,
            bias,
            pod,
        })
    }

    pub fn input_dim(&self) -> usize {
        BRANCH1_DIM + self.n_b2
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn latent(&self) -> usize {
        self.config.latent
    }

    /// Gradient accumulator: same trainable layout, no POD basis.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            config: self.config,
            n_b2: self.n_b2,
            branch1: self.branch1.zeros_like(),
            branch2: self.branch2.zeros_like(),
            trunk: self.trunk.as_ref().map(Mlp::zeros_like),
            head: self.head.as_ref().map(Mlp::zeros_like),
            bias: vec![T::zero(); self.bias.len()],
            pod: None,
        }
    }

    /// Converts every parameter (and the POD basis) to another precision.
    pub fn cast<U: Scalar>(&self) -> OperatorModel<U> {
        let pod = self.pod.as_ref().map(PodBasis::cast);
        let mut out = OperatorModel::<U>::zeros(self.arch, self.config, self.n_b2, pod)
            .expect("layout of an existing model is valid");
        let flat: Vec<U> = self
            .flatten_params()
            .into_iter()
            .map(|v| U::lit(v.to_f64_lossy()))
            .collect();
        out.load_params(&flat).expect("identical layouts");
        out
    }

    fn check_input(&self, b: &[T]) -> Result<()> {
        if b.len() != self.input_dim() {
            return Err(Error::ModelMismatch(format!(
                "{} expects {} standardized inputs, got {}",
                self.arch,
                self.input_dim(),
                b.len()
            )));
        }
        Ok(())
    }

    /// One forward evaluation with dropout off: `[N x C]` fields in
    /// normalized units at the given normalized trunk points.
    pub fn evaluate(&self, b: &[T], trunk: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(b)?;
        let inputs = Matrix::from_vec(1, b.len(), b.to_vec());
        let (out, _) = self.forward_tape::<crate::numcore::NoRng>(&inputs, trunk, None)?;
        if !out.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(out)
    }

    /// Vector-Jacobian product `J^T seed` at `b`, where `seed` is a flattened
    /// `[N x C]` direction.
    pub fn model_gradient(&self, b: &[T], trunk: &Matrix<T>, seed: &[T]) -> Result<Vec<T>> {
        self.check_input(b)?;
        let c = self.channels();
        if seed.len() != trunk.rows() * c {
            return Err(Error::InvalidInput(format!(
                "seed direction has length {}, expected {}",
                seed.len(),
                trunk.rows() * c
            )));
        }
        let inputs = Matrix::from_vec(1, b.len(), b.to_vec());
        let (_, mut tape) = self.forward_tape::<crate::numcore::NoRng>(&inputs, trunk, None)?;
        let upstream = Matrix::from_vec(trunk.rows(), c, seed.to_vec());
        let (_, db) = self.backward_tape(&mut tape, &upstream, false)?;
        Ok(db.into_vec())
    }
}

impl<T: Scalar> Parameterized<T> for OperatorModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        let p = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.branch1.visit_params(&p("branch1"), f);
        match &self.branch2 {
            Branch2::Mlp(m) => m.visit_params(&p("branch2"), f),
            Branch2::Gru(g) => g.visit_params(&p("branch2"), f),
        }
        if let Some(t) = &self.trunk {
            t.visit_params(&p("trunk"), f);
        }
        if let Some(h) = &self.head {
            h.visit_params(&p("head"), f);
        }
        if !self.bias.is_empty() {
            f(&p("bias"), &[self.bias.len()], &self.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.branch1.visit_params_mut(f);
        match &mut self.branch2 {
            Branch2::Mlp(m) => m.visit_params_mut(f),
            Branch2::Gru(g) => g.visit_params_mut(f),
        }
        if let Some(t) = &mut self.trunk {
            t.visit_params_mut(f);
        }
        if let Some(h) = &mut self.head {
            h.visit_params_mut(f);
        }
        if !self.bias.is_empty() {
            f(&mut self.bias);
        }
    }
}

#[cfg(test)]
mod tests;
