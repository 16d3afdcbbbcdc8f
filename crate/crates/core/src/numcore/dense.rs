use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use super::tape::{GradientTape, Parameterized};
use super::{NumError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Relu => x.max(T::zero()),
            Self::Tanh => x.tanh(),
            Self::Sigmoid => sigmoid(x),
            Self::Identity => x,
        }
    }

    /// Derivative expressed through the activated output `y`.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Self::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Self::Tanh => T::one() - y * y,
            Self::Sigmoid => y * (T::one() - y),
            Self::Identity => T::one(),
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Fully connected layer `y = act(W x + b)` with `W` stored `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weights = Matrix::from_fn(output, input, |_, _| T::lit(rng.random_range(-limit..=limit)));
        Self {
            weights,
            bias: vec![T::zero(); output],
            activation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_size(&self) -> usize {
        self.weights.rows()
    }

    /// Affine map plus activation over a batch `[B x in]`.
    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = Matrix::zeros(x.rows(), self.output_size());
        for r in 0..y.rows() {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(T::one(), x, false, &self.weights, true, T::one(), &mut y);
        if self.activation != Activation::Identity {
            let act = self.activation;
            y.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        y
    }
}

impl<T: Scalar> Parameterized<T> for DenseLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        let (r, c) = self.weights.shape();
        f(&format!("{prefix}.weight"), &[r, c], self.weights.as_slice());
        f(&format!("{prefix}.bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(self.weights.as_mut_slice());
        f(&mut self.bias);
    }
}

/// Dropout configuration for a training-mode forward pass.
///
/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` so inference
/// needs no rescaling.
pub struct Dropout<'a, R: ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Stack of dense layers. Dropout, when active, follows every layer except
/// the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<DenseLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Matrix<T>>,
    activated: Vec<Matrix<T>>,
    masks: Vec<Option<Vec<T>>>,
}

pub type MlpTape<T> = GradientTape<MlpCache<T>>;

impl<T: Scalar> Mlp<T> {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer is linear.
    pub fn glorot<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { hidden };
                DenseLayer::glorot(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize], hidden: Activation) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { hidden };
                DenseLayer::zeros(widths[i], widths[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_size)
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_size)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_size()];
        w.extend(self.layers.iter().map(DenseLayer::output_size));
        w
    }

    /// Gradient accumulator with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.input_size(), l.output_size(), l.activation))
                .collect(),
        }
    }

    fn check_input(&self, width: usize) -> Result<(), NumError> {
        match self.layers.first() {
            Some(l) if l.input_size() != width => Err(NumError::DimensionMismatch {
                layer: 0,
                expected: l.input_size(),
                found: width,
            }),
            _ => Ok(()),
        }
    }

    /// Inference over a batch `[B x in]`, dropout off.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>, NumError> {
        self.check_input(x.cols())?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    /// Training-mode forward that records a tape for [`Mlp::backward`].
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &Matrix<T>,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> Result<(Matrix<T>, MlpTape<T>), NumError> {
        self.check_input(x.cols())?;
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            activated: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h);
            cache.inputs.push(h);
            let mut next = y.clone();
            let mask = match dropout.as_mut() {
                Some(d) if i + 1 < n && d.rate > 0.0 => {
                    let keep = T::lit(1.0 / (1.0 - d.rate));
                    let mask: Vec<T> = (0..y.as_slice().len())
                        .map(|_| {
                            if d.rng.random::<f64>() < d.rate {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    for (v, m) in next.as_mut_slice().iter_mut().zip(&mask) {
                        *v *= *m;
                    }
                    Some(mask)
                }
                _ => None,
            };
            cache.activated.push(y);
            cache.masks.push(mask);
            h = next;
        }
        Ok((h, GradientTape::new(cache)))
    }

    /// Reverse sweep. Returns parameter gradients (shaped like `self`) and
    /// the gradient with respect to the batch input.
    pub fn backward(&self, tape: &mut MlpTape<T>, upstream: &Matrix<T>) -> Result<(Mlp<T>, Matrix<T>), NumError> {
        self.backward_impl(tape, upstream, true)
            .map(|(g, dx)| (g.expect("parameter gradients requested"), dx))
    }

    /// Reverse sweep producing only the input gradient.
    pub fn backward_input(&self, tape: &mut MlpTape<T>, upstream: &Matrix<T>) -> Result<Matrix<T>, NumError> {
        self.backward_impl(tape, upstream, false).map(|(_, dx)| dx)
    }

    fn backward_impl(
        &self,
        tape: &mut MlpTape<T>,
        upstream: &Matrix<T>,
        want_params: bool,
    ) -> Result<(Option<Mlp<T>>, Matrix<T>), NumError> {
        let cache = tape.take()?;
        let n = self.layers.len();
        if upstream.cols() != self.output_size() {
            return Err(NumError::DimensionMismatch {
                layer: n.saturating_sub(1),
                expected: self.output_size(),
                found: upstream.cols(),
            });
        }
        let mut grads = want_params.then(|| self.zeros_like());
        let mut g = upstream.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if let Some(mask) = &cache.masks[i] {
                for (v, m) in g.as_mut_slice().iter_mut().zip(mask) {
                    *v *= *m;
                }
            }
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                for (v, &y) in g.as_mut_slice().iter_mut().zip(cache.activated[i].as_slice()) {
                    *v *= act.derivative_from_output(y);
                }
            }
            if let Some(grads) = grads.as_mut() {
                let gl = &mut grads.layers[i];
                gemm(T::one(), &g, true, &cache.inputs[i], false, T::zero(), &mut gl.weights);
                for r in 0..g.rows() {
                    for (b, &v) in gl.bias.iter_mut().zip(g.row(r)) {
                        *b += v;
                    }
                }
            }
            let mut prev = Matrix::zeros(g.rows(), layer.input_size());
            gemm(T::one(), &g, false, &layer.weights, false, T::zero(), &mut prev);
            g = prev;
        }
        Ok((grads, g))
    }

    /// Jacobian `[out x in]` at a single input, by one reverse sweep over a
    /// batch of identical rows seeded with the identity.
    pub fn jacobian(&self, x: &[T]) -> Result<Matrix<T>, NumError> {
        let out = self.output_size();
        let rows = Matrix::from_fn(out, x.len(), |_, j| x[j]);
        let (_, mut tape) = self.forward_train::<super::NoRng>(&rows, None)?;
        self.backward_input(&mut tape, &Matrix::identity(out))
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
}

/// Single-vector forward through a layer list.
///
/// Dropout is active only when an RNG is supplied; the final layer never
/// receives dropout.
pub fn mlp_forward<T: Scalar, R: Rng + ?Sized>(
    layers: &[DenseLayer<T>],
    x: &[T],
    dropout_rate: f64,
    rng: Option<&mut R>,
) -> Result<Vec<T>, NumError> {
    let mut h = x.to_vec();
    let n = layers.len();
    let mut rng = rng;
    for (i, layer) in layers.iter().enumerate() {
        if layer.input_size() != h.len() {
            return Err(NumError::DimensionMismatch {
                layer: i,
                expected: layer.input_size(),
                found: h.len(),
            });
        }
        let mut y = layer.weights.matvec(&h);
        for (v, &b) in y.iter_mut().zip(&layer.bias) {
            *v = layer.activation.apply(*v + b);
        }
        if let Some(r) = rng.as_deref_mut() {
            if i + 1 < n && dropout_rate > 0.0 {
                let keep = T::lit(1.0 / (1.0 - dropout_rate));
                for v in y.iter_mut() {
                    *v = if r.random::<f64>() < dropout_rate {
                        T::zero()
                    } else {
                        *v * keep
                    };
                }
            }
        }
        h = y;
    }
    Ok(h)
}
