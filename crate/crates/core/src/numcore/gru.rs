use rand::Rng;

use super::dense::sigmoid;
use super::matrix::{gemm, Matrix};
use super::tape::{GradientTape, Parameterized};
use super::{NumError, Scalar};

/// One GRU layer:
///
/// ```text
/// r = σ(W_r x + U_r h + b_r)
/// z = σ(W_z x + U_z h + b_z)
/// n = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ n
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<T> {
    pub w_r: Matrix<T>,
    pub w_z: Matrix<T>,
    pub w_h: Matrix<T>,
    pub u_r: Matrix<T>,
    pub u_z: Matrix<T>,
    pub u_h: Matrix<T>,
    pub b_r: Vec<T>,
    pub b_z: Vec<T>,
    pub b_h: Vec<T>,
}

struct StepCache<T> {
    x: Matrix<T>,
    h_prev: Matrix<T>,
    r: Matrix<T>,
    z: Matrix<T>,
    n: Matrix<T>,
}

impl<T: Scalar> GruCell<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_r: Matrix::zeros(hidden, input),
            w_z: Matrix::zeros(hidden, input),
            w_h: Matrix::zeros(hidden, input),
            u_r: Matrix::zeros(hidden, hidden),
            u_z: Matrix::zeros(hidden, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_r: vec![T::zero(); hidden],
            b_z: vec![T::zero(); hidden],
            b_h: vec![T::zero(); hidden],
        }
    }

    /// Every weight and bias drawn from `U(-1/sqrt(h), 1/sqrt(h))`.
    pub fn uniform<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut cell = Self::zeros(input, hidden);
        let a = 1.0 / (hidden as f64).sqrt();
        cell.visit_params_mut(&mut |v| {
            v.iter_mut().for_each(|x| *x = T::lit(rng.random_range(-a..=a)));
        });
        cell
    }

    pub fn input_size(&self) -> usize {
        self.w_r.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_r.rows()
    }

    fn gate(&self, x: &Matrix<T>, w: &Matrix<T>, h: &Matrix<T>, u: &Matrix<T>, b: &[T]) -> Matrix<T> {
        let mut a = Matrix::zeros(x.rows(), self.hidden_size());
        for r in 0..a.rows() {
            a.row_mut(r).copy_from_slice(b);
        }
        gemm(T::one(), x, false, w, true, T::one(), &mut a);
        gemm(T::one(), h, false, u, true, T::one(), &mut a);
        a
    }

    fn step(&self, x: &Matrix<T>, h: &Matrix<T>) -> StepCache<T> {
        let r = self.gate(x, &self.w_r, h, &self.u_r, &self.b_r).map(sigmoid);
        let z = self.gate(x, &self.w_z, h, &self.u_z, &self.b_z).map(sigmoid);
        let mut rh = h.clone();
        for (v, &rv) in rh.as_mut_slice().iter_mut().zip(r.as_slice()) {
            *v *= rv;
        }
        let n = self.gate(x, &self.w_h, &rh, &self.u_h, &self.b_h).map(|v| v.tanh());
        StepCache {
            x: x.clone(),
            h_prev: h.clone(),
            r,
            z,
            n,
        }
    }

    fn next_hidden(c: &StepCache<T>) -> Matrix<T> {
        let mut h = c.h_prev.clone();
        for (((hv, &zv), &nv), &hp) in h
            .as_mut_slice()
            .iter_mut()
            .zip(c.z.as_slice())
            .zip(c.n.as_slice())
            .zip(c.h_prev.as_slice())
        {
            *hv = (T::one() - zv) * hp + zv * nv;
        }
        h
    }

    /// Backprop through one step. Accumulates into `grads` when given and
    /// returns `(dx, dh_prev)`.
    fn step_backward(
        &self,
        c: &StepCache<T>,
        dh: &Matrix<T>,
        grads: Option<&mut GruCell<T>>,
    ) -> (Matrix<T>, Matrix<T>) {
        let one = T::one();
        let len = dh.as_slice().len();
        let (rows, hid) = dh.shape();
        let mut da_z = Matrix::zeros(rows, hid);
        let mut da_n = Matrix::zeros(rows, hid);
        let mut dh_prev = Matrix::zeros(rows, hid);
        for i in 0..len {
            let g = dh.as_slice()[i];
            let z = c.z.as_slice()[i];
            let n = c.n.as_slice()[i];
            let hp = c.h_prev.as_slice()[i];
            da_z.as_mut_slice()[i] = g * (n - hp) * z * (one - z);
            da_n.as_mut_slice()[i] = g * z * (one - n * n);
            dh_prev.as_mut_slice()[i] = g * (one - z);
        }
        // d(r ⊙ h_prev) = da_n U_h
        let mut d_rh = Matrix::zeros(rows, hid);
        gemm(one, &da_n, false, &self.u_h, false, T::zero(), &mut d_rh);
        let mut da_r = Matrix::zeros(rows, hid);
        for i in 0..len {
            let r = c.r.as_slice()[i];
            let hp = c.h_prev.as_slice()[i];
            let g = d_rh.as_slice()[i];
            da_r.as_mut_slice()[i] = g * hp * r * (one - r);
            dh_prev.as_mut_slice()[i] += g * r;
        }
        gemm(one, &da_z, false, &self.u_z, false, one, &mut dh_prev);
        gemm(one, &da_r, false, &self.u_r, false, one, &mut dh_prev);

        let mut dx = Matrix::zeros(rows, self.input_size());
        gemm(one, &da_n, false, &self.w_h, false, T::zero(), &mut dx);
        gemm(one, &da_z, false, &self.w_z, false, one, &mut dx);
        gemm(one, &da_r, false, &self.w_r, false, one, &mut dx);

        if let Some(g) = grads {
            let mut rh = c.h_prev.clone();
            for (v, &rv) in rh.as_mut_slice().iter_mut().zip(c.r.as_slice()) {
                *v *= rv;
            }
            gemm(one, &da_n, true, &c.x, false, one, &mut g.w_h);
            gemm(one, &da_n, true, &rh, false, one, &mut g.u_h);
            gemm(one, &da_z, true, &c.x, false, one, &mut g.w_z);
            gemm(one, &da_z, true, &c.h_prev, false, one, &mut g.u_z);
            gemm(one, &da_r, true, &c.x, false, one, &mut g.w_r);
            gemm(one, &da_r, true, &c.h_prev, false, one, &mut g.u_r);
            for r in 0..rows {
                for j in 0..hid {
                    g.add_bias_grads(j, da_n[(r, j)], da_z[(r, j)], da_r[(r, j)]);
                }
            }
        }
        (dx, dh_prev)
    }

    fn add_bias_grads(&mut self, j: usize, dn: T, dz: T, dr: T) {
        self.b_h[j] += dn;
        self.b_z[j] += dz;
        self.b_r[j] += dr;
    }
}

impl<T: Scalar> Parameterized<T> for GruCell<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (name, m) in [
            ("w_r", &self.w_r),
            ("w_z", &self.w_z),
            ("w_h", &self.w_h),
            ("u_r", &self.u_r),
            ("u_z", &self.u_z),
            ("u_h", &self.u_h),
        ] {
            let (r, c) = m.shape();
            f(&format!("{prefix}.{name}"), &[r, c], m.as_slice());
        }
        for (name, b) in [("b_r", &self.b_r), ("b_z", &self.b_z), ("b_h", &self.b_h)] {
            f(&format!("{prefix}.{name}"), &[b.len()], b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(self.w_r.as_mut_slice());
        f(self.w_z.as_mut_slice());
        f(self.w_h.as_mut_slice());
        f(self.u_r.as_mut_slice());
        f(self.u_z.as_mut_slice());
        f(self.u_h.as_mut_slice());
        f(&mut self.b_r);
        f(&mut self.b_z);
        f(&mut self.b_h);
    }
}

/// Unidirectional stacked GRU; each layer consumes the hidden sequence of
/// the one below, starting from `h_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStack<T> {
    pub layers: Vec<GruCell<T>>,
}

pub struct GruCache<T> {
    steps: Vec<Vec<StepCache<T>>>,
}

pub type GruTape<T> = GradientTape<GruCache<T>>;

impl<T: Scalar> GruStack<T> {
    pub fn uniform<R: Rng + ?Sized>(input: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        assert!(depth >= 1, "GRU stack depth must be at least 1");
        let layers = (0..depth)
            .map(|i| GruCell::uniform(if i == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn zeros(input: usize, hidden: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| GruCell::zeros(if i == 0 { input } else { hidden }, hidden))
            .collect();
        Self { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size(), self.hidden_size(), self.layers.len())
    }

    fn check(&self, seq: &[Matrix<T>]) -> Result<(), NumError> {
        let first = seq.first().ok_or(NumError::EmptySequence)?;
        for x in seq {
            if x.cols() != self.input_size() {
                return Err(NumError::DimensionMismatch {
                    layer: 0,
                    expected: self.input_size(),
                    found: x.cols(),
                });
            }
            if x.rows() != first.rows() {
                return Err(NumError::LengthMismatch {
                    what: "sequence batch",
                    expected: first.rows(),
                    found: x.rows(),
                });
            }
        }
        Ok(())
    }

    /// Final hidden state `[B x hidden]` of the top layer. `seq[t]` is the
    /// batch input `[B x input]` at step `t`.
    pub fn forward(&self, seq: &[Matrix<T>]) -> Result<Matrix<T>, NumError> {
        Ok(self.forward_train(seq)?.0)
    }

    pub fn forward_train(&self, seq: &[Matrix<T>]) -> Result<(Matrix<T>, GruTape<T>), NumError> {
        self.check(seq)?;
        let batch = seq[0].rows();
        let mut inputs: Vec<Matrix<T>> = seq.to_vec();
        let mut steps = Vec::with_capacity(self.layers.len());
        for cell in &self.layers {
            let mut h = Matrix::zeros(batch, cell.hidden_size());
            let mut caches = Vec::with_capacity(inputs.len());
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let c = cell.step(x, &h);
                h = GruCell::next_hidden(&c);
                outputs.push(h.clone());
                caches.push(c);
            }
            steps.push(caches);
            inputs = outputs;
        }
        let last = inputs.pop().expect("non-empty sequence");
        Ok((last, GradientTape::new(GruCache { steps })))
    }

    /// Backprop through time from the gradient of the final hidden state.
    /// Returns parameter gradients and per-step input gradients.
    pub fn backward(
        &self,
        tape: &mut GruTape<T>,
        upstream: &Matrix<T>,
    ) -> Result<(GruStack<T>, Vec<Matrix<T>>), NumError> {
        let (g, dx) = self.backward_impl(tape, upstream, true)?;
        Ok((g.expect("parameter gradients requested"), dx))
    }

    pub fn backward_input(&self, tape: &mut GruTape<T>, upstream: &Matrix<T>) -> Result<Vec<Matrix<T>>, NumError> {
        Ok(self.backward_impl(tape, upstream, false)?.1)
    }

    fn backward_impl(
        &self,
        tape: &mut GruTape<T>,
        upstream: &Matrix<T>,
        want_params: bool,
    ) -> Result<(Option<GruStack<T>>, Vec<Matrix<T>>), NumError> {
        let cache = tape.take()?;
        let hidden = self.hidden_size();
        if upstream.cols() != hidden {
            return Err(NumError::DimensionMismatch {
                layer: self.layers.len() - 1,
                expected: hidden,
                found: upstream.cols(),
            });
        }
        let mut grads = want_params.then(|| self.zeros_like());
        let steps_len = cache.steps[0].len();
        let batch = upstream.rows();
        // Per-step gradient flowing into the outputs of the current layer.
        let mut d_out: Vec<Matrix<T>> = (0..steps_len).map(|_| Matrix::zeros(batch, hidden)).collect();
        d_out[steps_len - 1] = upstream.clone();
        for (li, cell) in self.layers.iter().enumerate().rev() {
            let mut d_in = Vec::with_capacity(steps_len);
            let mut dh_carry = Matrix::zeros(batch, hidden);
            let gl = grads.as_mut().map(|g| &mut g.layers[li]);
            let mut gl = gl;
            for t in (0..steps_len).rev() {
                let mut dh = d_out[t].clone();
                for (a, &b) in dh.as_mut_slice().iter_mut().zip(dh_carry.as_slice()) {
                    *a += b;
                }
                let (dx, dh_prev) = cell.step_backward(&cache.steps[li][t], &dh, gl.as_deref_mut());
                d_in.push(dx);
                dh_carry = dh_prev;
            }
            d_in.reverse();
            d_out = d_in;
        }
        Ok((grads, d_out))
    }
}

impl<T: Scalar> Parameterized<T> for GruStack<T> {
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

/// Final hidden state for a single sequence of input vectors.
pub fn gru_forward<T: Scalar>(stack: &GruStack<T>, sequence: &[Vec<T>]) -> Result<Vec<T>, NumError> {
    if sequence.is_empty() {
        return Err(NumError::EmptySequence);
    }
    let seq: Vec<Matrix<T>> = sequence
        .iter()
        .map(|x| Matrix::from_vec(1, x.len(), x.clone()))
        .collect();
    Ok(stack.forward(&seq)?.into_vec())
}
