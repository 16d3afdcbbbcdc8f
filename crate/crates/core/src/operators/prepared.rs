use rayon::prelude::*;

use super::{Arch, Branch2, DifferentiableMap, OperatorModel};
use crate::error::{Error, Result};
use crate::numcore::{gemm, Activation, Matrix, Mlp, NoRng, Scalar};
use crate::synthdata::BRANCH1_DIM;

/// A model bound to a fixed set of trunk points.
///
/// Everything that does not depend on `b` (trunk features, gathered POD
/// rows, the trunk side of the first decoder layer for NOMAD and MIMONet) is
/// computed once,
/// so repeated evaluations during an attack only run the branch-dependent
/// part. Results are identical to [`OperatorModel::evaluate`] up to
/// floating-point reassociation.
#[derive(Debug, Clone)]
pub struct PreparedOperator<T> {
    model: OperatorModel<T>,
    trunk: Matrix<T>,
    trunk_feat: Option<Matrix<T>>,
    pod_rows: Vec<Matrix<T>>,
    mimo: Option<MimoSplit<T>>,
    nomad: Option<NomadFold<T>>,
}

/// NOMAD's first decoder layer with the trunk folded in. The layer sees
/// `z_{c,i}(y) = b_i t_{c,i}(y)`, so its pre-activation at point `n` is
/// `sum_i b_i A[i, n*h + j] + bias_j` with
/// `A[i, n*h + j] = sum_c W[j, c*p + i] t_{c,i}(y_n)`.
#[derive(Debug, Clone)]
struct NomadFold<T> {
    /// `[p x N*h]`.
    a: Matrix<T>,
    bias: Vec<T>,
    activation: Activation,
    rest: Mlp<T>,
}

#[derive(Debug, Clone)]
struct MimoSplit<T> {
    /// Branch columns of the first decoder layer, `[h x 2p]`.
    w_branch: Matrix<T>,
    /// Trunk contribution plus bias of the first decoder layer, `[N x h]`.
    trunk_pre: Matrix<T>,
    activation: Activation,
    rest: Mlp<T>,
}

impl<T: Scalar> PreparedOperator<T> {
    pub fn new(model: OperatorModel<T>, trunk: Matrix<T>) -> Result<Self> {
        if trunk.cols() != 2 {
            return Err(Error::InvalidInput(format!(
                "trunk points must be 2-D, got {}",
                trunk.cols()
            )));
        }
        let trunk_feat = match &model.trunk {
            Some(t) => Some(t.forward(&trunk)?),
            None => None,
        };
        let pod_rows = model.pod.as_ref().map(|p| p.gather(&trunk)).unwrap_or_default();
        let mimo = if model.arch == Arch::Mimonet {
            let p = model.latent();
            let head = model.head.as_ref().expect("MIMONet has a decoder");
            let first = &head.layers[0];
            let feat = trunk_feat.as_ref().expect("MIMONet has a trunk");
            let w_trunk = first.weights.columns(2 * p, p);
            let mut trunk_pre = Matrix::from_fn(trunk.rows(), first.output_size(), |_, j| first.bias[j]);
            gemm(T::one(), feat, false, &w_trunk, true, T::one(), &mut trunk_pre);
            Some(MimoSplit {
                w_branch: first.weights.columns(0, 2 * p),
                trunk_pre,
                activation: first.activation,
                rest: Mlp {
                    layers: head.layers[1..].to_vec(),
                },
            })
        } else {
            None
        };
        let nomad = if model.arch == Arch::Nomad {
            let p = model.latent();
            let head = model.head.as_ref().expect("NOMAD has a decoder");
            let first = &head.layers[0];
            let feat = trunk_feat.as_ref().expect("NOMAD has a trunk");
            let (n, h, c) = (trunk.rows(), first.output_size(), model.channels());
            let mut a = Matrix::zeros(p, n * h);
            for i in 0..p {
                let row = a.row_mut(i);
                for pt in 0..n {
                    let tr = feat.row(pt);
                    for j in 0..h {
                        let w = first.weights.row(j);
                        row[pt * h + j] = (0..c).fold(T::zero(), |acc, ch| acc + w[ch * p + i] * tr[ch * p + i]);
                    }
                }
            }
            Some(NomadFold {
                a,
                bias: first.bias.clone(),
                activation: first.activation,
                rest: Mlp {
                    layers: head.layers[1..].to_vec(),
                },
            })
        } else {
            None
        };
        Ok(Self {
            model,
            trunk,
            trunk_feat,
            pod_rows,
            mimo,
            nomad,
        })
    }

    pub fn model(&self) -> &OperatorModel<T> {
        &self.model
    }

    pub fn trunk(&self) -> &Matrix<T> {
        &self.trunk
    }

    pub fn n_points(&self) -> usize {
        self.trunk.rows()
    }

    fn check(&self, inputs: &Matrix<T>) -> Result<()> {
        if inputs.cols() != self.model.input_dim() {
            return Err(Error::ModelMismatch(format!(
                "{} expects {} standardized inputs, got {}",
                self.model.arch,
                self.model.input_dim(),
                inputs.cols()
            )));
        }
        Ok(())
    }

    fn branches(&self, inputs: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let bsz = inputs.rows();
        let m = &self.model;
        let x1 = Matrix::from_fn(bsz, BRANCH1_DIM, |s, j| inputs[(s, j)]);
        let b1 = m.branch1.forward(&x1)?;
        let b2 = match &m.branch2 {
            Branch2::Mlp(net) => net.forward(&Matrix::from_fn(bsz, m.n_b2, |s, j| inputs[(s, BRANCH1_DIM + j)]))?,
            Branch2::Gru(g) => {
                let seq: Vec<Matrix<T>> = (0..m.n_b2)
                    .map(|t| Matrix::from_fn(bsz, 1, |s, _| inputs[(s, BRANCH1_DIM + t)]))
                    .collect();
                g.forward(&seq)?
            }
        };
        Ok((b1, b2))
    }

    /// Fields for a batch `[B x d]`, returned as `[B*N x C]` (row
    /// `s * N + n`).
    pub fn evaluate_rows(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(inputs)?;
        let m = &self.model;
        let (bsz, n, c, p) = (inputs.rows(), self.n_points(), m.channels(), m.latent());
        let (b1, b2) = self.branches(inputs)?;
        let fused = Matrix::from_fn(bsz, p, |s, i| b1[(s, i)] + b2[(s, i)]);
        let mut out = Matrix::zeros(bsz * n, c);
        match m.arch {
            Arch::Nomad => {
                let fold = self.nomad.as_ref().expect("NOMAD fold");
                let h = fold.bias.len();
                let mut pre = Matrix::zeros(bsz, n * h);
                gemm(T::one(), &fused, false, &fold.a, false, T::zero(), &mut pre);
                let mut z = Matrix::from_vec(bsz * n, h, pre.into_vec());
                for r in 0..bsz * n {
                    for (v, &bj) in z.row_mut(r).iter_mut().zip(&fold.bias) {
                        *v = fold.activation.apply(*v + bj);
                    }
                }
                out = fold.rest.forward(&z)?;
            }
            Arch::Sdeeponet => {
                let t = self.trunk_feat.as_ref().expect("trunk");
                let mut oc = Matrix::zeros(bsz, n);
                for ch in 0..c {
                    gemm(T::one(), &fused, false, &t.columns(ch * p, p), true, T::zero(), &mut oc);
                    for s in 0..bsz {
                        for pt in 0..n {
                            out[(s * n + pt, ch)] = oc[(s, pt)] + m.bias[ch];
                        }
                    }
                }
            }
            Arch::Poddeeponet => {
                let alpha = m.head.as_ref().expect("coefficient head").forward(&fused)?;
                let offsets = m.pod.as_ref().expect("basis").offsets();
                let mut oc = Matrix::zeros(bsz, n);
                for (ch, rows) in self.pod_rows.iter().enumerate() {
                    gemm(
                        T::one(),
                        &alpha.columns(offsets[ch], rows.cols()),
                        false,
                        rows,
                        true,
                        T::zero(),
                        &mut oc,
                    );
                    for s in 0..bsz {
                        for pt in 0..n {
                            out[(s * n + pt, ch)] = oc[(s, pt)];
                        }
                    }
                }
            }
            Arch::Mimonet => {
                let split = self.mimo.as_ref().expect("MIMONet split");
                let cat = Matrix::from_fn(bsz, 2 * p, |s, j| if j < p { b1[(s, j)] } else { b2[(s, j - p)] });
                let mut pre_b = Matrix::zeros(bsz, split.w_branch.rows());
                gemm(T::one(), &cat, false, &split.w_branch, true, T::zero(), &mut pre_b);
                let h = Matrix::from_fn(bsz * n, pre_b.cols(), |r, j| {
                    split.activation.apply(pre_b[(r / n, j)] + split.trunk_pre[(r % n, j)])
                });
                out = split.rest.forward(&h)?;
            }
        }
        Ok(out)
    }

    /// `[N x C]` fields at one standardized input.
    pub fn evaluate(&self, b: &[T]) -> Result<Matrix<T>> {
        let out = self.evaluate_rows(&Matrix::from_vec(1, b.len(), b.to_vec()))?;
        if !out.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(out)
    }

    /// One `[N x C]` field per row of `inputs`.
    pub fn evaluate_batch(&self, inputs: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let rows = self.evaluate_rows(inputs)?;
        let (n, c) = (self.n_points(), self.model.channels());
        let data = rows.into_vec();
        Ok(data
            .chunks(n * c)
            .map(|chunk| Matrix::from_vec(n, c, chunk.to_vec()))
            .collect())
    }

    /// `J^T seed` for a flattened `[N x C]` seed.
    pub fn vjp(&self, b: &[T], seed: &[T]) -> Result<Vec<T>> {
        self.model.model_gradient(b, &self.trunk, seed)
    }

    /// Jacobians of the two branch encoders, `[p x 2]` and `[p x n_b2]`.
    pub fn branch_jacobians(&self, b: &[T]) -> Result<(Matrix<T>, Matrix<T>)> {
        let m = &self.model;
        if b.len() != m.input_dim() {
            return Err(Error::ModelMismatch(format!(
                "expected {} inputs, got {}",
                m.input_dim(),
                b.len()
            )));
        }
        let jb1 = m.branch1.jacobian(&b[..BRANCH1_DIM])?;
        let jb2 = match &m.branch2 {
            Branch2::Mlp(net) => net.jacobian(&b[BRANCH1_DIM..])?,
            Branch2::Gru(g) => {
                let p = g.hidden_size();
                let seq: Vec<Matrix<T>> = b[BRANCH1_DIM..]
                    .iter()
                    .map(|&v| Matrix::from_vec(p, 1, vec![v; p]))
                    .collect();
                let (_, mut tape) = g.forward_train(&seq)?;
                let steps = g.backward_input(&mut tape, &Matrix::identity(p))?;
                Matrix::from_fn(p, steps.len(), |i, t| steps[t][(i, 0)])
            }
        };
        Ok((jb1, jb2))
    }

    /// Jacobians of the flattened output with respect to the two branch
    /// encodings, each `[N*C x p]`. For the fused models both are the same
    /// matrix (the derivative with respect to `b1 + b2`).
    pub fn head_jacobians(&self, b: &[T]) -> Result<(Matrix<T>, Matrix<T>)> {
        let m = &self.model;
        let inputs = Matrix::from_vec(1, b.len(), b.to_vec());
        self.check(&inputs)?;
        let (n, c, p) = (self.n_points(), m.channels(), m.latent());
        let (b1, b2) = self.branches(&inputs)?;
        let fused: Vec<T> = (0..p).map(|i| b1[(0, i)] + b2[(0, i)]).collect();
        let seeds = Matrix::from_fn(n * c, c, |r, j| if r % c == j { T::one() } else { T::zero() });
        match m.arch {
            Arch::Nomad => {
                let t = self.trunk_feat.as_ref().expect("trunk");
                let cp = t.cols();
                let z = Matrix::from_fn(n * c, cp, |r, j| fused[j % p] * t[(r / c, j)]);
                let head = m.head.as_ref().expect("decoder");
                let (_, mut tape) = head.forward_train::<NoRng>(&z, None)?;
                let dz = head.backward_input(&mut tape, &seeds)?;
                let mut jh = Matrix::zeros(n * c, p);
                for r in 0..n * c {
                    let (g, tr) = (dz.row(r), t.row(r / c));
                    let row = jh.row_mut(r);
                    for j in 0..cp {
                        row[j % p] += g[j] * tr[j];
                    }
                }
                Ok((jh.clone(), jh))
            }
            Arch::Sdeeponet => {
                let t = self.trunk_feat.as_ref().expect("trunk");
                let jh = Matrix::from_fn(n * c, p, |r, i| t[(r / c, (r % c) * p + i)]);
                Ok((jh.clone(), jh))
            }
            Arch::Poddeeponet => {
                let jg = m.head.as_ref().expect("coefficient head").jacobian(&fused)?;
                let offsets = m.pod.as_ref().expect("basis").offsets();
                let mut jh = Matrix::zeros(n * c, p);
                for pt in 0..n {
                    for (ch, rows) in self.pod_rows.iter().enumerate() {
                        let row = jh.row_mut(pt * c + ch);
                        for k in 0..rows.cols() {
                            let phi = rows[(pt, k)];
                            for (v, &g) in row.iter_mut().zip(jg.row(offsets[ch] + k)) {
                                *v += phi * g;
                            }
                        }
                    }
                }
                Ok((jh.clone(), jh))
            }
            Arch::Mimonet => {
                let t = self.trunk_feat.as_ref().expect("trunk");
                let h = Matrix::from_fn(n * c, 3 * p, |r, j| match j / p {
                    0 => b1[(0, j)],
                    1 => b2[(0, j - p)],
                    _ => t[(r / c, j - 2 * p)],
                });
                let head = m.head.as_ref().expect("decoder");
                let (_, mut tape) = head.forward_train::<NoRng>(&h, None)?;
                let dh = head.backward_input(&mut tape, &seeds)?;
                Ok((dh.columns(0, p), dh.columns(p, p)))
            }
        }
    }

    /// Full input-output Jacobian `[N*C x d]`, assembled as the product of
    /// the latent-to-output and input-to-latent Jacobians.
    pub fn jacobian(&self, b: &[T]) -> Result<Matrix<T>> {
        let (jh1, jh2) = self.head_jacobians(b)?;
        let (jb1, jb2) = self.branch_jacobians(b)?;
        let rows = jh1.rows();
        let mut j1 = Matrix::zeros(rows, jb1.cols());
        gemm(T::one(), &jh1, false, &jb1, false, T::zero(), &mut j1);
        let mut j2 = Matrix::zeros(rows, jb2.cols());
        gemm(T::one(), &jh2, false, &jb2, false, T::zero(), &mut j2);
        Ok(Matrix::from_fn(rows, b.len(), |r, i| {
            if i < BRANCH1_DIM {
                j1[(r, i)]
            } else {
                j2[(r, i - BRANCH1_DIM)]
            }
        }))
    }

    /// POD coefficients `g(b)` (all channels, channel-major).
    pub fn pod_coefficients(&self, b: &[T]) -> Result<Vec<T>> {
        let m = &self.model;
        if m.arch != Arch::Poddeeponet {
            return Err(Error::ModelMismatch(format!("{} has no POD coefficients", m.arch)));
        }
        let inputs = Matrix::from_vec(1, b.len(), b.to_vec());
        self.check(&inputs)?;
        let (b1, b2) = self.branches(&inputs)?;
        let fused = Matrix::from_fn(1, m.latent(), |_, i| b1[(0, i)] + b2[(0, i)]);
        Ok(m.head.as_ref().expect("coefficient head").forward(&fused)?.into_vec())
    }

    /// Jacobian of the POD coefficients with respect to `b`, `[R x d]`.
    pub fn pod_coefficient_jacobian(&self, b: &[T]) -> Result<Matrix<T>> {
        let m = &self.model;
        if m.arch != Arch::Poddeeponet {
            return Err(Error::ModelMismatch(format!("{} has no POD coefficients", m.arch)));
        }
        let inputs = Matrix::from_vec(1, b.len(), b.to_vec());
        self.check(&inputs)?;
        let (b1, b2) = self.branches(&inputs)?;
        let fused: Vec<T> = (0..m.latent()).map(|i| b1[(0, i)] + b2[(0, i)]).collect();
        let jg = m.head.as_ref().expect("coefficient head").jacobian(&fused)?;
        let (jb1, jb2) = self.branch_jacobians(b)?;
        let mut out = Matrix::zeros(jg.rows(), b.len());
        let mut tmp1 = Matrix::zeros(jg.rows(), BRANCH1_DIM);
        gemm(T::one(), &jg, false, &jb1, false, T::zero(), &mut tmp1);
        let mut tmp2 = Matrix::zeros(jg.rows(), jb2.cols());
        gemm(T::one(), &jg, false, &jb2, false, T::zero(), &mut tmp2);
        for r in 0..jg.rows() {
            out.row_mut(r)[..BRANCH1_DIM].copy_from_slice(tmp1.row(r));
            out.row_mut(r)[BRANCH1_DIM..].copy_from_slice(tmp2.row(r));
        }
        Ok(out)
    }
}

/// Largest batch evaluated in one pass; bounds peak memory of NOMAD's
/// `[B*N x C*p]` decoder input.
const EVAL_CHUNK: usize = 64;

impl DifferentiableMap for PreparedOperator<f64> {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.n_points() * self.model.channels()
    }

    fn eval(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(b)?.into_vec())
    }

    fn eval_many(&self, bs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let d = self.input_dim();
        let chunks: Vec<Result<Vec<Vec<f64>>>> = bs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut flat = Vec::with_capacity(chunk.len() * d);
                for b in chunk {
                    if b.len() != d {
                        return Err(Error::ModelMismatch(format!("expected {d} inputs, got {}", b.len())));
                    }
                    flat.extend_from_slice(b);
                }
                let rows = self.evaluate_rows(&Matrix::from_vec(chunk.len(), d, flat))?;
                if !rows.is_finite() {
                    return Err(Error::NonFinite);
                }
                Ok(rows.as_slice().chunks(self.output_dim()).map(<[f64]>::to_vec).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(bs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    fn vjp(&self, b: &[f64], seed: &[f64]) -> Result<Vec<f64>> {
        PreparedOperator::vjp(self, b, seed)
    }

    fn jacobian(&self, b: &[f64]) -> Result<Matrix<f64>> {
        PreparedOperator::jacobian(self, b)
    }
}
