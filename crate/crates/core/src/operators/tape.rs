//! Batched training-mode forward pass and its exact reverse sweep.
//!
//! A batch of `B` inputs evaluated at `N` trunk points produces a
//! `[B*N x C]` output whose row `s * N + n` is sample `s` at point `n`.

use rand::Rng;

use super::{Arch, Branch2, OperatorModel};
use crate::error::{Error, Result};
use crate::numcore::{gemm, Dropout, GradientTape, GruTape, Matrix, MlpTape, Scalar};
use crate::synthdata::BRANCH1_DIM;

enum Branch2Tape<T> {
    Mlp(MlpTape<T>),
    Gru(GruTape<T>),
}

pub struct ModelCache<T> {
    batch: usize,
    points: usize,
    b1: MlpTape<T>,
    b2: Branch2Tape<T>,
    fused: Matrix<T>,
    trunk: Option<(MlpTape<T>, Matrix<T>)>,
    head: Option<MlpTape<T>>,
    pod_rows: Vec<Matrix<T>>,
}

pub type ModelTape<T> = GradientTape<ModelCache<T>>;

fn reborrow<'a, R: Rng + ?Sized>(d: &'a mut Option<(f64, &mut R)>) -> Option<Dropout<'a, R>> {
    d.as_mut().map(|(rate, rng)| Dropout {
        rate: *rate,
        rng: &mut **rng,
    })
}

impl<T: Scalar> OperatorModel<T> {
    /// Forward pass over `inputs [B x d]` at `trunk [N x 2]`, recording what
    /// the reverse sweep needs. Dropout follows every hidden dense layer
    /// when `dropout` is given.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        inputs: &Matrix<T>,
        trunk: &Matrix<T>,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<(Matrix<T>, ModelTape<T>)> {
        let d = self.input_dim();
        if inputs.cols() != d {
            return Err(Error::ModelMismatch(format!(
                "{} expects {d} standardized inputs, got {}",
                self.arch,
                inputs.cols()
            )));
        }
        if trunk.cols() != 2 {
            return Err(Error::InvalidInput(format!(
                "trunk points must be 2-D, got {}",
                trunk.cols()
            )));
        }
        let (bsz, n, c, p) = (inputs.rows(), trunk.rows(), self.channels(), self.latent());

        let x1 = Matrix::from_fn(bsz, BRANCH1_DIM, |s, j| inputs[(s, j)]);
        let (b1_out, b1) = self.branch1.forward_train(&x1, reborrow(&mut dropout))?;
        let (b2_out, b2) = match &self.branch2 {
            Branch2::Mlp(m) => {
                let x2 = Matrix::from_fn(bsz, self.n_b2, |s, j| inputs[(s, BRANCH1_DIM + j)]);
                let (o, t) = m.forward_train(&x2, reborrow(&mut dropout))?;
                (o, Branch2Tape::Mlp(t))
            }
            Branch2::Gru(g) => {
                let seq: Vec<Matrix<T>> = (0..self.n_b2)
                    .map(|t| Matrix::from_fn(bsz, 1, |s, _| inputs[(s, BRANCH1_DIM + t)]))
                    .collect();
                let (o, t) = g.forward_train(&seq)?;
                (o, Branch2Tape::Gru(t))
            }
        };
        let fused = Matrix::from_fn(bsz, p, |s, i| b1_out[(s, i)] + b2_out[(s, i)]);

        let trunk_fwd = match &self.trunk {
            Some(t) => {
                let (feat, tape) = t.forward_train(trunk, reborrow(&mut dropout))?;
                Some((tape, feat))
            }
            None => None,
        };
        let mut head_tape = None;
        let mut pod_rows = Vec::new();
        let mut out = Matrix::zeros(bsz * n, c);
        match self.arch {
            Arch::Nomad => {
                let t = &trunk_fwd.as_ref().expect("NOMAD has a trunk").1;
                let cp = t.cols();
                let mut z = Matrix::zeros(bsz * n, cp);
                for s in 0..bsz {
                    let f = fused.row(s);
                    for pt in 0..n {
                        let tr = t.row(pt);
                        for (j, v) in z.row_mut(s * n + pt).iter_mut().enumerate() {
                            *v = f[j % p] * tr[j];
                        }
                    }
                }
                let head = self.head.as_ref().expect("NOMAD has a decoder");
                let (o, ht) = head.forward_train(&z, reborrow(&mut dropout))?;
                out = o;
                head_tape = Some(ht);
            }
            Arch::Sdeeponet => {
                let t = &trunk_fwd.as_ref().expect("S-DeepONet has a trunk").1;
                let mut oc = Matrix::zeros(bsz, n);
                for ch in 0..c {
                    let tc = t.columns(ch * p, p);
                    gemm(T::one(), &fused, false, &tc, true, T::zero(), &mut oc);
                    for s in 0..bsz {
                        for pt in 0..n {
                            out[(s * n + pt, ch)] = oc[(s, pt)] + self.bias[ch];
                        }
                    }
                }
            }
            Arch::Poddeeponet => {
                let pod = self.pod.as_ref().expect("POD-DeepONet has a basis");
                pod_rows = pod.gather(trunk);
                let head = self.head.as_ref().expect("POD-DeepONet has a coefficient head");
                let (alpha, ht) = head.forward_train(&fused, reborrow(&mut dropout))?;
                let offsets = pod.offsets();
                let mut oc = Matrix::zeros(bsz, n);
                for ch in 0..c {
                    let ac = alpha.columns(offsets[ch], pod_rows[ch].cols());
                    gemm(T::one(), &ac, false, &pod_rows[ch], true, T::zero(), &mut oc);
                    for s in 0..bsz {
                        for pt in 0..n {
                            out[(s * n + pt, ch)] = oc[(s, pt)];
                        }
                    }
                }
                head_tape = Some(ht);
            }
            Arch::Mimonet => {
                let t = &trunk_fwd.as_ref().expect("MIMONet has a trunk").1;
                let mut h = Matrix::zeros(bsz * n, 3 * p);
                for s in 0..bsz {
                    for pt in 0..n {
                        let row = h.row_mut(s * n + pt);
                        row[..p].copy_from_slice(b1_out.row(s));
                        row[p..2 * p].copy_from_slice(b2_out.row(s));
                        row[2 * p..].copy_from_slice(t.row(pt));
                    }
                }
                let head = self.head.as_ref().expect("MIMONet has a decoder");
                let (o, ht) = head.forward_train(&h, reborrow(&mut dropout))?;
                out = o;
                head_tape = Some(ht);
            }
        }
        let cache = ModelCache {
            batch: bsz,
            points: n,
            b1,
            b2,
            fused,
            trunk: trunk_fwd,
            head: head_tape,
            pod_rows,
        };
        Ok((out, GradientTape::new(cache)))
    }

    /// Reverse sweep from `upstream [B*N x C]`. Returns parameter gradients
    /// (when requested) and the input gradient `[B x d]`.
    pub fn backward_tape(
        &self,
        tape: &mut ModelTape<T>,
        upstream: &Matrix<T>,
        want_params: bool,
    ) -> Result<(Option<OperatorModel<T>>, Matrix<T>)> {
        let mut cache = tape.take()?;
        let (bsz, n, c, p) = (cache.batch, cache.points, self.channels(), self.latent());
        if upstream.shape() != (bsz * n, c) {
            return Err(Error::InvalidInput(format!(
                "upstream gradient is {:?}, expected {:?}",
                upstream.shape(),
                (bsz * n, c)
            )));
        }
        let mut grads = want_params.then(|| self.zeros_like());
        let mut db1 = Matrix::zeros(bsz, p);
        let mut db2 = Matrix::zeros(bsz, p);
        // Upstream gradient of the trunk features, when the trunk is trained.
        let mut dt: Option<Matrix<T>> = None;

        match self.arch {
            Arch::Nomad => {
                let head = self.head.as_ref().expect("decoder");
                let ht = cache.head.as_mut().expect("decoder tape");
                let dz = self.head_backward(head, ht, upstream, grads.as_mut())?;
                let t = &cache.trunk.as_ref().expect("trunk").1;
                let cp = t.cols();
                let mut dtm = Matrix::zeros(n, cp);
                for s in 0..bsz {
                    for pt in 0..n {
                        let g = dz.row(s * n + pt);
                        let tr = t.row(pt);
                        let drow = db1.row_mut(s);
                        for j in 0..cp {
                            drow[j % p] += g[j] * tr[j];
                        }
                        if want_params {
                            let f = cache.fused.row(s);
                            for (j, v) in dtm.row_mut(pt).iter_mut().enumerate() {
                                *v += g[j] * f[j % p];
                            }
                        }
                    }
                }
                db2 = db1.clone();
                dt = want_params.then_some(dtm);
            }
            Arch::Sdeeponet => {
                let t = &cache.trunk.as_ref().expect("trunk").1;
                let mut dtm = Matrix::zeros(n, c * p);
                let mut doc = Matrix::zeros(bsz, n);
                let mut dtc = Matrix::zeros(n, p);
                for ch in 0..c {
                    for s in 0..bsz {
                        for pt in 0..n {
                            doc[(s, pt)] = upstream[(s * n + pt, ch)];
                        }
                    }
                    let tc = t.columns(ch * p, p);
                    gemm(T::one(), &doc, false, &tc, false, T::one(), &mut db1);
                    if let Some(g) = grads.as_mut() {
                        g.bias[ch] = doc.as_slice().iter().copied().sum();
                        gemm(T::one(), &doc, true, &cache.fused, false, T::zero(), &mut dtc);
                        for pt in 0..n {
                            dtm.row_mut(pt)[ch * p..(ch + 1) * p].copy_from_slice(dtc.row(pt));
                        }
                    }
                }
                db2 = db1.clone();
                dt = want_params.then_some(dtm);
            }
            Arch::Poddeeponet => {
                let pod = self.pod.as_ref().expect("basis");
                let offsets = pod.offsets();
                let mut dalpha = Matrix::zeros(bsz, pod.total_rank());
                let mut doc = Matrix::zeros(bsz, n);
                for ch in 0..c {
                    for s in 0..bsz {
                        for pt in 0..n {
                            doc[(s, pt)] = upstream[(s * n + pt, ch)];
                        }
                    }
                    let rows = &cache.pod_rows[ch];
                    let mut dac = Matrix::zeros(bsz, rows.cols());
                    gemm(T::one(), &doc, false, rows, false, T::zero(), &mut dac);
                    for s in 0..bsz {
                        dalpha.row_mut(s)[offsets[ch]..offsets[ch] + rows.cols()].copy_from_slice(dac.row(s));
                    }
                }
                let head = self.head.as_ref().expect("coefficient head");
                let ht = cache.head.as_mut().expect("head tape");
                db1 = self.head_backward(head, ht, &dalpha, grads.as_mut())?;
                db2 = db1.clone();
            }
            Arch::Mimonet => {
                let head = self.head.as_ref().expect("decoder");
                let ht = cache.head.as_mut().expect("decoder tape");
                let dh = self.head_backward(head, ht, upstream, grads.as_mut())?;
                let mut dtm = Matrix::zeros(n, p);
                for s in 0..bsz {
                    for pt in 0..n {
                        let g = dh.row(s * n + pt);
                        for i in 0..p {
                            db1[(s, i)] += g[i];
                            db2[(s, i)] += g[p + i];
                        }
                        if want_params {
                            for (v, &gi) in dtm.row_mut(pt).iter_mut().zip(&g[2 * p..]) {
                                *v += gi;
                            }
                        }
                    }
                }
                dt = want_params.then_some(dtm);
            }
        }

        if let (Some(g), Some(dtm)) = (grads.as_mut(), dt) {
            let (tape, _) = cache.trunk.as_mut().expect("trunk tape");
            let trunk = self.trunk.as_ref().expect("trunk");
            let (tg, _) = trunk.backward(tape, &dtm)?;
            g.trunk = Some(tg);
        }

        let d = self.input_dim();
        let mut db = Matrix::zeros(bsz, d);
        let dx1 = match grads.as_mut() {
            Some(g) => {
                let (pg, dx) = self.branch1.backward(&mut cache.b1, &db1)?;
                g.branch1 = pg;
                dx
            }
            None => self.branch1.backward_input(&mut cache.b1, &db1)?,
        };
        for s in 0..bsz {
            db.row_mut(s)[..BRANCH1_DIM].copy_from_slice(dx1.row(s));
        }
        match (&self.branch2, &mut cache.b2) {
            (Branch2::Mlp(m), Branch2Tape::Mlp(t)) => {
                let dx2 = match grads.as_mut() {
                    Some(g) => {
                        let (pg, dx) = m.backward(t, &db2)?;
                        g.branch2 = Branch2::Mlp(pg);
                        dx
                    }
                    None => m.backward_input(t, &db2)?,
                };
                for s in 0..bsz {
                    db.row_mut(s)[BRANCH1_DIM..].copy_from_slice(dx2.row(s));
                }
            }
            (Branch2::Gru(gru), Branch2Tape::Gru(t)) => {
                let steps = match grads.as_mut() {
                    Some(g) => {
                        let (pg, dx) = gru.backward(t, &db2)?;
                        g.branch2 = Branch2::Gru(pg);
                        dx
                    }
                    None => gru.backward_input(t, &db2)?,
                };
                for (k, step) in steps.iter().enumerate() {
                    for s in 0..bsz {
                        db[(s, BRANCH1_DIM + k)] = step[(s, 0)];
                    }
                }
            }
            _ => unreachable!("tape recorded by this model"),
        }
        Ok((grads, db))
    }

    fn head_backward(
        &self,
        head: &crate::numcore::Mlp<T>,
        tape: &mut MlpTape<T>,
        upstream: &Matrix<T>,
        grads: Option<&mut OperatorModel<T>>,
    ) -> Result<Matrix<T>> {
        Ok(match grads {
            Some(g) => {
                let (pg, dx) = head.backward(tape, upstream)?;
                g.head = Some(pg);
                dx
            }
            None => head.backward_input(tape, upstream)?,
        })
    }
}
