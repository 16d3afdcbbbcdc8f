use crate::error::{Error, Result};
use crate::numcore::{Matrix, Mlp, NoRng};

/// A differentiable map `R^d -> R^m` in 64-bit precision.
///
/// Attacks only need [`eval`](DifferentiableMap::eval); the gradient
/// baseline and the sensitivity tools also use the reverse-mode product and
/// the Jacobian.
pub trait DifferentiableMap: Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn eval(&self, b: &[f64]) -> Result<Vec<f64>>;

    fn eval_many(&self, bs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        bs.iter().map(|b| self.eval(b)).collect()
    }

    /// `J(b)^T seed`.
    fn vjp(&self, b: &[f64], seed: &[f64]) -> Result<Vec<f64>>;

    /// `[m x d]` Jacobian. The default assembles it row by row from
    /// reverse-mode products.
    fn jacobian(&self, b: &[f64]) -> Result<Matrix<f64>> {
        let m = self.output_dim();
        let mut jac = Matrix::zeros(m, self.input_dim());
        let mut seed = vec![0.0; m];
        for r in 0..m {
            seed[r] = 1.0;
            jac.row_mut(r).copy_from_slice(&self.vjp(b, &seed)?);
            seed[r] = 0.0;
        }
        Ok(jac)
    }
}

/// `f(b) = A b + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub a: Matrix<f64>,
    pub offset: Vec<f64>,
}

impl LinearMap {
    pub fn new(a: Matrix<f64>, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != a.rows() {
            return Err(Error::InvalidInput(format!(
                "offset has length {}, map has {} outputs",
                offset.len(),
                a.rows()
            )));
        }
        Ok(Self { a, offset })
    }

    fn check(&self, len: usize, want: usize, what: &str) -> Result<()> {
        if len != want {
            return Err(Error::InvalidInput(format!("{what} has length {len}, expected {want}")));
        }
        Ok(())
    }
}

impl DifferentiableMap for LinearMap {
    fn input_dim(&self) -> usize {
        self.a.cols()
    }

    fn output_dim(&self) -> usize {
        self.a.rows()
    }

    fn eval(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len(), self.input_dim(), "input")?;
        Ok(self
            .a
            .matvec(b)
            .into_iter()
            .zip(&self.offset)
            .map(|(y, o)| y + o)
            .collect())
    }

    fn vjp(&self, b: &[f64], seed: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len(), self.input_dim(), "input")?;
        self.check(seed.len(), self.output_dim(), "seed")?;
        Ok(self.a.tmatvec(seed))
    }

    fn jacobian(&self, b: &[f64]) -> Result<Matrix<f64>> {
        self.check(b.len(), self.input_dim(), "input")?;
        Ok(self.a.clone())
    }
}

impl DifferentiableMap for Mlp<f64> {
    fn input_dim(&self) -> usize {
        self.input_size()
    }

    fn output_dim(&self) -> usize {
        self.output_size()
    }

    fn eval(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::from_vec(1, b.len(), b.to_vec()))?.into_vec())
    }

    fn vjp(&self, b: &[f64], seed: &[f64]) -> Result<Vec<f64>> {
        let (_, mut tape) = self.forward_train::<NoRng>(&Matrix::from_vec(1, b.len(), b.to_vec()), None)?;
        Ok(self
            .backward_input(&mut tape, &Matrix::from_vec(1, seed.len(), seed.to_vec()))?
            .into_vec())
    }

    fn jacobian(&self, b: &[f64]) -> Result<Matrix<f64>> {
        Ok(Mlp::jacobian(self, b)?)
    }
}
