use super::NumError;

/// Forward-pass intermediates recorded for one reverse sweep.
///
/// A tape can be replayed exactly once; the second `take` fails with
/// [`NumError::TapeConsumed`].
#[derive(Debug, Clone)]
pub struct GradientTape<C> {
    cache: Option<C>,
}

impl<C> GradientTape<C> {
    pub fn new(cache: C) -> Self {
        Self { cache: Some(cache) }
    }

    pub fn is_consumed(&self) -> bool {
        self.cache.is_none()
    }

    pub fn take(&mut self) -> Result<C, NumError> {
        self.cache.take().ok_or(NumError::TapeConsumed)
    }
}

/// Walks every trainable tensor in a fixed order.
///
/// The order defines the flat parameter layout used by the optimizer and by
/// checkpoint blobs, so implementations must never reorder their visits.
pub trait Parameterized<T> {
    /// Calls `f(name, shape, values)` for each tensor.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _, v| n += v.len());
        n
    }

    fn flatten_params(&self) -> Vec<T>
    where
        T: Copy,
    {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn load_params(&mut self, flat: &[T]) -> Result<(), NumError>
    where
        T: Copy,
    {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(NumError::LengthMismatch {
                what: "parameter vector",
                expected,
                found: flat.len(),
            });
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |dst| {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        });
        Ok(())
    }
}
