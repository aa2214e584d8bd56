//! Named views over trainable parameter tensors.
//!
//! Every model component exposes its tensors in a fixed canonical order so
//! that optimizers, checkpoints and gradient checks can walk them uniformly.
//! Gradients are stored in a value of the same type as the model.

use ndarray::{ArrayBase, DataMut, Dimension, RawData};

pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub trait Parameters {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for p in self.params_mut() {
            p.data.fill(0.0);
        }
    }

    /// A copy with every parameter zeroed, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut out = self.clone();
        out.fill_zero();
        out
    }

    /// `self += other`, parameter by parameter.
    fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for p in self.params_mut() {
            for v in p.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn squared_norm(&self) -> f64 {
        self.params().iter().flat_map(|p| p.data.iter()).map(|v| v * v).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.params()
            .into_iter()
            .find(|p| p.data.iter().any(|v| !v.is_finite()))
            .map(|p| p.name)
    }
}

pub(crate) fn view<'a, S, D>(name: impl Into<String>, a: &'a ArrayBase<S, D>) -> ParamRef<'a>
where
    S: ndarray::Data<Elem = f64>,
    D: Dimension,
{
    ParamRef {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameter tensors are contiguous"),
    }
}

pub(crate) fn view_mut<'a, S, D>(name: impl Into<String>, a: &'a mut ArrayBase<S, D>) -> ParamMut<'a>
where
    S: DataMut<Elem = f64> + RawData,
    D: Dimension,
{
    ParamMut {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("parameter tensors are contiguous"),
    }
}

pub(crate) fn scalar<'a>(name: impl Into<String>, v: &'a f64) -> ParamRef<'a> {
    ParamRef {
        name: name.into(),
        shape: vec![],
        data: std::slice::from_ref(v),
    }
}

pub(crate) fn scalar_mut<'a>(name: impl Into<String>, v: &'a mut f64) -> ParamMut<'a> {
    ParamMut {
        name: name.into(),
        shape: vec![],
        data: std::slice::from_mut(v),
    }
}

/// Prefixes every name in a list of views.
pub(crate) fn prefixed<'a>(prefix: &str, views: Vec<ParamRef<'a>>) -> Vec<ParamRef<'a>> {
    views
        .into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, views: Vec<ParamMut<'a>>) -> Vec<ParamMut<'a>> {
    views
        .into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}
