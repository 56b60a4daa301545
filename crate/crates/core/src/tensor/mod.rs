//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]. A [`Graph`] records operations on [`Var`]
//! handles; [`Graph::backward`] returns exact gradients for every leaf that
//! asked for one. Model weights sit in a [`ParamStore`] and are bound into a
//! graph with [`Graph::param`].

mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod value;

pub use gradcheck::{grad_check, normal_tensor, op_suite, OpCase, ScalarFn};
pub use graph::{Gradients, Graph, Var};
pub use ops::NORM_EPS;
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use value::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("no computation record to differentiate")]
    NoRecord,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        Self {
            weight: store.normal(format!("{name}.weight"), &[input, output], rng),
            bias: store.zeros(format!("{name}.bias"), &[output]),
        }
    }

    /// Zero-initialized layer; outputs exactly zero until trained.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: store.zeros(format!("{name}.weight"), &[input, output]),
            bias: store.zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: &Var<'g>,
    ) -> Result<Var<'g>, TensorError> {
        x.matmul(&g.param(store, self.weight))?
            .add_last(&g.param(store, self.bias))
    }
}

#[cfg(test)]
mod tests;
