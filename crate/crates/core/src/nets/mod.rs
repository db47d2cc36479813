//! Network architectures: the toy MLP velocity field, the parallel-residual
//! micro transformer used as teacher, and the DiT-style velocity layer that
//! wraps one teacher layer with time-conditioned scale/shift/gate.

mod dit;
mod layers;
mod mlp;
mod transformer;

use std::collections::BTreeMap;

pub use dit::{DitVelocityLayer, Modulation};
pub use layers::{time_features, LayerNorm, Linear, LN_EPS, TIME_FEATURES, TIME_FREQS};
pub use mlp::{MlpConfig, VelocityMlp};
pub use transformer::{MicroTransformer, TeacherConfig, TeacherOutput, TransformerLayer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named, ordered access to a model's trainable tensors.
///
/// `named_parameters` and `parameters_mut` must list tensors in the same
/// order.
pub trait Parameters {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameters(&self) -> Vec<&Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    /// Copies parameters out as `name -> (shape, values)`.
    fn state_dict(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.named_parameters()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.data().to_vec())))
            .collect()
    }

    /// Replaces every parameter from `state`, which must carry each name
    /// with a matching shape. Extra entries are ignored.
    fn load_state(&mut self, state: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        let names: Vec<String> = self.named_parameters().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.parameters_mut()) {
            let (shape, values) = state
                .get(name)
                .ok_or_else(|| Error::input(format!("checkpoint lacks parameter {name}")))?;
            if shape.as_slice() != slot.shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: checkpoint shape {shape:?} vs model {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::param(values.clone(), shape)?;
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}
