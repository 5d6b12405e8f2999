//! Named parameter storage, independent of any one forward pass.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Tensor};

/// Handle to one parameter tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// All trainable parameters of a model, in registration order.
#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    /// Xavier/Glorot-uniform initialized matrix [rows x cols].
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let v = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-bound..bound));
        self.add(name, v)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn values(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f64>> {
        self.entries.iter_mut().map(|(_, v)| v)
    }

    /// Replace all values from `(name, value)` pairs; names and shapes must
    /// match registration order exactly.
    pub fn load_values(&mut self, pairs: &[(String, ArrayD<f64>)]) -> crate::Result<()> {
        if pairs.len() != self.entries.len() {
            return Err(crate::Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint {} vs model {}",
                pairs.len(),
                self.entries.len()
            )));
        }
        for (slot, (name, value)) in self.entries.iter_mut().zip(pairs) {
            if &slot.0 != name || slot.1.shape() != value.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter mismatch at {}: checkpoint has {} {:?}",
                    slot.0,
                    name,
                    value.shape()
                )));
            }
            slot.1 = value.clone();
        }
        Ok(())
    }

    /// Insert every parameter as a leaf in `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            tensors: self.entries.iter().map(|(_, v)| g.leaf(v.clone())).collect(),
        }
    }
}

/// The leaves a [`ParamSet`] occupies in one particular graph.
pub struct Binding {
    tensors: Vec<Tensor>,
}

impl Binding {
    pub fn t(&self, id: ParamId) -> Tensor {
        self.tensors[id.0]
    }

    /// Gradients for every parameter, in registration order.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<ArrayD<f64>> {
        self.tensors.iter().map(|&t| grads.get(g, t)).collect()
    }
}
