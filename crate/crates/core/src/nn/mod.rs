//! Minimal trainable-layer engine.
//!
//! Parameters live in a [`ParamStore`]; a forward pass records primitive ops
//! on a [`Tape`] that borrows the store read-only, and [`Tape::backward`]
//! returns exact reverse-mode [`Gradients`]. Batches are stacks of utterances
//! along the frame axis; causal convolutions never reach across an utterance
//! boundary.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod tape;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Dtype, LoadedCheckpoint};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layers::{BatchNorm, CausalConv, ConvBlock, ConvSpec, Dense, LayerCost};
pub use tape::{mse_loss, BnUpdate, Mode, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: ArrayD<f64>,
}

impl ParamTensor {
    /// Logical layer the tensor belongs to: the part before `/` when present
    /// (multi-band layers), otherwise everything before the last `.`.
    pub fn layer(&self) -> &str {
        match self.name.split_once('/') {
            Some((layer, _)) => layer,
            None => self
                .name
                .rsplit_once('.')
                .map(|(layer, _)| layer)
                .unwrap_or(&self.name),
        }
    }
}

/// Batch-norm running statistics (not trained by gradient descent).
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers {
    pub name: String,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    buffers: Vec<BnBuffers>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(ParamTensor { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform(-bound, bound) initialised tensor.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data");
        self.add(name, value)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], fill: f64) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), fill))
    }

    pub fn add_bn_buffers(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.buffers.push(BnBuffers {
            name: name.into(),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        });
        BnId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn buffers(&self, id: BnId) -> &BnBuffers {
        &self.buffers[id.0]
    }

    pub fn buffers_mut(&mut self, id: BnId) -> &mut BnBuffers {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn all_buffers(&self) -> &[BnBuffers] {
        &self.buffers
    }

    pub fn all_buffers_mut(&mut self) -> &mut [BnBuffers] {
        &mut self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total trainable scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Folds running-statistic updates recorded by a train-mode pass.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let b = &mut self.buffers[u.id.0];
            let m = u.momentum;
            b.running_mean = &b.running_mean * m + &u.batch_mean * (1.0 - m);
            b.running_var = &b.running_var * m + &u.batch_var * (1.0 - m);
        }
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
