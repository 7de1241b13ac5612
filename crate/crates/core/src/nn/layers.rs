//! Parameterised layers built on the tape primitives, and their per-frame
//! complexity.

use rand::Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::{BnId, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Parameter count and inference FLOPs per frame of one layer.
///
/// FLOPs count a multiply-accumulate as two operations; batch norm costs 4
/// per channel and activations or elementwise ops 1 per element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub flops: usize,
}

fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_uniform(
            format!("{name}.w"),
            &[out_dim, in_dim],
            kaiming_bound(in_dim),
            rng,
        );
        let b = store.add_filled(format!("{name}.b"), &[out_dim], 0.0);
        Self {
            name: name.to_string(),
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dense(x, self.w, self.b)
    }

    pub fn cost(&self) -> LayerCost {
        LayerCost {
            name: self.name.clone(),
            params: self.in_dim * self.out_dim + self.out_dim,
            flops: 2 * self.in_dim * self.out_dim,
        }
    }
}

/// Causal dilated temporal convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, dilation: usize, in_dim: usize, out_dim: usize) -> Result<Self> {
        if kernel == 0 || dilation == 0 || in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid(format!(
                "conv spec K={kernel} d={dilation} {in_dim}->{out_dim}"
            )));
        }
        Ok(Self {
            kernel,
            dilation,
            in_dim,
            out_dim,
        })
    }

    /// Frames of history one output can see: `d (K - 1)`.
    pub fn past_reach(&self) -> usize {
        self.dilation * (self.kernel - 1)
    }
}

#[derive(Debug, Clone)]
pub struct CausalConv {
    pub name: String,
    pub spec: ConvSpec,
    pub w: ParamId,
    pub b: ParamId,
}

impl CausalConv {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(
            format!("{name}.w"),
            &[spec.kernel, spec.out_dim, spec.in_dim],
            kaiming_bound(spec.kernel * spec.in_dim),
            rng,
        );
        let b = store.add_filled(format!("{name}.b"), &[spec.out_dim], 0.0);
        Self {
            name: name.to_string(),
            spec,
            w,
            b,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.causal_conv(x, self.w, self.b, self.spec.dilation)
    }

    pub fn cost(&self) -> LayerCost {
        let s = &self.spec;
        LayerCost {
            name: self.name.clone(),
            params: s.kernel * s.in_dim * s.out_dim + s.out_dim,
            flops: 2 * s.kernel * s.in_dim * s.out_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub scale: ParamId,
    pub shift: ParamId,
    pub buffers: BnId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let scale = store.add_filled(format!("{name}.scale"), &[channels], 1.0);
        let shift = store.add_filled(format!("{name}.shift"), &[channels], 0.0);
        let buffers = store.add_bn_buffers(name, channels);
        Self {
            name: name.to_string(),
            scale,
            shift,
            buffers,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.batch_norm(
            x,
            self.scale,
            self.shift,
            self.buffers,
            self.eps,
            self.momentum,
        )
    }

    pub fn cost(&self) -> LayerCost {
        LayerCost {
            name: self.name.clone(),
            params: 2 * self.channels,
            flops: 4 * self.channels,
        }
    }
}

/// Causal conv followed by BN, ReLU and dropout.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: CausalConv,
    pub bn: Option<BatchNorm>,
    pub dropout: f64,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        batch_norm: bool,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = CausalConv::new(store, &format!("{name}.conv"), spec, rng);
        let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), spec.out_dim));
        Self { conv, bn, dropout }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(tape, x)?;
        if let Some(bn) = &self.bn {
            h = bn.forward(tape, h)?;
        }
        let h = tape.relu(h);
        tape.dropout(h, self.dropout)
    }

    pub fn costs(&self) -> Vec<LayerCost> {
        let mut out = vec![self.conv.cost()];
        if let Some(bn) = &self.bn {
            out.push(bn.cost());
        }
        out.push(LayerCost {
            name: format!("{}.relu", self.conv.name.trim_end_matches(".conv")),
            params: 0,
            flops: self.conv.spec.out_dim,
        });
        out
    }
}
