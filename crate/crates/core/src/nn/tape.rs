//! Recorded forward pass over a fixed set of primitive ops and its exact
//! reverse-mode gradient.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis, Ix1, Ix2, Ix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BnId, Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a recorded value, `frames x channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics a train-mode batch norm wants folded into its buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub id: BnId,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    pub momentum: f64,
}

enum Op {
    Input,
    Dense {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    Conv {
        x: Var,
        w: ParamId,
        b: ParamId,
        dilation: usize,
    },
    BatchNorm {
        scale: ParamId,
        shift: ParamId,
        x: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Array2<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    mode: Mode,
    segments: Vec<Range<usize>>,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    bn_updates: Vec<BnUpdate>,
}

impl<'p> Tape<'p> {
    /// `segments` are the utterance row ranges of every value on this tape;
    /// they must tile `0..frames` in order.
    pub fn new(
        params: &'p ParamStore,
        mode: Mode,
        segments: Vec<Range<usize>>,
        seed: u64,
    ) -> Result<Self> {
        let mut next = 0;
        for seg in &segments {
            if seg.start != next || seg.end <= seg.start {
                return Err(Error::invalid(format!(
                    "segments must tile the frame axis, got {segments:?}"
                )));
            }
            next = seg.end;
        }
        if segments.is_empty() {
            return Err(Error::invalid("a tape needs at least one segment"));
        }
        Ok(Self {
            params,
            mode,
            segments,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            bn_updates: Vec::new(),
        })
    }

    /// Single-utterance tape.
    pub fn single(params: &'p ParamStore, mode: Mode, frames: usize, seed: u64) -> Result<Self> {
        Self::new(params, mode, vec![0..frames], seed)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn frames(&self) -> usize {
        self.segments.last().map(|s| s.end).unwrap_or(0)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn width(&self, v: Var) -> usize {
        self.nodes[v.0].value.ncols()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn p1(&self, id: ParamId) -> ndarray::ArrayView1<'p, f64> {
        self.params
            .get(id)
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 parameter")
    }

    fn p2(&self, id: ParamId) -> ndarray::ArrayView2<'p, f64> {
        self.params
            .get(id)
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rank-2 parameter")
    }

    fn p3(&self, id: ParamId) -> ndarray::ArrayView3<'p, f64> {
        self.params
            .get(id)
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("rank-3 parameter")
    }

    pub fn input(&mut self, x: Array2<f64>) -> Result<Var> {
        if x.nrows() != self.frames() {
            return Err(Error::invalid(format!(
                "input has {} frames, tape expects {}",
                x.nrows(),
                self.frames()
            )));
        }
        Ok(self.push(x, Op::Input))
    }

    /// `y = x W^T + b` per frame; `W` is `out x in`.
    pub fn dense(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.p2(w);
        let bv = self.p1(b);
        let xv = &self.nodes[x.0].value;
        if xv.ncols() != wv.ncols() || bv.len() != wv.nrows() {
            return Err(Error::invalid(format!(
                "dense {}: input width {} vs weight {:?}",
                self.params.get(w).name,
                xv.ncols(),
                wv.dim()
            )));
        }
        let mut y = Array2::zeros((xv.nrows(), wv.nrows()));
        y += &bv;
        general_mat_mul(1.0, xv, &wv.t(), 1.0, &mut y);
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    /// `y(t) = sum_i W_i x(t - d i) + b`, zero history at each segment start;
    /// `W` is `K x out x in`.
    pub fn causal_conv(&mut self, x: Var, w: ParamId, b: ParamId, dilation: usize) -> Result<Var> {
        let wv = self.p3(w);
        let bv = self.p1(b);
        let xv = &self.nodes[x.0].value;
        let (k, out, inp) = wv.dim();
        if xv.ncols() != inp || bv.len() != out || dilation == 0 {
            return Err(Error::invalid(format!(
                "conv {}: input width {} vs weight {:?}, dilation {dilation}",
                self.params.get(w).name,
                xv.ncols(),
                wv.dim()
            )));
        }
        let mut y = Array2::zeros((xv.nrows(), out));
        y += &bv;
        for i in 0..k {
            let shift = dilation * i;
            let wi = wv.index_axis(Axis(0), i);
            for seg in &self.segments {
                if shift >= seg.len() {
                    continue;
                }
                let xs = xv.slice(s![seg.start..seg.end - shift, ..]);
                let mut ys = y.slice_mut(s![seg.start + shift..seg.end, ..]);
                general_mat_mul(1.0, &xs, &wi.t(), 1.0, &mut ys);
            }
        }
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                dilation,
            },
        ))
    }

    /// Batch norm: batch statistics in train mode (recording a running-stat
    /// update), running statistics in inference mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: ParamId,
        shift: ParamId,
        buffers: BnId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let gamma = self.p1(scale);
        let beta = self.p1(shift);
        let xv = &self.nodes[x.0].value;
        let c = xv.ncols();
        if gamma.len() != c || beta.len() != c {
            return Err(Error::invalid(format!(
                "batch norm {}: {c} channels vs {} scales",
                self.params.get(scale).name,
                gamma.len()
            )));
        }
        let n = xv.nrows();
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            if n < 2 {
                return Err(Error::invalid(format!(
                    "train-mode batch norm needs at least 2 frames, got {n}"
                )));
            }
            let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
            let var = (xv - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / n as f64;
            (mean, var)
        } else {
            let b = self.params.buffers(buffers);
            (b.running_mean.clone(), b.running_var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (xv - &mean) * &inv_std;
        let y = &xhat * &gamma + &beta;
        if batch_stats {
            self.bn_updates.push(BnUpdate {
                id: buffers,
                batch_mean: mean,
                batch_var: var,
                momentum,
            });
        }
        Ok(self.push(
            y,
            Op::BatchNorm {
                scale,
                shift,
                x,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.mapv(sigmoid);
        self.push(y, Op::Sigmoid { x })
    }

    /// Inverted dropout in train mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let (r, c) = self.nodes[x.0].value.dim();
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn((r, c), || {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let y = &self.nodes[x.0].value * &mask;
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        match parts {
            [] => Err(Error::invalid("concat of nothing")),
            [only] => Ok(*only),
            _ => {
                let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
                let y = ndarray::concatenate(Axis(1), &views)
                    .map_err(|e| Error::invalid(format!("concat: {e}")))?;
                Ok(self.push(
                    y,
                    Op::Concat {
                        parts: parts.to_vec(),
                    },
                ))
            }
        }
    }

    /// Columns `start..start + width`.
    pub fn slice(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if start + width > xv.ncols() || width == 0 {
            return Err(Error::invalid(format!(
                "slice {start}..{} of width {}",
                start + width,
                xv.ncols()
            )));
        }
        if start == 0 && width == xv.ncols() {
            return Ok(x);
        }
        let y = xv.slice(s![.., start..start + width]).to_owned();
        Ok(self.push(y, Op::Slice { x, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.dim() != bv.dim() {
            return Err(Error::invalid(format!("add {:?} + {:?}", av.dim(), bv.dim())));
        }
        let y = av + bv;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.dim() != bv.dim() {
            return Err(Error::invalid(format!("mul {:?} * {:?}", av.dim(), bv.dim())));
        }
        let y = av * bv;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    /// Reverse pass from the given output gradients (e.g. `dL/dpred` of each
    /// loss term).
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Result<Backward> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward op".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.dim() != self.nodes[v.0].value.dim() {
                return Err(Error::invalid(format!(
                    "seed gradient {:?} for value {:?}",
                    g.dim(),
                    self.nodes[v.0].value.dim()
                )));
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut out = Gradients::zeros_like(self.params);
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Dense { x, w, b } => {
                    let wv = self.p2(*w);
                    let xv = &self.nodes[x.0].value;
                    let gw = out.get_mut(*w);
                    let mut gw2 = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
                    general_mat_mul(1.0, &g.t(), xv, 1.0, &mut gw2);
                    let mut gb = out.get_mut(*b).view_mut().into_dimensionality::<Ix1>().unwrap();
                    gb += &g.sum_axis(Axis(0));
                    accumulate(&mut grads[x.0], g.dot(&wv));
                }
                Op::Conv { x, w, b, dilation } => {
                    let wv = self.p3(*w);
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    {
                        let gw = out.get_mut(*w);
                        let mut gw3 = gw.view_mut().into_dimensionality::<Ix3>().unwrap();
                        for i in 0..wv.dim().0 {
                            let shift = dilation * i;
                            let wi = wv.index_axis(Axis(0), i);
                            let mut gwi = gw3.index_axis_mut(Axis(0), i);
                            for seg in &self.segments {
                                if shift >= seg.len() {
                                    continue;
                                }
                                let gs = g.slice(s![seg.start + shift..seg.end, ..]);
                                let xs = xv.slice(s![seg.start..seg.end - shift, ..]);
                                general_mat_mul(1.0, &gs.t(), &xs, 1.0, &mut gwi);
                                let mut gxs = gx.slice_mut(s![seg.start..seg.end - shift, ..]);
                                general_mat_mul(1.0, &gs, &wi, 1.0, &mut gxs);
                            }
                        }
                    }
                    let mut gb = out.get_mut(*b).view_mut().into_dimensionality::<Ix1>().unwrap();
                    gb += &g.sum_axis(Axis(0));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::BatchNorm {
                    scale,
                    shift,
                    x,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gamma = self.p1(*scale);
                    {
                        let mut gs = out
                            .get_mut(*scale)
                            .view_mut()
                            .into_dimensionality::<Ix1>()
                            .unwrap();
                        gs += &(&g * xhat).sum_axis(Axis(0));
                    }
                    {
                        let mut gsh = out
                            .get_mut(*shift)
                            .view_mut()
                            .into_dimensionality::<Ix1>()
                            .unwrap();
                        gsh += &g.sum_axis(Axis(0));
                    }
                    let dxhat = &g * &gamma;
                    let gx = if *batch_stats {
                        let n = g.nrows() as f64;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                        ((&dxhat * n) - &sum_d - &(xhat * &sum_dx)) * &(inv_std / n)
                    } else {
                        dxhat * inv_std
                    };
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Relu { x } => {
                    let mut gx = g;
                    ndarray::Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gv, y| {
                            if *y <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid { x } => {
                    let gx = &g * &node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads[x.0], g * mask);
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul { a, b } => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
            }
        }
        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input))
            .map(|(i, n)| {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(n.value.raw_dim()));
                (Var(i), g)
            })
            .collect();
        Ok(Backward {
            params: out,
            inputs,
        })
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Gradients,
    inputs: Vec<(Var, Array2<f64>)>,
}

impl Backward {
    pub fn input_grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.inputs.iter().find(|(x, _)| *x == v).map(|(_, g)| g)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}
