//! Bidirectional multi-scale sub-band dilated convolution.
//!
//! The feature axis is split into `m` contiguous bands. A rightward pass runs
//! band `b = 0..m` through its own causal dilated conv (followed by BN, ReLU
//! and dropout) on the concatenation of band `b-1`'s rightward output and the
//! input band `Y_b`. A leftward pass then runs `b = m-1..=0` on the
//! concatenation of band `b+1`'s leftward output and band `b`'s rightward
//! output. The layer output is the elementwise sum of the two directions,
//! each concatenated back to full width.
//!
//! Because each band convolves its neighbour's already-convolved output, the
//! temporal reach grows with the band index: rightward band `b` sees
//! `(b + 1) d (K - 1)` frames of history, and the leftward pass adds one more
//! `d (K - 1)` per band it walks back.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBlock, ConvSpec, LayerCost, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Sub-band count `m`.
    pub bands: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl MultiScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.bands > self.in_dim.min(self.out_dim) {
            return Err(Error::invalid(format!(
                "{} sub-bands for a {} -> {} layer",
                self.bands, self.in_dim, self.out_dim
            )));
        }
        ConvSpec::new(self.kernel, self.dilation, self.in_dim, self.out_dim).map(|_| ())
    }

    /// Largest history any output frame depends on: the leftward pass ends at
    /// band 0 after walking all `m` bands twice.
    pub fn past_reach(&self) -> usize {
        2 * self.bands * self.dilation * (self.kernel - 1)
    }
}

/// Contiguous split of a feature axis into bands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BandPartition {
    pub offsets: Vec<usize>,
    pub widths: Vec<usize>,
}

impl BandPartition {
    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }
}

/// `floor(dim / m)` per band, with the first `dim mod m` bands one wider.
pub fn partition_bands(dim: usize, m: usize) -> Result<BandPartition> {
    if m == 0 || m > dim {
        return Err(Error::invalid(format!("cannot split {dim} dims into {m} bands")));
    }
    let base = dim / m;
    let extra = dim % m;
    let widths: Vec<usize> = (0..m).map(|b| base + usize::from(b < extra)).collect();
    let offsets = widths
        .iter()
        .scan(0, |acc, w| {
            let o = *acc;
            *acc += w;
            Some(o)
        })
        .collect();
    Ok(BandPartition { offsets, widths })
}

/// Learned state of one multi-scale layer: a conv block per band and
/// direction (each with its own BN and dropout).
#[derive(Debug, Clone)]
pub struct MultiScaleLayer {
    pub name: String,
    pub cfg: MultiScaleConfig,
    pub input_bands: BandPartition,
    pub output_bands: BandPartition,
    pub rightward: Vec<ConvBlock>,
    pub leftward: Vec<ConvBlock>,
}

impl MultiScaleLayer {
    /// Parameter names are `{name}/right.{b}...` and `{name}/left.{b}...`, so
    /// the whole layer is one logical layer for gradient checks.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: MultiScaleConfig,
        batch_norm: bool,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let input_bands = partition_bands(cfg.in_dim, cfg.bands)?;
        let output_bands = partition_bands(cfg.out_dim, cfg.bands)?;
        let m = cfg.bands;
        let mut rightward = Vec::with_capacity(m);
        for b in 0..m {
            let carried = if b == 0 { 0 } else { output_bands.widths[b - 1] };
            let spec = ConvSpec::new(
                cfg.kernel,
                cfg.dilation,
                carried + input_bands.widths[b],
                output_bands.widths[b],
            )?;
            rightward.push(ConvBlock::new(
                store,
                &format!("{name}/right.{b}"),
                spec,
                batch_norm,
                dropout,
                rng,
            ));
        }
        let mut leftward: Vec<ConvBlock> = Vec::with_capacity(m);
        for b in (0..m).rev() {
            let carried = if b == m - 1 { 0 } else { output_bands.widths[b + 1] };
            let spec = ConvSpec::new(
                cfg.kernel,
                cfg.dilation,
                carried + output_bands.widths[b],
                output_bands.widths[b],
            )?;
            leftward.push(ConvBlock::new(
                store,
                &format!("{name}/left.{b}"),
                spec,
                batch_norm,
                dropout,
                rng,
            ));
        }
        leftward.reverse();
        Ok(Self {
            name: name.to_string(),
            cfg,
            input_bands,
            output_bands,
            rightward,
            leftward,
        })
    }

    pub fn forward(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        if tape.width(y) != self.cfg.in_dim {
            return Err(Error::invalid(format!(
                "{}: input width {} != {}",
                self.name,
                tape.width(y),
                self.cfg.in_dim
            )));
        }
        let (right, left) = self.directional_outputs(tape, y)?;
        let r = tape.concat(&right)?;
        let l = tape.concat(&left)?;
        tape.add(r, l)
    }

    /// Per-band rightward and leftward outputs, in band order.
    pub fn directional_outputs(&self, tape: &mut Tape, y: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let m = self.cfg.bands;
        let mut right: Vec<Var> = Vec::with_capacity(m);
        for b in 0..m {
            let yb = tape.slice(y, self.input_bands.offsets[b], self.input_bands.widths[b])?;
            let input = match right.last() {
                Some(prev) => tape.concat(&[*prev, yb])?,
                None => yb,
            };
            right.push(self.rightward[b].forward(tape, input)?);
        }
        let mut left: Vec<Option<Var>> = vec![None; m];
        for b in (0..m).rev() {
            let input = match left.get(b + 1).copied().flatten() {
                Some(next) => tape.concat(&[next, right[b]])?,
                None => right[b],
            };
            left[b] = Some(self.leftward[b].forward(tape, input)?);
        }
        Ok((right, left.into_iter().map(|v| v.expect("every band visited")).collect()))
    }

    pub fn costs(&self) -> Vec<LayerCost> {
        let mut out: Vec<LayerCost> = self
            .rightward
            .iter()
            .chain(&self.leftward)
            .flat_map(|blk| blk.costs())
            .collect();
        out.push(LayerCost {
            name: format!("{}/sum", self.name),
            params: 0,
            flops: self.cfg.out_dim,
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_examples() {
        assert_eq!(
            partition_bands(514, 8).unwrap().widths,
            vec![65, 65, 64, 64, 64, 64, 64, 64]
        );
        let p = partition_bands(1028, 16).unwrap();
        assert_eq!(&p.widths[..4], &[65; 4]);
        assert!(p.widths[4..].iter().all(|w| *w == 64));
        assert_eq!(p.widths.iter().sum::<usize>(), 1028);
        assert_eq!(partition_bands(6, 3).unwrap().widths, vec![2, 2, 2]);
        assert_eq!(partition_bands(6, 3).unwrap().offsets, vec![0, 2, 4]);
        assert!(partition_bands(3, 4).is_err());
        assert!(partition_bands(3, 0).is_err());
    }

    #[test]
    fn output_length_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, d) in [(1, 1), (3, 1), (3, 5), (2, 7)] {
            let mut store = ParamStore::new();
            let cfg = MultiScaleConfig {
                in_dim: 10,
                out_dim: 8,
                bands: 4,
                kernel: k,
                dilation: d,
            };
            let layer = MultiScaleLayer::new(&mut store, "ms", cfg, true, 0.2, &mut rng).unwrap();
            let mut t = Tape::single(&store, Mode::Train, 6, 1).unwrap();
            let x = t.input(Array2::ones((6, 10))).unwrap();
            let y = layer.forward(&mut t, x).unwrap();
            assert_eq!(t.value(y).dim(), (6, 8));
        }
    }

    #[test]
    fn rejects_too_many_bands() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = MultiScaleConfig {
            in_dim: 10,
            out_dim: 3,
            bands: 4,
            kernel: 1,
            dilation: 1,
        };
        assert!(MultiScaleLayer::new(&mut store, "ms", cfg, true, 0.0, &mut rng).is_err());
    }

    /// Plain-loop reference: one conv block in inference mode.
    fn block_ref(store: &ParamStore, name: &str, x: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
        let find = |n: String| {
            store
                .params()
                .iter()
                .find(|p| p.name == n)
                .unwrap_or_else(|| panic!("{n}"))
                .value
                .clone()
        };
        let w = find(format!("{name}.conv.w"));
        let b = find(format!("{name}.conv.b"));
        let gamma = find(format!("{name}.bn.scale"));
        let beta = find(format!("{name}.bn.shift"));
        let buf = store
            .all_buffers()
            .iter()
            .find(|bf| bf.name == format!("{name}.bn"))
            .unwrap();
        let (k, out, inp) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        (0..x.len())
            .map(|t| {
                (0..out)
                    .map(|o| {
                        let mut acc = b[[o]];
                        for i in 0..k {
                            if t >= i * d {
                                for c in 0..inp {
                                    acc += w[[i, o, c]] * x[t - i * d][c];
                                }
                            }
                        }
                        let z = (acc - buf.running_mean[o]) / (buf.running_var[o] + 1e-5).sqrt();
                        (gamma[[o]] * z + beta[[o]]).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    fn cat(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
    }

    fn reference(
        store: &ParamStore,
        cfg: MultiScaleConfig,
        x: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let pin = partition_bands(cfg.in_dim, cfg.bands).unwrap();
        let m = cfg.bands;
        let band = |b: usize| -> Vec<Vec<f64>> {
            x.iter()
                .map(|r| r[pin.offsets[b]..pin.offsets[b] + pin.widths[b]].to_vec())
                .collect()
        };
        let mut right: Vec<Vec<Vec<f64>>> = Vec::new();
        for b in 0..m {
            let input = if b == 0 { band(0) } else { cat(&right[b - 1], &band(b)) };
            right.push(block_ref(store, &format!("ms/right.{b}"), &input, cfg.dilation));
        }
        let mut left: Vec<Vec<Vec<f64>>> = vec![Vec::new(); m];
        for b in (0..m).rev() {
            let input = if b == m - 1 {
                right[b].clone()
            } else {
                cat(&left[b + 1], &right[b])
            };
            left[b] = block_ref(store, &format!("ms/left.{b}"), &input, cfg.dilation);
        }
        (0..x.len())
            .map(|t| {
                let r: Vec<f64> = right.iter().flat_map(|v| v[t].clone()).collect();
                let l: Vec<f64> = left.iter().flat_map(|v| v[t].clone()).collect();
                r.iter().zip(&l).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    fn randomise_bn(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for p in store.params_mut() {
            if p.name.ends_with(".scale") {
                p.value.mapv_inplace(|_| rng.gen_range(0.5..1.5));
            } else if p.name.ends_with(".shift") || p.name.ends_with(".b") {
                p.value.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
            }
        }
        for b in store.all_buffers_mut() {
            b.running_mean.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
            b.running_var.mapv_inplace(|_| rng.gen_range(0.5..2.0));
        }
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, k, d) in [(1, 3, 1), (2, 1, 1), (3, 3, 2), (4, 2, 3), (5, 3, 1)] {
            let cfg = MultiScaleConfig {
                in_dim: 13,
                out_dim: 11,
                bands: m,
                kernel: k,
                dilation: d,
            };
            let mut store = ParamStore::new();
            let layer = MultiScaleLayer::new(&mut store, "ms", cfg, true, 0.5, &mut rng).unwrap();
            randomise_bn(&mut store, &mut rng);
            let frames = 17;
            let x: Vec<Vec<f64>> = (0..frames)
                .map(|_| (0..13).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let want = reference(&store, cfg, &x);
            let xa = Array2::from_shape_fn((frames, 13), |(t, c)| x[t][c]);
            let mut t = Tape::single(&store, Mode::Infer, frames, 0).unwrap();
            let xi = t.input(xa).unwrap();
            let y = layer.forward(&mut t, xi).unwrap();
            let got = t.value(y);
            for (ti, row) in want.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    assert!((got[[ti, c]] - v).abs() < 1e-12, "m={m} k={k} d={d}");
                }
            }
        }
    }

    #[test]
    fn single_band_is_two_stacked_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MultiScaleConfig {
            in_dim: 6,
            out_dim: 4,
            bands: 1,
            kernel: 3,
            dilation: 2,
        };
        let mut store = ParamStore::new();
        let layer = MultiScaleLayer::new(&mut store, "ms", cfg, true, 0.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((9, 6), |(i, j)| ((i * 7 + j) as f64 * 0.3).cos());
        let mut t = Tape::single(&store, Mode::Infer, 9, 0).unwrap();
        let xi = t.input(x).unwrap();
        let y = layer.forward(&mut t, xi).unwrap();
        let r = layer.rightward[0].forward(&mut t, xi).unwrap();
        let l = layer.leftward[0].forward(&mut t, r).unwrap();
        let sum = t.add(r, l).unwrap();
        assert_eq!(t.value(y), t.value(sum));
    }

    /// All-positive weights and identity batch norm keep every ReLU active,
    /// so the layer is linear and dependencies show up exactly.
    fn positive_layer(cfg: MultiScaleConfig) -> (ParamStore, MultiScaleLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = MultiScaleLayer::new(&mut store, "ms", cfg, true, 0.0, &mut rng).unwrap();
        for p in store.params_mut() {
            if p.name.ends_with(".w") {
                p.value.mapv_inplace(|v| v.abs() + 0.01);
            }
        }
        (store, layer)
    }

    fn response(
        store: &ParamStore,
        layer: &MultiScaleLayer,
        frames: usize,
        at: (usize, usize),
    ) -> Array2<f64> {
        let run = |x: Array2<f64>| {
            let mut t = Tape::single(store, Mode::Infer, frames, 0).unwrap();
            let xi = t.input(x).unwrap();
            let y = layer.forward(&mut t, xi).unwrap();
            t.value(y).clone()
        };
        let base = Array2::from_elem((frames, layer.cfg.in_dim), 1.0);
        let mut bumped = base.clone();
        bumped[at] += 1.0;
        run(bumped) - run(base)
    }

    #[test]
    fn reach_grows_with_band_chain() {
        for (m, k, d) in [(1, 3, 1), (2, 3, 1), (3, 3, 2), (4, 2, 1)] {
            let cfg = MultiScaleConfig {
                in_dim: 2 * m,
                out_dim: 2 * m,
                bands: m,
                kernel: k,
                dilation: d,
            };
            let (store, layer) = positive_layer(cfg);
            let frames = cfg.past_reach() + 6;
            let diff = response(&store, &layer, frames, (0, 0));
            // Output band 0 sees the first input frame exactly past_reach later.
            let last = (0..frames)
                .filter(|&t| diff.row(t).iter().take(2).any(|v| v.abs() > 1e-12))
                .max()
                .unwrap_or(0);
            assert_eq!(last, cfg.past_reach(), "m={m} k={k} d={d}");
            for t in (last + 1)..frames {
                assert!(diff.row(t).iter().all(|v| v.abs() < 1e-12), "m={m} t={t}");
            }
        }
    }

    #[test]
    fn causal_and_fully_connected_across_bands() {
        let cfg = MultiScaleConfig {
            in_dim: 8,
            out_dim: 8,
            bands: 4,
            kernel: 3,
            dilation: 1,
        };
        let (store, layer) = positive_layer(cfg);
        let frames = 12;
        for band_in in 0..4 {
            let t0 = 5;
            let diff = response(&store, &layer, frames, (t0, 2 * band_in));
            for t in 0..t0 {
                assert!(diff.row(t).iter().all(|v| *v == 0.0), "future leak at {t}");
            }
            for band_out in 0..4 {
                let touched = (t0..frames)
                    .any(|t| diff[[t, 2 * band_out]].abs() > 1e-12);
                assert!(touched, "input band {band_in} never reaches output band {band_out}");
            }
        }
    }

    #[test]
    fn rightward_pass_only_looks_at_lower_bands() {
        let cfg = MultiScaleConfig {
            in_dim: 6,
            out_dim: 6,
            bands: 3,
            kernel: 3,
            dilation: 1,
        };
        let (store, layer) = positive_layer(cfg);
        let frames = 10;
        let mut base = Array2::from_elem((frames, 6), 1.0);
        let run = |x: Array2<f64>| {
            let mut t = Tape::single(&store, Mode::Infer, frames, 0).unwrap();
            let xi = t.input(x).unwrap();
            let (right, _) = layer.directional_outputs(&mut t, xi).unwrap();
            right.iter().map(|v| t.value(*v).clone()).collect::<Vec<_>>()
        };
        let a = run(base.clone());
        base[[3, 4]] += 1.0;
        let b = run(base);
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert_ne!(a[2], b[2]);
    }
}
