//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Gradients, ParamStore};
use crate::error::Result;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub coords: usize,
    pub worst_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub worst_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
    pub layers: Vec<LayerCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `analytic` against `(L(θ + h e_i) - L(θ - h e_i)) / 2h` on up to
/// `per_layer` coordinates of every logical layer (all coordinates when the
/// layer is smaller). `loss` must be a deterministic function of the store.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    analytic: &Gradients,
    mut loss: F,
    h: f64,
    per_layer: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut layers: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (pi, p) in store.params().iter().enumerate() {
        let coords = layers.entry(p.layer().to_string()).or_default();
        coords.extend((0..p.value.len()).map(|i| (pi, i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        worst_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
        layers: Vec::new(),
    };
    for (layer, coords) in &layers {
        let chosen: Vec<(usize, usize)> = if coords.len() <= per_layer {
            coords.clone()
        } else {
            let mut idx = sample(&mut rng, coords.len(), per_layer).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        };
        let mut worst = 0.0f64;
        for &(pi, flat) in &chosen {
            let original = {
                let v = probe.params_mut()[pi]
                    .value
                    .as_slice_mut()
                    .expect("parameters are contiguous");
                let o = v[flat];
                v[flat] = o + h;
                o
            };
            let plus = loss(&probe)?;
            probe.params_mut()[pi].value.as_slice_mut().unwrap()[flat] = original - h;
            let minus = loss(&probe)?;
            probe.params_mut()[pi].value.as_slice_mut().unwrap()[flat] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.iter().nth(pi).expect("aligned gradients").as_slice().unwrap()[flat];
            let err = relative_error(a, numeric);
            worst = worst.max(err);
            if err > report.worst_rel_error {
                report.worst_rel_error = err;
                report.worst_param = store.params()[pi].name.clone();
                report.worst_index = flat;
            }
        }
        report.coords_checked += chosen.len();
        report.layers.push(LayerCheck {
            layer: layer.clone(),
            coords: chosen.len(),
            worst_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{BatchNorm, ConvBlock, ConvSpec, Dense};
    use crate::nn::{mse_loss, Mode, Tape};
    use ndarray::Array2;
    use rand::Rng;

    fn data(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_dense_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 12, 7, &mut rng);
        let x = data(9, 12, 2);
        let target = data(9, 7, 3);
        let run = |s: &ParamStore, grads: bool| {
            let mut t = Tape::single(s, Mode::Train, 9, 0).unwrap();
            let xi = t.input(x.clone()).unwrap();
            let y = d.forward(&mut t, xi).unwrap();
            let (l, g) = mse_loss(t.value(y), &target).unwrap();
            let back = grads.then(|| t.backward(&[(y, g)]).unwrap().params);
            (l, back)
        };
        let analytic = run(&store, true).1.unwrap();
        let report =
            finite_diff_check(&store, &analytic, |s| Ok(run(s, false).0), 1e-5, 200, 0).unwrap();
        assert!(report.worst_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.coords_checked, 12 * 7 + 7);
    }

    #[test]
    fn conv_block_with_train_mode_bn_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = ConvBlock::new(
            &mut store,
            "blk",
            ConvSpec::new(3, 2, 6, 5).unwrap(),
            true,
            0.2,
            &mut rng,
        );
        let bn2 = BatchNorm::new(&mut store, "bn2", 5);
        let head = Dense::new(&mut store, "head", 5, 3, &mut rng);
        let x = data(14, 6, 5);
        let target = data(14, 3, 6);
        let segments = vec![0..8, 8..14];
        let run = |s: &ParamStore, grads: bool| {
            // Same seed on every call: identical dropout masks.
            let mut t = Tape::new(s, Mode::Train, segments.clone(), 77).unwrap();
            let xi = t.input(x.clone()).unwrap();
            let h = block.forward(&mut t, xi).unwrap();
            let h = bn2.forward(&mut t, h).unwrap();
            let h = t.sigmoid(h);
            let y = head.forward(&mut t, h).unwrap();
            let (l, g) = mse_loss(t.value(y), &target).unwrap();
            let back = grads.then(|| t.backward(&[(y, g)]).unwrap().params);
            (l, back)
        };
        let analytic = run(&store, true).1.unwrap();
        let report =
            finite_diff_check(&store, &analytic, |s| Ok(run(s, false).0), 1e-5, 200, 1).unwrap();
        assert!(report.worst_rel_error < 1e-4, "{report:?}");
    }
}
