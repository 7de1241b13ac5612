//! The full network: shared feature-extraction trunk, IRM and RI branches of
//! stacked encoder-decoder units (EDUs), and IRM attention gates coupling
//! the RI branch to the IRM branch.

use std::ops::Range;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, TargetSequence, LPS_DIM, RI_DIM, WAVE_DIM};
use crate::multiscale::{MultiScaleConfig, MultiScaleLayer};
use crate::nn::{
    mse_loss, BnUpdate, ConvBlock, ConvSpec, Dense, Gradients, LayerCost, Mode, ParamStore, Tape,
    Var,
};

pub const PRESETS: [&str; 5] = ["irm-ms", "ri-ms", "multi-ms", "multi-a", "multi-ms-a"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv_channels: usize,
    pub trunk_kernel: usize,
    pub trunk_dilations: Vec<usize>,
    pub trunk_dense_dim: usize,
    pub fusion_dim: usize,
    pub fusion_bands: usize,
    pub fusion_kernel: usize,
    pub fusion_dilation: usize,
    pub edu_dim: usize,
    pub edu_bands: usize,
    pub edu_kernel: usize,
    /// One EDU per entry.
    pub edu_dilations: Vec<usize>,
    pub enable_irm_branch: bool,
    pub enable_ri_branch: bool,
    pub enable_multiscale: bool,
    pub enable_attention: bool,
    pub dropout: f64,
    /// Multiplies every hidden width; feature and target widths are fixed.
    pub scale_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: 512,
            trunk_kernel: 3,
            trunk_dilations: vec![1, 3, 5],
            trunk_dense_dim: RI_DIM,
            fusion_dim: 2 * RI_DIM,
            fusion_bands: 16,
            fusion_kernel: 1,
            fusion_dilation: 1,
            edu_dim: RI_DIM,
            edu_bands: 8,
            edu_kernel: 3,
            edu_dilations: vec![1, 3, 5],
            enable_irm_branch: true,
            enable_ri_branch: true,
            enable_multiscale: true,
            enable_attention: true,
            dropout: 0.2,
            scale_factor: 1.0,
        }
    }
}

/// Hidden widths after applying `scale_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResolvedDims {
    pub conv_channels: usize,
    pub trunk_dense_dim: usize,
    pub fusion_dim: usize,
    pub edu_dim: usize,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let (irm, ri, ms, att) = match name {
            "irm-ms" => (true, false, true, false),
            "ri-ms" => (false, true, true, false),
            "multi-ms" => (true, true, true, false),
            "multi-a" => (true, true, false, true),
            "multi-ms-a" => (true, true, true, true),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            enable_irm_branch: irm,
            enable_ri_branch: ri,
            enable_multiscale: ms,
            enable_attention: att,
            ..base
        })
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale_factor = factor;
        self
    }

    pub fn dims(&self) -> ResolvedDims {
        let s = self.scale_factor;
        let scale = |v: usize, min: usize| ((v as f64 * s).round() as usize).max(min).max(1);
        let edu = scale(self.edu_dim, self.edu_bands.max(2));
        ResolvedDims {
            conv_channels: scale(self.conv_channels, 1),
            trunk_dense_dim: scale(self.trunk_dense_dim, 1),
            fusion_dim: scale(self.fusion_dim, self.fusion_bands),
            // The attention gate duplicates its factors over two halves.
            edu_dim: edu + edu % 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: String| Err(Error::config(format!("model.{key}: {why}")));
        if !(self.scale_factor.is_finite() && self.scale_factor > 0.0) {
            return fail("scale_factor", format!("{} is not positive", self.scale_factor));
        }
        if !self.enable_irm_branch && !self.enable_ri_branch {
            return fail("enable_irm_branch", "at least one branch must be enabled".into());
        }
        if self.enable_attention && !(self.enable_irm_branch && self.enable_ri_branch) {
            return fail(
                "enable_attention",
                "the IRM attention gate needs both branches".into(),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        for (key, v) in [
            ("conv_channels", self.conv_channels),
            ("trunk_kernel", self.trunk_kernel),
            ("trunk_dense_dim", self.trunk_dense_dim),
            ("fusion_dim", self.fusion_dim),
            ("fusion_bands", self.fusion_bands),
            ("fusion_kernel", self.fusion_kernel),
            ("fusion_dilation", self.fusion_dilation),
            ("edu_dim", self.edu_dim),
            ("edu_bands", self.edu_bands),
            ("edu_kernel", self.edu_kernel),
        ] {
            if v == 0 {
                return fail(key, "must be positive".into());
            }
        }
        for (key, ds) in [
            ("trunk_dilations", &self.trunk_dilations),
            ("edu_dilations", &self.edu_dilations),
        ] {
            if ds.is_empty() || ds.contains(&0) {
                return fail(key, format!("{ds:?} must be non-empty and positive"));
            }
        }
        let d = self.dims();
        if self.fusion_bands > d.fusion_dim || self.edu_bands > d.edu_dim {
            return fail(
                "scale_factor",
                format!("widths {d:?} too narrow for the configured sub-band counts"),
            );
        }
        Ok(())
    }

    /// Past frames any output can depend on, from the layer geometry.
    pub fn past_reach(&self) -> usize {
        let trunk: usize = self
            .trunk_dilations
            .iter()
            .map(|d| d * (self.trunk_kernel - 1))
            .sum();
        let per_layer = |k: usize, d: usize, bands: usize| {
            if self.enable_multiscale {
                2 * bands * d * (k - 1)
            } else {
                d * (k - 1)
            }
        };
        let fusion = per_layer(self.fusion_kernel, self.fusion_dilation, self.fusion_bands);
        let edus: usize = self
            .edu_dilations
            .iter()
            .map(|&d| per_layer(self.edu_kernel, d, self.edu_bands))
            .sum();
        trunk + fusion + edus
    }
}

/// A mixing layer: the multi-scale sub-band layer, or a single causal conv
/// block of the same output width when multi-scale is ablated.
#[derive(Debug, Clone)]
pub enum Mixer {
    MultiScale(MultiScaleLayer),
    Conv(ConvBlock),
}

impl Mixer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: MultiScaleConfig,
        multiscale: bool,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if multiscale {
            Ok(Self::MultiScale(MultiScaleLayer::new(
                store, name, cfg, true, dropout, rng,
            )?))
        } else {
            let spec = ConvSpec::new(cfg.kernel, cfg.dilation, cfg.in_dim, cfg.out_dim)?;
            Ok(Self::Conv(ConvBlock::new(
                store,
                &format!("{name}/conv"),
                spec,
                true,
                dropout,
                rng,
            )))
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::MultiScale(l) => l.forward(tape, x),
            Self::Conv(c) => c.forward(tape, x),
        }
    }

    pub fn costs(&self) -> Vec<LayerCost> {
        match self {
            Self::MultiScale(l) => l.costs(),
            Self::Conv(c) => c.costs(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trunk {
    pub convs: Vec<ConvBlock>,
    pub dense: Dense,
    pub fusion: Mixer,
}

/// Encoder (mixer over `[estimate, original]`) and dense decoder.
#[derive(Debug, Clone)]
pub struct Edu {
    pub encoder: Mixer,
    pub decoder: Dense,
    pub sigmoid: bool,
}

impl Edu {
    pub fn encode(&self, tape: &mut Tape, estimate: Var, original: Var) -> Result<Var> {
        let x = tape.concat(&[estimate, original])?;
        self.encoder.forward(tape, x)
    }

    pub fn decode(&self, tape: &mut Tape, encoded: Var) -> Result<Var> {
        let y = self.decoder.forward(tape, encoded)?;
        Ok(if self.sigmoid { tape.sigmoid(y) } else { y })
    }

    /// Refined estimate and the encoded features it was decoded from.
    pub fn forward(&self, tape: &mut Tape, estimate: Var, original: Var) -> Result<(Var, Var)> {
        let enc = self.encode(tape, estimate, original)?;
        Ok((self.decode(tape, enc)?, enc))
    }

    fn costs(&self) -> Vec<LayerCost> {
        let mut out = self.encoder.costs();
        out.push(self.decoder.cost());
        if self.sigmoid {
            out.push(LayerCost {
                name: format!("{}.sigmoid", self.decoder.name),
                params: 0,
                flops: self.decoder.out_dim,
            });
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub head: Dense,
    pub sigmoid: bool,
    pub edus: Vec<Edu>,
}

impl Branch {
    fn initial(&self, tape: &mut Tape, trunk: Var) -> Result<Var> {
        let y = self.head.forward(tape, trunk)?;
        Ok(if self.sigmoid { tape.sigmoid(y) } else { y })
    }

    fn costs(&self) -> Vec<LayerCost> {
        let mut out = vec![self.head.cost()];
        if self.sigmoid {
            out.push(LayerCost {
                name: format!("{}.sigmoid", self.head.name),
                params: 0,
                flops: self.head.out_dim,
            });
        }
        out.extend(self.edus.iter().flat_map(Edu::costs));
        out
    }
}

/// `sigmoid(Dense(irm))`, duplicated over the real and imaginary halves of
/// the RI features it multiplies.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub dense: Dense,
}

impl AttentionGate {
    pub fn factors(&self, tape: &mut Tape, irm: Var) -> Result<Var> {
        let a = self.dense.forward(tape, irm)?;
        Ok(tape.sigmoid(a))
    }

    pub fn forward(&self, tape: &mut Tape, irm: Var, ri_encoded: Var) -> Result<Var> {
        let a = self.factors(tape, irm)?;
        let both = tape.concat(&[a, a])?;
        tape.mul(ri_encoded, both)
    }

    fn costs(&self) -> Vec<LayerCost> {
        vec![
            self.dense.cost(),
            LayerCost {
                name: format!("{}.apply", self.dense.name),
                params: 0,
                // sigmoid per factor, one multiply per gated feature
                flops: 3 * self.dense.out_dim,
            },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub trunk: Trunk,
    pub irm: Option<Branch>,
    pub ri: Option<Branch>,
    pub gates: Vec<AttentionGate>,
}

/// Tape handles of the network inputs and outputs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub y1: Var,
    pub y2: Var,
    pub y3: Var,
    pub trunk: Var,
    pub irm: Option<Var>,
    pub ri: Option<Var>,
}

impl Network {
    pub fn feature_extraction_forward(
        &self,
        tape: &mut Tape,
        y1: Var,
        y2: Var,
        y3: Var,
    ) -> Result<Var> {
        let mut h = y2;
        for conv in &self.trunk.convs {
            h = conv.forward(tape, h)?;
        }
        let h = self.trunk.dense.forward(tape, h)?;
        let fused = tape.concat(&[y1, h, y3])?;
        self.trunk.fusion.forward(tape, fused)
    }

    pub fn forward(&self, tape: &mut Tape, features: &FeatureSequence) -> Result<ForwardVars> {
        check_widths(features)?;
        let y1 = tape.input(features.y1.clone())?;
        let y2 = tape.input(features.y2.clone())?;
        let y3 = tape.input(features.y3.clone())?;
        let trunk = self.feature_extraction_forward(tape, y1, y2, y3)?;
        let mut irm = self.irm.as_ref().map(|b| b.initial(tape, trunk)).transpose()?;
        let mut ri = self.ri.as_ref().map(|b| b.initial(tape, trunk)).transpose()?;
        let depth = self
            .irm
            .as_ref()
            .or(self.ri.as_ref())
            .map_or(0, |b| b.edus.len());
        for i in 0..depth {
            if let (Some(branch), Some(est)) = (&self.irm, irm) {
                irm = Some(branch.edus[i].forward(tape, est, y1)?.0);
            }
            if let (Some(branch), Some(est)) = (&self.ri, ri) {
                let edu = &branch.edus[i];
                let mut enc = edu.encode(tape, est, y3)?;
                if let (Some(gate), Some(irm_est)) = (self.gates.get(i), irm) {
                    enc = gate.forward(tape, irm_est, enc)?;
                }
                ri = Some(edu.decode(tape, enc)?);
            }
        }
        Ok(ForwardVars {
            y1,
            y2,
            y3,
            trunk,
            irm,
            ri,
        })
    }

    pub fn costs(&self) -> Vec<LayerCost> {
        let mut out: Vec<LayerCost> = self.trunk.convs.iter().flat_map(|c| c.costs()).collect();
        out.push(self.trunk.dense.cost());
        out.extend(self.trunk.fusion.costs());
        for b in self.irm.iter().chain(&self.ri) {
            out.extend(b.costs());
        }
        out.extend(self.gates.iter().flat_map(AttentionGate::costs));
        out
    }
}

fn check_widths(f: &FeatureSequence) -> Result<()> {
    let got = [f.y1.ncols(), f.y2.ncols(), f.y3.ncols()];
    if got != [LPS_DIM, WAVE_DIM, RI_DIM] {
        return Err(Error::invalid(format!(
            "feature widths {got:?}, expected [{LPS_DIM}, {WAVE_DIM}, {RI_DIM}]"
        )));
    }
    let t = f.y1.nrows();
    if f.y2.nrows() != t || f.y3.nrows() != t || t == 0 {
        return Err(Error::invalid("feature streams disagree on frame count"));
    }
    Ok(())
}

/// Network estimates for one or more utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    /// `T x 257`, in [0, 1].
    pub irm: Option<Array2<f64>>,
    /// `T x 514`, real parts then imaginary parts.
    pub ri: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub irm: f64,
    pub ri: f64,
    pub total: f64,
}

/// Gradients and side effects of one training forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Complexity {
    pub params: usize,
    pub flops_per_frame: usize,
    pub layers: Vec<LayerCost>,
}

impl Complexity {
    pub fn ratio(&self) -> f64 {
        self.flops_per_frame as f64 / self.params as f64
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub net: Network,
    pub params: ParamStore,
}

impl Model {
    /// Deterministic in `(cfg, seed)`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = cfg.dropout;

        let mut convs = Vec::new();
        let mut width = WAVE_DIM;
        for (i, &dil) in cfg.trunk_dilations.iter().enumerate() {
            let spec = ConvSpec::new(cfg.trunk_kernel, dil, width, d.conv_channels)?;
            convs.push(ConvBlock::new(
                &mut store,
                &format!("trunk.{i}"),
                spec,
                true,
                p,
                &mut rng,
            ));
            width = d.conv_channels;
        }
        let dense = Dense::new(&mut store, "trunk.dense", width, d.trunk_dense_dim, &mut rng);
        let fusion_cfg = MultiScaleConfig {
            in_dim: LPS_DIM + d.trunk_dense_dim + RI_DIM,
            out_dim: d.fusion_dim,
            bands: cfg.fusion_bands,
            kernel: cfg.fusion_kernel,
            dilation: cfg.fusion_dilation,
        };
        let fusion = Mixer::new(
            &mut store,
            "fusion",
            fusion_cfg,
            cfg.enable_multiscale,
            p,
            &mut rng,
        )?;
        let trunk = Trunk {
            convs,
            dense,
            fusion,
        };

        let branch = |store: &mut ParamStore,
                          rng: &mut ChaCha8Rng,
                          name: &str,
                          target: usize,
                          sigmoid: bool|
         -> Result<Branch> {
            let head = Dense::new(store, &format!("{name}.head"), d.fusion_dim, target, rng);
            let mut edus = Vec::new();
            for (i, &dil) in cfg.edu_dilations.iter().enumerate() {
                let ms = MultiScaleConfig {
                    in_dim: 2 * target,
                    out_dim: d.edu_dim,
                    bands: cfg.edu_bands,
                    kernel: cfg.edu_kernel,
                    dilation: dil,
                };
                let encoder = Mixer::new(
                    store,
                    &format!("{name}.edu{i}"),
                    ms,
                    cfg.enable_multiscale,
                    p,
                    rng,
                )?;
                let decoder =
                    Dense::new(store, &format!("{name}.edu{i}.dec"), d.edu_dim, target, rng);
                edus.push(Edu {
                    encoder,
                    decoder,
                    sigmoid,
                });
            }
            Ok(Branch {
                head,
                sigmoid,
                edus,
            })
        };
        let irm = cfg
            .enable_irm_branch
            .then(|| branch(&mut store, &mut rng, "irm", LPS_DIM, true))
            .transpose()?;
        let ri = cfg
            .enable_ri_branch
            .then(|| branch(&mut store, &mut rng, "ri", RI_DIM, false))
            .transpose()?;
        let gates = if cfg.enable_attention {
            (0..cfg.edu_dilations.len())
                .map(|i| AttentionGate {
                    dense: Dense::new(
                        &mut store,
                        &format!("gate{i}"),
                        LPS_DIM,
                        d.edu_dim / 2,
                        &mut rng,
                    ),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            config: cfg.clone(),
            net: Network {
                trunk,
                irm,
                ri,
                gates,
            },
            params: store,
        })
    }

    pub fn complexity(&self) -> Complexity {
        count_params_flops(self)
    }

    /// Inference-mode forward pass over one utterance.
    pub fn infer(&self, features: &FeatureSequence) -> Result<ModelOutputs> {
        let frames = features.num_frames();
        let mut tape = Tape::single(&self.params, Mode::Infer, frames, 0)?;
        let vars = self.net.forward(&mut tape, features)?;
        Ok(ModelOutputs {
            irm: vars.irm.map(|v| tape.value(v).clone()),
            ri: vars.ri.map(|v| tape.value(v).clone()),
        })
    }

    /// Equal-weight MSE over the enabled branches.
    pub fn loss(
        &self,
        features: &FeatureSequence,
        targets: &TargetSequence,
        segments: &[Range<usize>],
        mode: Mode,
        seed: u64,
    ) -> Result<LossBreakdown> {
        Ok(self.run(features, targets, segments, mode, seed, false)?.0)
    }

    /// Train-mode forward and backward pass. Running batch-norm statistics
    /// are returned, not applied.
    pub fn train_step(
        &self,
        features: &FeatureSequence,
        targets: &TargetSequence,
        segments: &[Range<usize>],
        seed: u64,
    ) -> Result<StepOutcome> {
        let (loss, grads, bn_updates) =
            self.run(features, targets, segments, Mode::Train, seed, true)?;
        Ok(StepOutcome {
            loss,
            grads: grads.expect("requested"),
            bn_updates,
        })
    }

    fn run(
        &self,
        features: &FeatureSequence,
        targets: &TargetSequence,
        segments: &[Range<usize>],
        mode: Mode,
        seed: u64,
        backward: bool,
    ) -> Result<(LossBreakdown, Option<Gradients>, Vec<BnUpdate>)> {
        let mut tape = Tape::new(&self.params, mode, segments.to_vec(), seed)?;
        let vars = self.net.forward(&mut tape, features)?;
        let mut seeds = Vec::new();
        let mut loss = LossBreakdown {
            irm: 0.0,
            ri: 0.0,
            total: 0.0,
        };
        if let Some(v) = vars.irm {
            let (l, g) = mse_loss(tape.value(v), &targets.irm)?;
            loss.irm = l;
            seeds.push((v, g));
        }
        if let Some(v) = vars.ri {
            let (l, g) = mse_loss(tape.value(v), &targets.ri_clean)?;
            loss.ri = l;
            seeds.push((v, g));
        }
        loss.total = loss.irm + loss.ri;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", loss.total)));
        }
        let grads = if backward {
            Some(tape.backward(&seeds)?.params)
        } else {
            None
        };
        Ok((loss, grads, tape.bn_updates().to_vec()))
    }
}

/// Parameter count and inference FLOPs per frame, with a per-layer table.
pub fn count_params_flops(model: &Model) -> Complexity {
    let layers = model.net.costs();
    Complexity {
        params: layers.iter().map(|l| l.params).sum(),
        flops_per_frame: layers.iter().map(|l| l.flops).sum(),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(frames: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |c| Array2::from_shape_simple_fn((frames, c), || rng.gen_range(-1.0..1.0));
        FeatureSequence {
            y1: gen(LPS_DIM),
            y2: gen(WAVE_DIM),
            y3: gen(RI_DIM),
        }
    }

    fn toy(preset: &str) -> ModelConfig {
        ModelConfig::preset(preset).unwrap().scaled(1.0 / 16.0)
    }

    #[test]
    fn presets_parse_and_validate() {
        for p in PRESETS {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("multi").is_err());
        assert_eq!(ModelConfig::preset("multi-ms-a").unwrap(), ModelConfig::default());
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = ModelConfig {
            enable_irm_branch: false,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            enable_irm_branch: false,
            enable_ri_branch: false,
            enable_attention: false,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            edu_dilations: vec![1, 0],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"edu_dimm": 3}"#).unwrap_err();
        assert!(err.to_string().contains("edu_dimm"));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(&toy("multi-ms-a"), 9).unwrap();
        let b = Model::build(&toy("multi-ms-a"), 9).unwrap();
        let c = Model::build(&toy("multi-ms-a"), 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn cost_table_params_match_store() {
        for p in PRESETS {
            let m = Model::build(&toy(p), 0).unwrap();
            assert_eq!(m.complexity().params, m.params.num_scalars(), "{p}");
        }
    }

    #[test]
    fn toy_forward_shapes_and_ranges() {
        let m = Model::build(&toy("multi-ms-a"), 1).unwrap();
        let f = random_features(11, 2);
        let out = m.infer(&f).unwrap();
        let irm = out.irm.unwrap();
        let ri = out.ri.unwrap();
        assert_eq!(irm.dim(), (11, LPS_DIM));
        assert_eq!(ri.dim(), (11, RI_DIM));
        assert!(irm.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(ri.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_branch_presets_skip_the_other_output() {
        let f = random_features(5, 3);
        let irm_only = Model::build(&toy("irm-ms"), 1).unwrap().infer(&f).unwrap();
        assert!(irm_only.irm.is_some() && irm_only.ri.is_none());
        let ri_only = Model::build(&toy("ri-ms"), 1).unwrap().infer(&f).unwrap();
        assert!(ri_only.irm.is_none() && ri_only.ri.is_some());
    }

    #[test]
    fn gate_halves_with_zero_weights_and_passes_when_saturated() {
        let m = Model::build(&toy("multi-ms-a"), 4).unwrap();
        let gate = &m.net.gates[0];
        let mut store = m.params.clone();
        store.get_mut(gate.dense.w).value.fill(0.0);
        store.get_mut(gate.dense.b).value.fill(0.0);
        let run = |s: &ParamStore| {
            let mut t = Tape::single(s, Mode::Infer, 4, 0).unwrap();
            let irm = t.input(Array2::from_elem((4, LPS_DIM), 0.3)).unwrap();
            let enc = t
                .input(Array2::from_shape_fn((4, gate.dense.out_dim * 2), |(i, j)| {
                    (i * 13 + j) as f64 * 0.01 - 0.2
                }))
                .unwrap();
            let y = gate.forward(&mut t, irm, enc).unwrap();
            let a = gate.factors(&mut t, irm).unwrap();
            (t.value(enc).clone(), t.value(y).clone(), t.value(a).clone())
        };
        let (enc, y, _) = run(&store);
        assert!(y.iter().zip(&enc).all(|(y, e)| (y - 0.5 * e).abs() < 1e-15));
        store.get_mut(gate.dense.b).value.fill(30.0);
        let (enc, y, _) = run(&store);
        assert!(y.iter().zip(&enc).all(|(y, e)| (y - e).abs() < 1e-9));
        let (enc, y, a) = run(&m.params);
        let half = a.ncols();
        for t in 0..4 {
            for k in 0..half {
                assert!((y[[t, k]] - a[[t, k]] * enc[[t, k]]).abs() < 1e-15);
                assert!((y[[t, k + half]] - a[[t, k]] * enc[[t, k + half]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn irm_branch_ignores_ri_parameters_without_attention() {
        let m = Model::build(&toy("multi-ms"), 5).unwrap();
        let f = random_features(9, 6);
        let before = m.infer(&f).unwrap();
        let mut perturbed = m.clone();
        for p in perturbed.params.params_mut() {
            if p.name.starts_with("ri.") {
                p.value.mapv_inplace(|v| v * 1.7 + 0.05);
            }
        }
        let after = perturbed.infer(&f).unwrap();
        assert_eq!(before.irm, after.irm);
        assert_ne!(before.ri, after.ri);
    }

    #[test]
    fn trunk_past_reach_is_eighteen() {
        let m = Model::build(&toy("multi-ms-a"), 7).unwrap();
        let frames = 30;
        let base = random_features(frames, 8);
        let run = |f: &FeatureSequence| {
            let mut t = Tape::single(&m.params, Mode::Infer, frames, 0).unwrap();
            let vars = m.net.forward(&mut t, f).unwrap();
            t.value(vars.trunk).clone()
        };
        let a = run(&base);
        let mut bumped = base.clone();
        bumped.y2.row_mut(0).mapv_inplace(|v| v + 1.0);
        let b = run(&bumped);
        let last = (0..frames)
            .filter(|&t| (0..a.ncols()).any(|c| (a[[t, c]] - b[[t, c]]).abs() > 0.0))
            .max()
            .unwrap();
        assert_eq!(last, 18);
    }

    #[test]
    fn geometry_reach() {
        assert_eq!(ModelConfig::default().past_reach(), 18 + 2 * 8 * 2 * 9);
        assert_eq!(ModelConfig::preset("multi-a").unwrap().past_reach(), 36);
    }

    #[test]
    fn loss_is_sum_of_branch_mses() {
        let m = Model::build(&toy("multi-ms-a"), 2).unwrap();
        let f = random_features(6, 1);
        let out = m.infer(&f).unwrap();
        let targets = TargetSequence {
            irm: Array2::from_elem((6, LPS_DIM), 0.5),
            ri_clean: Array2::from_elem((6, RI_DIM), 0.1),
        };
        let l = m.loss(&f, &targets, &[0..6], Mode::Infer, 0).unwrap();
        let mse = |a: &Array2<f64>, b: &Array2<f64>| {
            (a - b).mapv(|v| v * v).sum() / a.len() as f64
        };
        assert!((l.irm - mse(out.irm.as_ref().unwrap(), &targets.irm)).abs() < 1e-12);
        assert!((l.ri - mse(out.ri.as_ref().unwrap(), &targets.ri_clean)).abs() < 1e-12);
        assert_eq!(l.total, l.irm + l.ri);
    }
}
