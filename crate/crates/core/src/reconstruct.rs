//! Turning network estimates back into a waveform: mask magnitude, mapped
//! magnitude and phase, their fusion, and the five reconstruction modes.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, ComplexSpectrogram, FrameSpec, Waveform};
use crate::error::{Error, Result};
use crate::features::{extract_features, NormalizerStats, LPS_DIM, RI_DIM};
use crate::model::{Model, ModelOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionMode {
    IrmUnpha,
    IrmEnpha,
    RiEnpha,
    AveUnpha,
    AveEnpha,
}

impl Default for ReconstructionMode {
    fn default() -> Self {
        Self::AveEnpha
    }
}

impl ReconstructionMode {
    pub const ALL: [ReconstructionMode; 5] = [
        Self::IrmUnpha,
        Self::IrmEnpha,
        Self::RiEnpha,
        Self::AveUnpha,
        Self::AveEnpha,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::IrmUnpha => "irm-unpha",
            Self::IrmEnpha => "irm-enpha",
            Self::RiEnpha => "ri-enpha",
            Self::AveUnpha => "ave-unpha",
            Self::AveEnpha => "ave-enpha",
        }
    }

    pub fn needs_irm(self) -> bool {
        !matches!(self, Self::RiEnpha)
    }

    pub fn needs_ri(self) -> bool {
        !matches!(self, Self::IrmUnpha)
    }
}

impl fmt::Display for ReconstructionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReconstructionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown reconstruction mode {s:?}; expected one of irm-unpha, irm-enpha, \
                     ri-enpha, ave-unpha, ave-enpha"
                ))
            })
    }
}

fn check_shape(what: &str, a: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if a.dim() != (rows, cols) {
        return Err(Error::invalid(format!(
            "{what} is {:?}, expected ({rows}, {cols})",
            a.dim()
        )));
    }
    Ok(())
}

/// `sqrt(exp(Y1)) * mask`, with `Y1` the unnormalized log power spectrum.
pub fn magnitude_from_irm(y1_raw: &Array2<f64>, irm: &Array2<f64>) -> Result<Array2<f64>> {
    check_shape("IRM estimate", irm, y1_raw.nrows(), y1_raw.ncols())?;
    Ok(Zip::from(y1_raw)
        .and(irm)
        .map_collect(|&y, &m| (0.5 * y).exp() * m))
}

fn split_ri(ri: &Array2<f64>) -> Result<usize> {
    if ri.ncols() % 2 != 0 {
        return Err(Error::invalid(format!("RI width {} is odd", ri.ncols())));
    }
    Ok(ri.ncols() / 2)
}

pub fn magnitude_from_ri(ri: &Array2<f64>) -> Result<Array2<f64>> {
    let bins = split_ri(ri)?;
    Ok(Array2::from_shape_fn((ri.nrows(), bins), |(t, k)| {
        ri[[t, k]].hypot(ri[[t, k + bins]])
    }))
}

/// Four-quadrant angle of each (Re, Im) pair; `(0, 0)` maps to 0.
pub fn phase_from_ri(ri: &Array2<f64>) -> Result<Array2<f64>> {
    let bins = split_ri(ri)?;
    Ok(Array2::from_shape_fn((ri.nrows(), bins), |(t, k)| {
        ri[[t, k + bins]].atan2(ri[[t, k]])
    }))
}

/// Magnitude and phase of an enhanced spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedSpectrum {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
}

impl EnhancedSpectrum {
    pub fn new(magnitude: Array2<f64>, phase: Array2<f64>) -> Result<Self> {
        if magnitude.dim() != phase.dim() {
            return Err(Error::invalid(format!(
                "magnitude {:?} vs phase {:?}",
                magnitude.dim(),
                phase.dim()
            )));
        }
        Ok(Self { magnitude, phase })
    }

    pub fn to_complex(&self) -> Array2<Complex64> {
        Zip::from(&self.magnitude)
            .and(&self.phase)
            .map_collect(|&m, &p| Complex64::from_polar(m, p))
    }
}

/// Average of the two magnitude estimates, paired with `phase`.
pub fn fuse_spectra(
    mag_irm: &Array2<f64>,
    mag_ri: &Array2<f64>,
    phase: Array2<f64>,
) -> Result<EnhancedSpectrum> {
    if mag_irm.dim() != mag_ri.dim() {
        return Err(Error::invalid(format!(
            "IRM magnitude {:?} vs RI magnitude {:?}",
            mag_irm.dim(),
            mag_ri.dim()
        )));
    }
    EnhancedSpectrum::new((mag_irm + mag_ri) * 0.5, phase)
}

/// Magnitude and phase selection for one mode.
pub fn enhanced_spectrum(
    mode: ReconstructionMode,
    outputs: &ModelOutputs,
    y1_raw: &Array2<f64>,
    noisy: &ComplexSpectrogram,
) -> Result<EnhancedSpectrum> {
    let frames = noisy.num_frames();
    check_shape("raw LPS", y1_raw, frames, LPS_DIM)?;
    let need = |o: &Option<Array2<f64>>, what: &str, cols: usize| -> Result<Array2<f64>> {
        let a = o.as_ref().ok_or_else(|| {
            Error::config(format!(
                "mode {mode} needs the {what} branch, which this model does not have"
            ))
        })?;
        check_shape(what, a, frames, cols)?;
        Ok(a.clone())
    };
    let mag_irm = if mode.needs_irm() {
        Some(magnitude_from_irm(y1_raw, &need(&outputs.irm, "IRM", LPS_DIM)?)?)
    } else {
        None
    };
    let ri = if mode.needs_ri() {
        Some(need(&outputs.ri, "RI", RI_DIM)?)
    } else {
        None
    };
    let noisy_phase = || noisy.frames.mapv(|c| c.arg());
    let mag_ri = ri.as_ref().map(magnitude_from_ri).transpose()?;
    let en_phase = ri.as_ref().map(phase_from_ri).transpose()?;
    match mode {
        ReconstructionMode::IrmUnpha => EnhancedSpectrum::new(mag_irm.unwrap(), noisy_phase()),
        ReconstructionMode::IrmEnpha => EnhancedSpectrum::new(mag_irm.unwrap(), en_phase.unwrap()),
        ReconstructionMode::RiEnpha => EnhancedSpectrum::new(mag_ri.unwrap(), en_phase.unwrap()),
        ReconstructionMode::AveUnpha => {
            fuse_spectra(&mag_irm.unwrap(), &mag_ri.unwrap(), noisy_phase())
        }
        ReconstructionMode::AveEnpha => {
            fuse_spectra(&mag_irm.unwrap(), &mag_ri.unwrap(), en_phase.unwrap())
        }
    }
}

/// Synthesise a waveform from network estimates of a noisy utterance.
pub fn reconstruct(
    mode: ReconstructionMode,
    outputs: &ModelOutputs,
    y1_raw: &Array2<f64>,
    noisy: &ComplexSpectrogram,
) -> Result<Waveform> {
    let spectrum = enhanced_spectrum(mode, outputs, y1_raw, noisy)?;
    let s = ComplexSpectrogram {
        frames: spectrum.to_complex(),
        frame_spec: noisy.frame_spec.clone(),
    };
    dsp::istft(&s, &noisy.frame_spec)
}

/// Full enhancement of one noisy utterance. The output covers the samples
/// spanned by whole frames, so it can be shorter than the input.
pub fn enhance_utterance(
    noisy: &Waveform,
    model: &Model,
    normalizer: &NormalizerStats,
    mode: ReconstructionMode,
) -> Result<Waveform> {
    noisy.require_pipeline_rate()?;
    let spec = FrameSpec::default();
    let (raw, stft) = extract_features(noisy, &spec)?;
    let outputs = model.infer(&normalizer.apply(&raw)?)?;
    reconstruct(mode, &outputs, &raw.y1, &stft)
}
