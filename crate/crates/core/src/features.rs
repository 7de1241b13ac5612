//! Network inputs (log power spectrum, windowed waveform frame, real/imaginary
//! spectrum), their per-dimension z-scoring, and the IRM / clean-RI targets.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, ComplexSpectrogram, FrameSpec, Waveform};
use crate::error::{Error, Result};

pub const LPS_DIM: usize = dsp::BINS;
pub const WAVE_DIM: usize = dsp::FRAME_LEN;
pub const RI_DIM: usize = 2 * dsp::BINS;

/// Floor applied to the power spectrum before the logarithm.
pub const LPS_FLOOR: f64 = 1e-12;
/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-8;
/// Default IRM exponent (square-root energy ratio).
pub const IRM_EXPONENT: f64 = 0.5;

/// One frame of network input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTriplet {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y3: Vec<f64>,
}

/// Per-utterance feature matrices, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// Log power spectrum, `T x 257`.
    pub y1: Array2<f64>,
    /// Windowed time-domain frame, `T x 512`.
    pub y2: Array2<f64>,
    /// Real parts then imaginary parts, `T x 514`.
    pub y3: Array2<f64>,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.y1.nrows()
    }

    pub fn frame(&self, t: usize) -> FeatureTriplet {
        FeatureTriplet {
            y1: self.y1.row(t).to_vec(),
            y2: self.y2.row(t).to_vec(),
            y3: self.y3.row(t).to_vec(),
        }
    }

    /// Concatenates utterances along the frame axis.
    pub fn concat(parts: &[&FeatureSequence]) -> FeatureSequence {
        let cat = |f: fn(&FeatureSequence) -> &Array2<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("feature widths agree")
        };
        FeatureSequence {
            y1: cat(|p| &p.y1),
            y2: cat(|p| &p.y2),
            y3: cat(|p| &p.y3),
        }
    }
}

/// Training targets for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSequence {
    /// `T x 257`, each entry in `[0, 1]`.
    pub irm: Array2<f64>,
    /// Clean-speech RI spectrum, `T x 514`, unnormalized.
    pub ri_clean: Array2<f64>,
}

impl TargetSequence {
    pub fn concat(parts: &[&TargetSequence]) -> TargetSequence {
        let irm: Vec<_> = parts.iter().map(|p| p.irm.view()).collect();
        let ri: Vec<_> = parts.iter().map(|p| p.ri_clean.view()).collect();
        TargetSequence {
            irm: ndarray::concatenate(Axis(0), &irm).expect("irm widths agree"),
            ri_clean: ndarray::concatenate(Axis(0), &ri).expect("ri widths agree"),
        }
    }
}

/// `y1[k] = ln(max(|Y(k)|^2, 1e-12))`.
pub fn compute_lps(frame: &[Complex64]) -> Vec<f64> {
    frame
        .iter()
        .map(|c| c.norm_sqr().max(LPS_FLOOR).ln())
        .collect()
}

/// Real parts followed by imaginary parts.
pub fn compute_ri(frame: &[Complex64]) -> Vec<f64> {
    frame
        .iter()
        .map(|c| c.re)
        .chain(frame.iter().map(|c| c.im))
        .collect()
}

/// Inverse of [`compute_ri`].
pub fn ri_to_complex(ri: &[f64]) -> Vec<Complex64> {
    let half = ri.len() / 2;
    (0..half)
        .map(|k| Complex64::new(ri[k], ri[half + k]))
        .collect()
}

/// `irm[k] = |S(k)| / sqrt(|S(k)|^2 + |N(k)|^2)`, with `0/0 -> 0`.
pub fn compute_irm(clean: &[Complex64], noise: &[Complex64]) -> Vec<f64> {
    compute_irm_with_exponent(clean, noise, IRM_EXPONENT)
}

/// `irm[k] = (|S|^2 / (|S|^2 + |N|^2))^exponent`.
pub fn compute_irm_with_exponent(
    clean: &[Complex64],
    noise: &[Complex64],
    exponent: f64,
) -> Vec<f64> {
    clean
        .iter()
        .zip(noise)
        .map(|(s, n)| {
            let ps = s.norm_sqr();
            let total = ps + n.norm_sqr();
            if total == 0.0 {
                0.0
            } else {
                (ps / total).powf(exponent).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Raw (unnormalized) features of a noisy utterance plus its STFT.
pub fn extract_features(
    noisy: &Waveform,
    spec: &FrameSpec,
) -> Result<(FeatureSequence, ComplexSpectrogram)> {
    let stft = dsp::stft(noisy, spec)?;
    let frames = stft.num_frames();
    let bins = stft.num_bins();
    let mut y1 = Array2::zeros((frames, bins));
    let mut y2 = Array2::zeros((frames, spec.frame_len()));
    let mut y3 = Array2::zeros((frames, 2 * bins));
    for t in 0..frames {
        let row = stft.frames.row(t).to_vec();
        y1.row_mut(t).assign(&ArrayView1::from(&compute_lps(&row)));
        y2.row_mut(t)
            .assign(&ArrayView1::from(&dsp::windowed_frame(&noisy.samples, spec, t)));
        y3.row_mut(t).assign(&ArrayView1::from(&compute_ri(&row)));
    }
    Ok((FeatureSequence { y1, y2, y3 }, stft))
}

/// IRM and clean-RI targets from the aligned clean / scaled-noise pair.
pub fn compute_targets(
    clean: &Waveform,
    noise: &Waveform,
    spec: &FrameSpec,
    irm_exponent: f64,
) -> Result<TargetSequence> {
    if clean.len() != noise.len() {
        return Err(Error::invalid(format!(
            "clean has {} samples, noise has {}",
            clean.len(),
            noise.len()
        )));
    }
    let s = dsp::stft(clean, spec)?;
    let n = dsp::stft(noise, spec)?;
    let frames = s.num_frames();
    let bins = s.num_bins();
    let mut irm = Array2::zeros((frames, bins));
    let mut ri_clean = Array2::zeros((frames, 2 * bins));
    for t in 0..frames {
        let srow = s.frames.row(t).to_vec();
        let nrow = n.frames.row(t).to_vec();
        irm.row_mut(t).assign(&ArrayView1::from(&compute_irm_with_exponent(
            &srow,
            &nrow,
            irm_exponent,
        )));
        ri_clean
            .row_mut(t)
            .assign(&ArrayView1::from(&compute_ri(&srow)));
    }
    Ok(TargetSequence { irm, ri_clean })
}

/// Mean and standard deviation of one feature stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl StreamStats {
    fn fit(parts: &[&Array2<f64>], frames: usize) -> StreamStats {
        let dim = parts[0].ncols();
        let mut mean = Array1::<f64>::zeros(dim);
        for p in parts {
            for row in p.rows() {
                mean += &row;
            }
        }
        mean /= frames as f64;
        let mut var = Array1::<f64>::zeros(dim);
        for p in parts {
            for row in p.rows() {
                let d = &row - &mean;
                var += &(&d * &d);
            }
        }
        var /= frames as f64;
        let std = var.mapv(|v| v.sqrt().max(STD_FLOOR));
        StreamStats { mean, std }
    }

    fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::invalid(format!(
                "feature has {} dims, normalizer has {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        Ok((x - &self.mean) / &self.std)
    }

    fn apply_frame(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::invalid(format!(
                "feature has {} dims, normalizer has {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    fn to_f32_precision(&self) -> StreamStats {
        StreamStats {
            mean: self.mean.mapv(|v| v as f32 as f64),
            std: self.std.mapv(|v| (v as f32 as f64).max(STD_FLOOR)),
        }
    }
}

/// Per-dimension z-scoring statistics for the three input streams, fitted
/// on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerStats {
    pub y1: StreamStats,
    pub y2: StreamStats,
    pub y3: StreamStats,
    pub frame_count: usize,
}

/// Two-pass mean/variance over every frame of the given utterances.
pub fn fit_normalizer(corpus: &[&FeatureSequence]) -> Result<NormalizerStats> {
    let frames: usize = corpus.iter().map(|s| s.num_frames()).sum();
    if frames < 2 {
        return Err(Error::invalid(format!(
            "normalizer needs at least 2 frames, got {frames}"
        )));
    }
    let y1: Vec<_> = corpus.iter().map(|s| &s.y1).collect();
    let y2: Vec<_> = corpus.iter().map(|s| &s.y2).collect();
    let y3: Vec<_> = corpus.iter().map(|s| &s.y3).collect();
    Ok(NormalizerStats {
        y1: StreamStats::fit(&y1, frames),
        y2: StreamStats::fit(&y2, frames),
        y3: StreamStats::fit(&y3, frames),
        frame_count: frames,
    })
}

pub fn apply_normalizer(t: &FeatureTriplet, s: &NormalizerStats) -> Result<FeatureTriplet> {
    Ok(FeatureTriplet {
        y1: s.y1.apply_frame(&t.y1)?,
        y2: s.y2.apply_frame(&t.y2)?,
        y3: s.y3.apply_frame(&t.y3)?,
    })
}

impl NormalizerStats {
    pub fn dims(&self) -> [usize; 3] {
        [self.y1.mean.len(), self.y2.mean.len(), self.y3.mean.len()]
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        Ok(FeatureSequence {
            y1: self.y1.apply(&seq.y1)?,
            y2: self.y2.apply(&seq.y2)?,
            y3: self.y3.apply(&seq.y3)?,
        })
    }

    /// The statistics as they read back after a save/load cycle.
    pub fn to_f32_precision(&self) -> NormalizerStats {
        NormalizerStats {
            y1: self.y1.to_f32_precision(),
            y2: self.y2.to_f32_precision(),
            y3: self.y3.to_f32_precision(),
            frame_count: self.frame_count,
        }
    }

    /// Writes the normalizer file: 8-byte magic, `u64` LE header length,
    /// JSON header, then `f32` LE arrays in the order mean/std of y1, y2, y3.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = NormalizerHeader {
            format: NORMALIZER_FORMAT.to_string(),
            dims: self.dims().to_vec(),
            frame_count: self.frame_count,
            dtype: "f32le".to_string(),
            arrays: ["y1.mean", "y1.std", "y2.mean", "y2.std", "y3.mean", "y3.std"]
                .map(String::from)
                .to_vec(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(16 + json.len() + 4 * 2 * 1283);
        bytes.extend_from_slice(NORMALIZER_MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for stream in [&self.y1, &self.y2, &self.y3] {
            for arr in [&stream.mean, &stream.std] {
                for v in arr {
                    bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NormalizerStats> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != NORMALIZER_MAGIC {
            return Err(bad("not a normalizer file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: NormalizerHeader = serde_json::from_slice(&bytes[16..header_end])?;
        if header.dims.len() != 3 || header.dtype != "f32le" {
            return Err(bad("unexpected header layout"));
        }
        let total: usize = header.dims.iter().map(|d| 2 * d).sum();
        if bytes.len() != header_end + 4 * total {
            return Err(bad("payload size does not match header dims"));
        }
        let mut values = bytes[header_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut take = |n: usize| Array1::from_iter((&mut values).take(n));
        let mut stream = |n: usize| StreamStats {
            mean: take(n),
            std: take(n).mapv(|v| v.max(STD_FLOOR)),
        };
        Ok(NormalizerStats {
            y1: stream(header.dims[0]),
            y2: stream(header.dims[1]),
            y3: stream(header.dims[2]),
            frame_count: header.frame_count,
        })
    }
}

const NORMALIZER_MAGIC: &[u8; 8] = b"PDCNNRM1";
const NORMALIZER_FORMAT: &str = "phasedcn-normalizer/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalizerHeader {
    format: String,
    dims: Vec<usize>,
    frame_count: usize,
    dtype: String,
    arrays: Vec<String>,
}
