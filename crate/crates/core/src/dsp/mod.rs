//! Framing, windowing, STFT/iSTFT with weighted overlap-add, and WAV I/O.
//!
//! All signal processing runs in 64-bit floats. Frames are never padded:
//! a signal of `L` samples yields `floor((L - frame_len) / hop) + 1` frames.

pub mod wav;

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub use wav::{load_wav, save_wav};

/// Pipeline sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis frame length in samples (32 ms at 16 kHz).
pub const FRAME_LEN: usize = 512;
/// Hop size in samples (16 ms at 16 kHz).
pub const HOP: usize = 256;
/// Retained real-FFT bins for a 512-point frame.
pub const BINS: usize = FRAME_LEN / 2 + 1;

/// Mono sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Rejects anything that is not at the pipeline rate.
    pub fn require_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "sample rate {} Hz, expected {SAMPLE_RATE} Hz (resampling is not supported)",
                self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Frame length, hop and analysis/synthesis window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpec {
    frame_len: usize,
    hop: usize,
    window: Vec<f64>,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            frame_len: FRAME_LEN,
            hop: HOP,
            window: hamming_window(FRAME_LEN).expect("frame length is valid"),
        }
    }
}

impl FrameSpec {
    pub fn new(frame_len: usize, hop: usize, window: Vec<f64>) -> Result<Self> {
        if !frame_len.is_power_of_two() || frame_len < 2 {
            return Err(Error::invalid(format!(
                "frame length {frame_len} is not a power of two"
            )));
        }
        if frame_len != 2 * hop {
            return Err(Error::invalid(format!(
                "frame length {frame_len} must be twice the hop {hop}"
            )));
        }
        if window.len() != frame_len {
            return Err(Error::invalid(format!(
                "window has {} taps, frame length is {frame_len}",
                window.len()
            )));
        }
        if window.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("window values must lie in [0, 1]"));
        }
        Ok(Self {
            frame_len,
            hop,
            window,
        })
    }

    /// Same framing with a rectangular window.
    pub fn rectangular(frame_len: usize) -> Result<Self> {
        Self::new(frame_len, frame_len / 2, vec![1.0; frame_len])
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Number of whole frames in a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// Length of the overlap-added signal for `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }
}

/// Complex STFT, `T x bins`, row `t` is frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: Array2<Complex64>,
    pub frame_spec: FrameSpec,
}

impl ComplexSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }
}

/// Periodic Hamming window, `w[i] = 0.54 - 0.46 cos(2 pi i / n)`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("window length {n} < 2")));
    }
    Ok((0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect())
}

/// Windowed frame `t` of `x` (the time-domain feature uses the same framing).
pub fn windowed_frame(x: &[f64], spec: &FrameSpec, t: usize) -> Vec<f64> {
    let start = t * spec.hop;
    x[start..start + spec.frame_len]
        .iter()
        .zip(&spec.window)
        .map(|(s, w)| s * w)
        .collect()
}

pub fn stft(x: &Waveform, spec: &FrameSpec) -> Result<ComplexSpectrogram> {
    let n = spec.frame_len;
    if x.len() < n {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one {n}-sample frame",
            x.len()
        )));
    }
    let frames = spec.frame_count(x.len());
    let bins = spec.bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Array2::<Complex64>::zeros((frames, bins));
    for t in 0..frames {
        let start = t * spec.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(x.samples[start + i] * spec.window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[[t, k]] = buf[k];
        }
    }
    Ok(ComplexSpectrogram {
        frames: out,
        frame_spec: spec.clone(),
    })
}

/// Inverse STFT by weighted overlap-add: each inverse frame is windowed,
/// summed, and the sum is divided by the overlap-added squared window.
pub fn istft(s: &ComplexSpectrogram, spec: &FrameSpec) -> Result<Waveform> {
    let n = spec.frame_len;
    let bins = spec.bins();
    if s.num_bins() != bins {
        return Err(Error::invalid(format!(
            "spectrogram has {} bins, frame spec expects {bins}",
            s.num_bins()
        )));
    }
    let frames = s.num_frames();
    let len = spec.signal_len(frames);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![0.0; len];
    let mut envelope = vec![0.0; len];
    let scale = 1.0 / n as f64;
    for t in 0..frames {
        let row = s.frames.row(t);
        buf[0] = Complex64::new(row[0].re, 0.0);
        buf[n / 2] = Complex64::new(row[n / 2].re, 0.0);
        for k in 1..n / 2 {
            buf[k] = row[k];
            buf[n - k] = row[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * spec.hop;
        for i in 0..n {
            let w = spec.window[i];
            out[start + i] += buf[i].re * scale * w;
            envelope[start + i] += w * w;
        }
    }
    for (i, (sample, env)) in out.iter_mut().zip(&envelope).enumerate() {
        if *env <= f64::EPSILON {
            return Err(Error::Internal(format!(
                "zero synthesis window envelope at sample {i}"
            )));
        }
        *sample /= env;
    }
    Waveform::new(out, SAMPLE_RATE)
}
