//! RIFF/WAVE reading (PCM-16 or 32-bit float, first channel) and writing
//! (32-bit float mono).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => {
            Error::Unsupported(format!("{}: unsupported WAV codec", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    // Once the file is open, a failed read means the RIFF data is cut short.
    let truncated = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Format(format!("{}: truncated file ({io})", path.display())),
        other => map_hound(path, other),
    };
    let reader = WavReader::new(std::io::BufReader::new(file)).map_err(truncated)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(truncated)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(truncated)?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{}: {bits}-bit {fmt:?} samples (PCM-16 and float-32 only)",
                path.display()
            )))
        }
    };
    let samples = interleaved.into_iter().step_by(channels).collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 32-bit float mono.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = w.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("sample {i} of {}", path.display())));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for s in &w.samples {
        writer
            .write_sample(*s as f32)
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}
