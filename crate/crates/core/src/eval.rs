//! Objective metrics and the corpus evaluation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{MixtureRecord, Split};
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::NormalizerStats;
use crate::model::Model;
use crate::reconstruct::{enhance_utterance, ReconstructionMode};

/// Magnitude cap for SI-SDR, reached when the residual vanishes.
pub const SI_SDR_CAP_DB: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_len(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "reference has {} samples, estimate {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Scale-invariant SDR in dB, clamped to `[-100, 100]`.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    same_len(reference, estimate)?;
    let s = &reference.samples;
    let e = &estimate.samples;
    let ss = dot(s, s);
    if ss == 0.0 {
        return Err(Error::invalid("SI-SDR of a silent reference"));
    }
    let alpha = dot(e, s) / ss;
    let target = alpha * alpha * ss;
    let residual: f64 = s
        .iter()
        .zip(e)
        .map(|(s, e)| (e - alpha * s).powi(2))
        .sum();
    let db = if residual == 0.0 {
        SI_SDR_CAP_DB
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

pub const SEG_SNR_FLOOR_DB: f64 = -10.0;
pub const SEG_SNR_CEIL_DB: f64 = 35.0;

/// Mean of per-frame `10 log10(|s|^2 / |s - e|^2)`, each clamped to
/// `[-10, 35]`, over frames whose reference energy is within 60 dB of the
/// loudest frame.
pub fn segmental_snr(
    reference: &Waveform,
    estimate: &Waveform,
    frame: usize,
    hop: usize,
) -> Result<f64> {
    same_len(reference, estimate)?;
    if frame == 0 || hop == 0 {
        return Err(Error::invalid("segmental SNR frame and hop must be positive"));
    }
    let s = &reference.samples;
    let e = &estimate.samples;
    let starts: Vec<usize> = if s.len() < frame {
        Vec::new()
    } else {
        (0..=(s.len() - frame) / hop).map(|t| t * hop).collect()
    };
    let stats: Vec<(f64, f64)> = starts
        .iter()
        .map(|&a| {
            let r = &s[a..a + frame];
            let x = &e[a..a + frame];
            let sig = dot(r, r);
            let err: f64 = r.iter().zip(x).map(|(r, x)| (r - x).powi(2)).sum();
            (sig, err)
        })
        .collect();
    let peak = stats.iter().fold(0.0f64, |m, (sig, _)| m.max(*sig));
    let threshold = peak * 1e-6;
    let active: Vec<f64> = stats
        .iter()
        .filter(|(sig, _)| peak > 0.0 && *sig > threshold)
        .map(|&(sig, err)| {
            let db = if err == 0.0 {
                SEG_SNR_CEIL_DB
            } else {
                10.0 * (sig / err).log10()
            };
            db.clamp(SEG_SNR_FLOOR_DB, SEG_SNR_CEIL_DB)
        })
        .collect();
    if active.is_empty() {
        return Err(Error::invalid("segmental SNR: no active reference frames"));
    }
    Ok(active.iter().sum::<f64>() / active.len() as f64)
}

/// STOI parameters from its published definition.
pub mod stoi_params {
    pub const FS: u32 = 10_000;
    pub const FRAME: usize = 256;
    pub const NFFT: usize = 512;
    pub const BANDS: usize = 15;
    pub const MIN_FREQ: f64 = 150.0;
    /// Frames per intermediate-intelligibility segment (384 ms).
    pub const SEGMENT: usize = 30;
    pub const BETA_DB: f64 = -15.0;
    pub const DYN_RANGE_DB: f64 = 40.0;
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Rational resampling by `up / down` with a Kaiser-windowed sinc
/// low-pass (beta 5, half-length `10 max(up, down)` taps at the upsampled
/// rate), aligned so output sample `m` sits at input time `m down / up`.
pub fn resample_poly(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    if up == down {
        return x.to_vec();
    }
    let max = up.max(down);
    let half = 10 * max;
    let cutoff = 1.0 / max as f64;
    let beta = 5.0;
    let norm = bessel_i0(beta);
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let n = i as f64 - half as f64;
            let sinc = if n == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * cutoff * n;
                a.sin() / a
            };
            let r = n / half as f64;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm;
            cutoff * sinc * w * up as f64
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|m| {
            // Position in the zero-stuffed signal.
            let c = (m * down) as isize;
            let mut acc = 0.0;
            for (i, h) in taps.iter().enumerate() {
                let p = c + half as isize - i as isize;
                if p >= 0 && p % up as isize == 0 {
                    if let Some(v) = x.get((p / up as isize) as usize) {
                        acc += h * v;
                    }
                }
            }
            acc
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `hanning(n + 2)[1..n + 1]`: a Hann window without its zero end points.
fn inner_hann(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Drops frames of `x` more than `range_db` below its loudest frame, from
/// both signals, and overlap-adds what is left.
fn remove_silent_frames(x: &[f64], y: &[f64], range_db: f64, n: usize, hop: usize) -> (Vec<f64>, Vec<f64>) {
    let w = inner_hann(n);
    if x.len() < n {
        return (Vec::new(), Vec::new());
    }
    let starts: Vec<usize> = (0..=(x.len() - n) / hop).map(|t| t * hop).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&a| {
            let e: f64 = (0..n).map(|i| (w[i] * x[a + i]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, e)| **e > max - range_db)
        .map(|(a, _)| *a)
        .collect();
    let len = if keep.is_empty() {
        0
    } else {
        (keep.len() - 1) * hop + n
    };
    let mut xs = vec![0.0; len];
    let mut ys = vec![0.0; len];
    for (j, &a) in keep.iter().enumerate() {
        for i in 0..n {
            xs[j * hop + i] += w[i] * x[a + i];
            ys[j * hop + i] += w[i] * y[a + i];
        }
    }
    (xs, ys)
}

/// One-third-octave band energies, `bands x frames`.
fn third_octave_bands(x: &[f64]) -> Vec<Vec<f64>> {
    use stoi_params::*;
    let w = inner_hann(FRAME);
    let hop = FRAME / 2;
    let frames = if x.len() < FRAME {
        0
    } else {
        (x.len() - FRAME) / hop + 1
    };
    let bins = NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * FS as f64 / NFFT as f64).collect();
    let nearest = |f: f64| {
        (0..bins)
            .min_by(|&a, &b| {
                (freqs[a] - f)
                    .abs()
                    .partial_cmp(&(freqs[b] - f).abs())
                    .unwrap()
            })
            .unwrap()
    };
    let edges: Vec<(usize, usize)> = (0..BANDS)
        .map(|k| {
            let lo = MIN_FREQ * 2f64.powf((2 * k) as f64 / 6.0 - 1.0 / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2 * k) as f64 / 6.0 + 1.0 / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let mut out = vec![vec![0.0; frames]; BANDS];
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for i in 0..FRAME {
            buf[i] = Complex64::new(w[i] * x[t * hop + i], 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in edges.iter().enumerate() {
            let e: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            out[b][t] = e.sqrt();
        }
    }
    out
}

/// Short-time objective intelligibility of `processed` against `clean`,
/// both at 16 kHz. Clamped to `[0, 1]`.
pub fn stoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    use stoi_params::*;
    same_len(clean, processed)?;
    clean.require_pipeline_rate()?;
    let up = FS as usize;
    let down = SAMPLE_RATE as usize;
    let x = resample_poly(&clean.samples, up, down);
    let y = resample_poly(&processed.samples, up, down);
    let (x, y) = remove_silent_frames(&x, &y, DYN_RANGE_DB, FRAME, FRAME / 2);
    let xb = third_octave_bands(&x);
    let yb = third_octave_bands(&y);
    let frames = xb[0].len();
    if frames < SEGMENT {
        return Err(Error::invalid(format!(
            "STOI needs at least {SEGMENT} active frames (~{} ms of speech), got {frames}",
            (SEGMENT * FRAME / 2) as u32 * 1000 / FS
        )));
    }
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let mut total = 0.0;
    let segments = frames - SEGMENT + 1;
    for m in SEGMENT..=frames {
        for b in 0..BANDS {
            let xs = &xb[b][m - SEGMENT..m];
            let ys = &yb[b][m - SEGMENT..m];
            let scale = dot(xs, xs).sqrt() / (dot(ys, ys).sqrt() + eps);
            let yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(y, x)| (y * scale).min(x * (1.0 + clip)))
                .collect();
            let centre = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let c: Vec<f64> = v.iter().map(|a| a - mean).collect();
                let n = dot(&c, &c).sqrt() + eps;
                c.into_iter().map(|a| a / n).collect::<Vec<f64>>()
            };
            total += dot(&centre(xs), &centre(&yp));
        }
    }
    Ok((total / (BANDS * segments) as f64).clamp(0.0, 1.0))
}

/// Anything that turns a noisy waveform into an enhanced one.
pub trait Enhancer: Sync {
    fn enhance(&self, noisy: &Waveform, mode: ReconstructionMode) -> Result<Waveform>;
}

/// Returns its input unchanged; the unprocessed baseline.
pub struct Identity;

impl Enhancer for Identity {
    fn enhance(&self, noisy: &Waveform, _: ReconstructionMode) -> Result<Waveform> {
        Ok(noisy.clone())
    }
}

pub struct ModelEnhancer<'a> {
    pub model: &'a Model,
    pub normalizer: &'a NormalizerStats,
}

impl Enhancer for ModelEnhancer<'_> {
    fn enhance(&self, noisy: &Waveform, mode: ReconstructionMode) -> Result<Waveform> {
        enhance_utterance(noisy, self.model, self.normalizer, mode)
    }
}

/// Metrics of one signal against its clean reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub si_sdr: Option<f64>,
    pub seg_snr: Option<f64>,
    pub stoi: Option<f64>,
}

impl Metrics {
    pub fn measure(clean: &Waveform, estimate: &Waveform) -> Result<Self> {
        same_len(clean, estimate)?;
        Ok(Self {
            si_sdr: si_sdr(clean, estimate).ok(),
            seg_snr: segmental_snr(clean, estimate, 512, 256).ok(),
            stoi: stoi(clean, estimate).ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub mode: ReconstructionMode,
    pub snr_db: f64,
    pub noise_id: String,
    pub split: Split,
    pub enhanced: Metrics,
    pub noisy: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mode: ReconstructionMode,
    pub snr_db: f64,
    pub split: Split,
    pub count: usize,
    pub si_sdr: Option<f64>,
    pub seg_snr: Option<f64>,
    pub stoi: Option<f64>,
    pub noisy_si_sdr: Option<f64>,
    pub noisy_seg_snr: Option<f64>,
    pub noisy_stoi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceResult>,
    pub groups: Vec<GroupSummary>,
    /// `(record id, error)` for every mixture that could not be evaluated.
    pub failures: Vec<(String, String)>,
}

/// Mean of the finite values, if any.
pub fn finite_mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values
        .into_iter()
        .flatten()
        .filter(|v| v.is_finite())
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn evaluate_one(
    enhancer: &dyn Enhancer,
    record: &MixtureRecord,
    root: &Path,
    mode: ReconstructionMode,
) -> Result<UtteranceResult> {
    let mix = record.realize(root)?;
    let out = enhancer.enhance(&mix.noisy, mode)?;
    // Enhanced output may be shorter (whole frames only).
    let n = out.len().min(mix.clean.len());
    let cut = |w: &Waveform| Waveform::new(w.samples[..n].to_vec(), w.sample_rate);
    let clean = cut(&mix.clean)?;
    Ok(UtteranceResult {
        id: record.id.clone(),
        mode,
        snr_db: record.snr_db,
        noise_id: record.noise_id.clone(),
        split: record.split,
        enhanced: Metrics::measure(&clean, &cut(&out)?)?,
        noisy: Metrics::measure(&clean, &cut(&mix.noisy)?)?,
    })
}

/// Enhances every test mixture in every mode and summarises by
/// `(mode, snr, split)`. Failing mixtures are listed, not fatal.
pub fn evaluate_corpus(
    enhancer: &dyn Enhancer,
    records: &[MixtureRecord],
    root: &Path,
    modes: &[ReconstructionMode],
) -> Result<MetricReport> {
    let tests: Vec<&MixtureRecord> = records.iter().filter(|r| r.split.is_test()).collect();
    if tests.is_empty() || modes.is_empty() {
        return Err(Error::invalid("nothing to evaluate: no test mixtures or no modes"));
    }
    let jobs: Vec<(&MixtureRecord, ReconstructionMode)> = modes
        .iter()
        .flat_map(|&m| tests.iter().map(move |r| (*r, m)))
        .collect();
    let results: Vec<(String, Result<UtteranceResult>)> = jobs
        .par_iter()
        .map(|(r, m)| (r.id.clone(), evaluate_one(enhancer, r, root, *m)))
        .collect();
    let mut utterances = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(u) => utterances.push(u),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    let mut grouped: BTreeMap<(ReconstructionMode, i64, Split), Vec<&UtteranceResult>> =
        BTreeMap::new();
    for u in &utterances {
        // SNR keys are compared at 1e-6 dB resolution.
        let key = (u.mode, (u.snr_db * 1e6).round() as i64, u.split);
        grouped.entry(key).or_default().push(u);
    }
    let groups = grouped
        .into_values()
        .map(|us| {
            let mean = |f: &dyn Fn(&UtteranceResult) -> Option<f64>| {
                finite_mean(us.iter().map(|u| f(u)))
            };
            GroupSummary {
                mode: us[0].mode,
                snr_db: us[0].snr_db,
                split: us[0].split,
                count: us.len(),
                si_sdr: mean(&|u| u.enhanced.si_sdr),
                seg_snr: mean(&|u| u.enhanced.seg_snr),
                stoi: mean(&|u| u.enhanced.stoi),
                noisy_si_sdr: mean(&|u| u.noisy.si_sdr),
                noisy_seg_snr: mean(&|u| u.noisy.seg_snr),
                noisy_stoi: mean(&|u| u.noisy.stoi),
            }
        })
        .collect();
    Ok(MetricReport {
        utterances,
        groups,
        failures,
    })
}

impl MetricReport {
    /// Aligned-column summary, one row per group.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let header = [
            "mode", "split", "snr", "n", "si-sdr", "seg-snr", "stoi", "in-si-sdr", "in-seg-snr",
            "in-stoi",
        ];
        let rows: Vec<Vec<String>> = self
            .groups
            .iter()
            .map(|g| {
                vec![
                    g.mode.to_string(),
                    g.split.as_str().to_string(),
                    format!("{:.1}", g.snr_db),
                    g.count.to_string(),
                    fmt(g.si_sdr),
                    fmt(g.seg_snr),
                    fmt(g.stoi),
                    fmt(g.noisy_si_sdr),
                    fmt(g.noisy_seg_snr),
                    fmt(g.noisy_stoi),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                rows.iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i < 2 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        for r in &rows {
            line(r.iter().map(String::as_str).collect(), &mut out);
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out, "{} mixture(s) failed:", self.failures.len());
            for (id, e) in &self.failures {
                let _ = writeln!(out, "  {id}: {e}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, SAMPLE_RATE).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn si_sdr_examples() {
        let s = wave(noise(4000, 1));
        assert_eq!(si_sdr(&s, &s).unwrap(), 100.0);
        let twice = wave(s.samples.iter().map(|v| 2.0 * v).collect());
        assert_eq!(si_sdr(&s, &twice).unwrap(), 100.0);
        // Orthogonalise a random vector against s, scale to |s|^2 / 100.
        let r = noise(4000, 2);
        let a = dot(&r, &s.samples) / dot(&s.samples, &s.samples);
        let mut e: Vec<f64> = r.iter().zip(&s.samples).map(|(r, s)| r - a * s).collect();
        let k = (dot(&s.samples, &s.samples) / 100.0 / dot(&e, &e)).sqrt();
        e.iter_mut().for_each(|v| *v *= k);
        let est = wave(s.samples.iter().zip(&e).map(|(s, e)| s + e).collect());
        assert!((si_sdr(&s, &est).unwrap() - 20.0).abs() < 1e-9);
        assert!(si_sdr(&wave(vec![0.0; 10]), &wave(vec![1.0; 10])).is_err());
        assert!(si_sdr(&s, &wave(vec![0.0; 3])).is_err());
    }

    #[test]
    fn si_sdr_scale_invariant() {
        let s = wave(noise(3000, 3));
        let e = wave(noise(3000, 4).iter().zip(&s.samples).map(|(n, s)| s + 0.3 * n).collect());
        let base = si_sdr(&s, &e).unwrap();
        for k in [0.01, 0.5, 3.0, 1e4] {
            let scaled = wave(e.samples.iter().map(|v| k * v).collect());
            assert!((si_sdr(&s, &scaled).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn seg_snr_clamps_and_matches_loop() {
        let s = wave(noise(5000, 5));
        assert_eq!(segmental_snr(&s, &s, 512, 256).unwrap(), 35.0);
        // A zero estimate has error equal to the signal: 0 dB per frame.
        assert_eq!(segmental_snr(&s, &wave(vec![0.0; 5000]), 512, 256).unwrap(), 0.0);
        let inverted = wave(s.samples.iter().map(|v| -3.0 * v).collect());
        assert_eq!(segmental_snr(&s, &inverted, 512, 256).unwrap(), -10.0);

        let mut ref_samples = noise(6000, 6);
        ref_samples[..1500].iter_mut().for_each(|v| *v *= 1e-5);
        let r = wave(ref_samples);
        let e = wave(noise(6000, 7).iter().zip(&r.samples).map(|(n, s)| s + 0.2 * n).collect());
        let got = segmental_snr(&r, &e, 512, 256).unwrap();
        let mut energies = Vec::new();
        let mut t = 0;
        while t + 512 <= 6000 {
            let mut sig = 0.0;
            let mut err = 0.0;
            for i in t..t + 512 {
                sig += r.samples[i] * r.samples[i];
                err += (r.samples[i] - e.samples[i]).powi(2);
            }
            energies.push((sig, err));
            t += 256;
        }
        let peak = energies.iter().map(|x| x.0).fold(0.0, f64::max);
        let mut sum = 0.0;
        let mut n = 0.0;
        for (sig, err) in energies {
            if 10.0 * (sig / peak).log10() > -60.0 {
                sum += (10.0 * (sig / err).log10()).clamp(-10.0, 35.0);
                n += 1.0;
            }
        }
        assert!((got - sum / n).abs() < 1e-9);
        assert!(segmental_snr(&wave(vec![0.0; 600]), &wave(vec![0.0; 600]), 512, 256).is_err());
    }

    #[test]
    fn resampler_passes_low_tones() {
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let y = resample_poly(&x, 10, 16);
        assert_eq!(y.len(), 10_000);
        for (m, v) in y.iter().enumerate().skip(200).take(9000) {
            let want = (2.0 * PI * 1000.0 * m as f64 / 10_000.0).sin();
            assert!((v - want).abs() < 1e-2, "{m}: {v} vs {want}");
        }
        let hi: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * PI * 7000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let y = resample_poly(&hi, 10, 16);
        let rms = (y[200..9800].iter().map(|v| v * v).sum::<f64>() / 9600.0).sqrt();
        assert!(rms < 0.01, "{rms}");
    }

    fn speechlike(secs: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        wave(crate::data::synth_speech(&mut rng, (secs * 16000.0) as usize))
    }

    #[test]
    fn stoi_self_is_one() {
        let x = speechlike(2.0, 1);
        assert!((stoi(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stoi_drops_for_noise_and_rejects_short_input() {
        let x = speechlike(2.0, 2);
        let n = wave(noise(x.len(), 3));
        let v = stoi(&x, &n).unwrap();
        let mut prev = v;
        for snr in [-5.0, 0.0, 5.0, 10.0, 20.0] {
            let m = crate::data::mix_at_snr(&x, &n, snr).unwrap();
            let s = stoi(&x, &m.noisy).unwrap();
            assert!(s > prev, "{snr}: {s} <= {prev}");
            prev = s;
        }
        assert!(v < 0.45, "{v}");
        let short = speechlike(0.2, 4);
        assert!(stoi(&short, &short).is_err());
    }

    #[test]
    fn means_skip_missing_values() {
        assert_eq!(finite_mean([Some(1.0), None, Some(3.0), Some(f64::NAN)]), Some(2.0));
        assert_eq!(finite_mean([None]), None);
    }
}
