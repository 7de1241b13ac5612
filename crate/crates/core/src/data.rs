//! Corpus handling: noise-file splits, SNR-controlled mixing, a synthetic
//! speech/noise corpus, mixture manifests and whole-utterance batching.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{load_wav, save_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestSeen => "test-seen",
            Split::TestUnseen => "test-unseen",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(self, Split::TestSeen | Split::TestUnseen)
    }
}

/// Train / validation / test sample regions of one noise file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NoiseRegions {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl NoiseRegions {
    pub fn for_split(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::TestSeen | Split::TestUnseen => self.test.clone(),
        }
    }
}

/// Shortest noise file that still gives every region at least one sample.
pub const MIN_NOISE_SAMPLES: usize = 5;

/// First 60% for training, the next 20% for validation, the last 20% for
/// testing; boundaries rounded down.
pub fn split_noise_len(len: usize) -> Result<NoiseRegions> {
    if len < MIN_NOISE_SAMPLES {
        return Err(Error::invalid(format!(
            "noise of {len} samples is too short to split (need {MIN_NOISE_SAMPLES})"
        )));
    }
    let a = len * 3 / 5;
    let b = len * 4 / 5;
    Ok(NoiseRegions {
        train: 0..a,
        val: a..b,
        test: b..len,
    })
}

pub fn split_noise_file(noise: &Waveform) -> Result<NoiseRegions> {
    split_noise_len(noise.len())
}

/// `len` samples of `noise` starting at `offset`, wrapping around inside
/// `region` when the region is shorter than requested.
pub fn noise_segment(
    noise: &Waveform,
    region: Range<usize>,
    offset: usize,
    len: usize,
) -> Result<Waveform> {
    if region.is_empty() || region.end > noise.len() || !region.contains(&offset) {
        return Err(Error::invalid(format!(
            "offset {offset} outside noise region {region:?} of a {}-sample file",
            noise.len()
        )));
    }
    let width = region.end - region.start;
    let samples = (0..len)
        .map(|i| noise.samples[region.start + (offset - region.start + i) % width])
        .collect();
    Waveform::new(samples, noise.sample_rate)
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Mixed signal and the scaled noise it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub clean: Waveform,
    pub noise: Waveform,
    pub noisy: Waveform,
}

/// Scales `noise` so that `10 log10(P_clean / P_noise) = snr_db`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    if clean.len() != noise.len() {
        return Err(Error::invalid(format!(
            "clean has {} samples, noise segment {}",
            clean.len(),
            noise.len()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR {snr_db} dB")));
    }
    let pc = power(&clean.samples);
    let pn = power(&noise.samples);
    if pc == 0.0 || pn == 0.0 {
        return Err(Error::invalid("cannot mix a silent clean or noise signal"));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = noise.samples.iter().map(|v| g * v).collect();
    let noisy = clean.samples.iter().zip(&scaled).map(|(s, n)| s + n).collect();
    Ok(Mixture {
        clean: clean.clone(),
        noise: Waveform::new(scaled, noise.sample_rate)?,
        noisy: Waveform::new(noisy, clean.sample_rate)?,
    })
}

/// Synthetic corpus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_clean: usize,
    pub n_noise: usize,
    pub clean_secs: f64,
    pub noise_secs: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clean: 20,
            n_noise: 3,
            clean_secs: 2.0,
            noise_secs: 20.0,
        }
    }
}

/// Highest harmonic frequency the speech generator emits.
pub const SYNTH_MAX_HARMONIC_HZ: f64 = 3800.0;

/// A harmonic stack with a drifting f0 in 80-300 Hz, two formant-like
/// spectral bumps and a 2-8 Hz syllabic envelope.
pub fn synth_speech(rng: &mut impl Rng, samples: usize) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let f0 = rng.gen_range(80.0..300.0);
    let drift_rate = rng.gen_range(0.1..0.6);
    let drift_depth = rng.gen_range(0.02..0.05);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let syllable_rate = rng.gen_range(2.0..8.0);
    let syllable_phase = rng.gen_range(0.0..2.0 * PI);
    let f1 = rng.gen_range(300.0..900.0);
    let f2 = rng.gen_range(900.0..2500.0);
    let top = f0 * (1.0 + drift_depth);
    let harmonics: Vec<(f64, f64)> = (1..)
        .take_while(|h| *h as f64 * top < SYNTH_MAX_HARMONIC_HZ)
        .map(|h| {
            let f = h as f64 * f0;
            let gain = (-((f - f1) / 250.0).powi(2)).exp()
                + 0.6 * (-((f - f2) / 350.0).powi(2)).exp()
                + 0.05;
            (gain, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let mut phase = 0.0;
    let mut out: Vec<f64> = (0..samples)
        .map(|i| {
            let t = i as f64 / fs;
            let f = f0 * (1.0 + drift_depth * (2.0 * PI * drift_rate * t + drift_phase).sin());
            phase += 2.0 * PI * f / fs;
            let env = (0.5 - 0.5 * (2.0 * PI * syllable_rate * t + syllable_phase).cos()).powi(2);
            let voiced: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(h, (g, p))| g * ((h + 1) as f64 * phase + p).sin())
                .sum();
            env * voiced
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let level = rng.gen_range(0.3..0.6) / peak;
    out.iter_mut().for_each(|v| *v *= level);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    LowPass,
    Modulated,
}

impl NoiseKind {
    pub fn cycle(i: usize) -> Self {
        [NoiseKind::White, NoiseKind::LowPass, NoiseKind::Modulated][i % 3]
    }
}

pub fn synth_noise(rng: &mut impl Rng, kind: NoiseKind, samples: usize) -> Vec<f64> {
    let mut white: Vec<f64> = (0..samples).map(|_| StandardNormal.sample(rng)).collect();
    match kind {
        NoiseKind::White => {}
        NoiseKind::LowPass => {
            let a = rng.gen_range(0.85..0.95);
            let mut y = 0.0;
            for v in white.iter_mut() {
                y = a * y + (1.0 - a) * *v;
                *v = y;
            }
        }
        NoiseKind::Modulated => {
            let rate = rng.gen_range(0.5..4.0);
            let fs = SAMPLE_RATE as f64;
            for (i, v) in white.iter_mut().enumerate() {
                *v *= 1.0 + 0.9 * (2.0 * PI * rate * i as f64 / fs).sin();
            }
        }
    }
    let rms = power(&white).sqrt().max(1e-12);
    white.iter_mut().for_each(|v| *v *= 0.1 / rms);
    white
}

/// Writes `clean/clean_NNN.wav` and `noise/noise_NNN.wav` under `dir`.
/// Output bytes depend only on `(spec, seed)`.
pub fn synth_corpus(dir: &Path, spec: &SynthSpec, seed: u64) -> Result<Vec<PathBuf>> {
    let fs = SAMPLE_RATE as f64;
    let clean_len = (spec.clean_secs * fs).round() as usize;
    let noise_len = (spec.noise_secs * fs).round() as usize;
    if spec.n_clean == 0 || spec.n_noise == 0 || clean_len == 0 || noise_len == 0 {
        return Err(Error::invalid(format!("empty synthetic corpus spec {spec:?}")));
    }
    let mut written = Vec::new();
    for (sub, count) in [("clean", spec.n_clean), ("noise", spec.n_noise)] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for i in 0..count {
            // Independent streams per file keep each file stable when the
            // other count changes.
            let stream = if sub == "clean" { 0 } else { 1 << 32 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream + i as u64);
            let samples = if sub == "clean" {
                synth_speech(&mut rng, clean_len)
            } else {
                synth_noise(&mut rng, NoiseKind::cycle(i), noise_len)
            };
            let path = d.join(format!("{sub}_{i:03}.wav"));
            save_wav(&path, &Waveform::new(samples, SAMPLE_RATE)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One file of a corpus, with its path relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFile {
    pub id: String,
    pub path: String,
    pub samples: usize,
}

/// WAV files of `root/sub`, sorted by name.
pub fn list_corpus(root: &Path, sub: &str) -> Result<Vec<CorpusFile>> {
    let d = root.join(sub);
    let mut names: Vec<String> = fs::read_dir(&d)
        .map_err(|e| Error::io(&d, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let w = load_wav(d.join(&n))?;
            Ok(CorpusFile {
                id: n.trim_end_matches(".wav").to_string(),
                path: format!("{sub}/{n}"),
                samples: w.len(),
            })
        })
        .collect()
}

/// One noisy mixture, regenerated on demand from its sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecord {
    pub id: String,
    pub clean_id: String,
    pub clean: String,
    pub noise_id: String,
    pub noise: String,
    pub snr_db: f64,
    pub noise_offset: usize,
    pub split: Split,
    pub seed: u64,
}

impl MixtureRecord {
    /// Loads both sources (paths relative to `root`) and mixes them.
    pub fn realize(&self, root: &Path) -> Result<Mixture> {
        let clean = load_wav(root.join(&self.clean))?;
        let noise = load_wav(root.join(&self.noise))?;
        clean.require_pipeline_rate()?;
        noise.require_pipeline_rate()?;
        let region = split_noise_file(&noise)?.for_split(self.split);
        let seg = noise_segment(&noise, region, self.noise_offset, clean.len())?;
        mix_at_snr(&clean, &seg, self.snr_db)
    }
}

pub fn write_manifest(path: &Path, records: &[MixtureRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<MixtureRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MixtureRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        if !r.snr_db.is_finite() {
            return Err(Error::Format(format!(
                "{} line {}: non-finite SNR",
                path.display(),
                i + 1
            )));
        }
        records.push(r);
    }
    Ok(records)
}

/// How mixtures are drawn from a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixPlan {
    pub train_mixtures_per_clean: usize,
    pub snr_range: [f64; 2],
    pub test_snrs: Vec<f64>,
    /// The last this-many noise files never appear in training.
    pub unseen_noises: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for MixPlan {
    fn default() -> Self {
        Self {
            train_mixtures_per_clean: 2,
            snr_range: [-5.0, 15.0],
            test_snrs: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
            unseen_noises: 1,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl MixPlan {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::config(format!(
                "data.snr_range: [{lo}, {hi}] must be finite with low <= high"
            )));
        }
        if self.test_snrs.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("data.test_snrs: values must be finite"));
        }
        for (key, f) in [
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config(format!("data.{key}: {f} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Draws train, validation and test mixtures. Clean files are split by
/// index (test last, validation before it); test-unseen mixtures use only
/// held-out noise files.
pub fn plan_mixtures(
    clean: &[CorpusFile],
    noise: &[CorpusFile],
    plan: &MixPlan,
    seed: u64,
) -> Result<Vec<MixtureRecord>> {
    plan.validate()?;
    if clean.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 clean files for train/val/test, got {}",
            clean.len()
        )));
    }
    if noise.len() <= plan.unseen_noises {
        return Err(Error::invalid(format!(
            "{} noise files leave none for training after holding out {}",
            noise.len(),
            plan.unseen_noises
        )));
    }
    let n = clean.len();
    let n_test = ((n as f64 * plan.test_fraction).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * plan.val_fraction).round() as usize).clamp(1, n - 1 - n_test);
    let n_train = n - n_test - n_val;
    let seen = &noise[..noise.len() - plan.unseen_noises];
    let unseen = &noise[noise.len() - plan.unseen_noises..];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut push = |rng: &mut ChaCha8Rng,
                    c: &CorpusFile,
                    nz: &CorpusFile,
                    snr: f64,
                    split: Split|
     -> Result<()> {
        let region = split_noise_len(nz.samples)?.for_split(split);
        let seed = rng.gen::<u64>();
        let mut local = ChaCha8Rng::seed_from_u64(seed);
        let width = region.end - region.start;
        let offset = if width > c.samples {
            region.start + local.gen_range(0..=width - c.samples)
        } else {
            region.start
        };
        records.push(MixtureRecord {
            id: format!("{}-{:04}", split.as_str(), records.len()),
            clean_id: c.id.clone(),
            clean: c.path.clone(),
            noise_id: nz.id.clone(),
            noise: nz.path.clone(),
            snr_db: snr,
            noise_offset: offset,
            split,
            seed,
        });
        Ok(())
    };
    let [lo, hi] = plan.snr_range;
    let draw_snr = |rng: &mut ChaCha8Rng| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    for c in &clean[..n_train] {
        for _ in 0..plan.train_mixtures_per_clean {
            let nz = seen.choose(&mut rng).expect("non-empty");
            let snr = draw_snr(&mut rng);
            push(&mut rng, c, nz, snr, Split::Train)?;
        }
    }
    for c in &clean[n_train..n_train + n_val] {
        let nz = seen.choose(&mut rng).expect("non-empty");
        let snr = draw_snr(&mut rng);
        push(&mut rng, c, nz, snr, Split::Val)?;
    }
    for (i, c) in clean[n_train + n_val..].iter().enumerate() {
        for &snr in &plan.test_snrs {
            push(&mut rng, c, &seen[i % seen.len()], snr, Split::TestSeen)?;
            if !unseen.is_empty() {
                push(&mut rng, c, &unseen[i % unseen.len()], snr, Split::TestUnseen)?;
            }
        }
    }
    Ok(records)
}

/// Consecutive frames of whole utterances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchPlan {
    /// `(utterance index, frame range)`; ranges always cover the utterance.
    pub utterances: Vec<(usize, Range<usize>)>,
    pub frames: usize,
}

/// Packs utterances in `order` until the next one would exceed `budget`.
/// A batch always holds at least one utterance, so an utterance longer
/// than the budget forms a batch of its own.
pub fn pack_batches(order: &[usize], counts: &[usize], budget: usize) -> Result<Vec<BatchPlan>> {
    if order.is_empty() {
        return Err(Error::invalid("cannot batch an empty corpus"));
    }
    let mut out: Vec<BatchPlan> = Vec::new();
    let mut cur = BatchPlan {
        utterances: Vec::new(),
        frames: 0,
    };
    for &u in order {
        let n = *counts
            .get(u)
            .ok_or_else(|| Error::invalid(format!("utterance index {u} out of range")))?;
        if !cur.utterances.is_empty() && cur.frames + n > budget {
            out.push(std::mem::replace(
                &mut cur,
                BatchPlan {
                    utterances: Vec::new(),
                    frames: 0,
                },
            ));
        }
        cur.utterances.push((u, 0..n));
        cur.frames += n;
    }
    out.push(cur);
    Ok(out)
}

/// One epoch of batches: a seeded shuffle, then `pack_batches`.
pub fn make_batches(counts: &[usize], budget: usize, seed: u64) -> Result<Vec<BatchPlan>> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pack_batches(&order, counts, budget)
}
