//! The five commands: prepare, train, enhance, evaluate, inspect.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    list_corpus, make_batches, plan_mixtures, read_manifest, synth_corpus, write_manifest,
    BatchPlan, MixtureRecord, Split,
};
use crate::dsp::{load_wav, save_wav, FrameSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, MetricReport, ModelEnhancer};
use crate::features::{
    compute_targets, extract_features, fit_normalizer, FeatureSequence, NormalizerStats,
    TargetSequence,
};
use crate::model::{LossBreakdown, Model, ModelConfig};
use crate::nn::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Mode,
};
use crate::reconstruct::enhance_utterance;

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// SplitMix64 of `(seed, salt)`: independent per-step/per-epoch seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareReport {
    pub synthesized: bool,
    pub clean_files: usize,
    pub noise_files: usize,
    pub train: usize,
    pub val: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
    pub normalizer_frames: usize,
}

/// Corpus (synthesized when absent), manifest, and the training-split
/// normalizer.
pub fn prepare(cfg: &RunConfig) -> Result<PrepareReport> {
    let root = &cfg.data_dir;
    create_dir(root)?;
    let has = |sub: &str| root.join(sub).is_dir();
    let synthesized = !(has("clean") && has("noise"));
    if synthesized {
        if !cfg.data.synthesize {
            return Err(Error::config(format!(
                "data.synthesize: false, but {} has no clean/ and noise/ corpus",
                root.display()
            )));
        }
        log::info!("synthesizing corpus in {}", root.display());
        synth_corpus(root, &cfg.data.synth, cfg.seed)?;
    }
    let clean = list_corpus(root, "clean")?;
    let noise = list_corpus(root, "noise")?;
    let records = plan_mixtures(&clean, &noise, &cfg.data.mix, cfg.seed)?;
    write_manifest(&cfg.manifest_path(), &records)?;
    let train: Vec<&MixtureRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let spec = FrameSpec::default();
    let raw: Vec<FeatureSequence> = train
        .par_iter()
        .map(|r| Ok(extract_features(&r.realize(root)?.noisy, &spec)?.0))
        .collect::<Result<_>>()?;
    let stats = fit_normalizer(&raw.iter().collect::<Vec<_>>())?;
    stats.save(cfg.normalizer_path())?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    Ok(PrepareReport {
        synthesized,
        clean_files: clean.len(),
        noise_files: noise.len(),
        train: count(Split::Train),
        val: count(Split::Val),
        test_seen: count(Split::TestSeen),
        test_unseen: count(Split::TestUnseen),
        normalizer_frames: stats.frame_count,
    })
}

/// Normalized network inputs and targets for one mixture.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub targets: TargetSequence,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.num_frames()
    }
}

pub fn load_utterances(
    records: &[&MixtureRecord],
    root: &Path,
    normalizer: &NormalizerStats,
    irm_exponent: f64,
) -> Result<Vec<Utterance>> {
    let spec = FrameSpec::default();
    records
        .par_iter()
        .map(|r| {
            let mix = r.realize(root)?;
            let (raw, _) = extract_features(&mix.noisy, &spec)?;
            Ok(Utterance {
                features: normalizer.apply(&raw)?,
                targets: compute_targets(&mix.clean, &mix.noise, &spec, irm_exponent)?,
            })
        })
        .collect()
}

/// Utterances stacked along the frame axis, with their row ranges.
pub struct Batch {
    pub features: FeatureSequence,
    pub targets: TargetSequence,
    pub segments: Vec<Range<usize>>,
}

pub fn assemble(utts: &[Utterance], which: impl IntoIterator<Item = usize>) -> Batch {
    let idx: Vec<usize> = which.into_iter().collect();
    let mut segments = Vec::with_capacity(idx.len());
    let mut start = 0;
    for &i in &idx {
        let n = utts[i].frames();
        segments.push(start..start + n);
        start += n;
    }
    let f: Vec<&FeatureSequence> = idx.iter().map(|&i| &utts[i].features).collect();
    let t: Vec<&TargetSequence> = idx.iter().map(|&i| &utts[i].targets).collect();
    Batch {
        features: FeatureSequence::concat(&f),
        targets: TargetSequence::concat(&t),
        segments,
    }
}

/// Endless batch stream: epoch `e` is `make_batches` seeded by `(seed, e)`.
pub struct EpochCursor {
    counts: Vec<usize>,
    budget: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<BatchPlan>,
    next: usize,
}

impl EpochCursor {
    pub fn new(counts: Vec<usize>, budget: usize, seed: u64) -> Result<Self> {
        let batches = make_batches(&counts, budget, mix_seed(seed, 0))?;
        Ok(Self {
            counts,
            budget,
            seed,
            epoch: 0,
            batches,
            next: 0,
        })
    }

    pub fn next_batch(&mut self) -> Result<BatchPlan> {
        if self.next == self.batches.len() {
            self.epoch += 1;
            self.batches = make_batches(&self.counts, self.budget, mix_seed(self.seed, self.epoch))?;
            self.next = 0;
        }
        self.next += 1;
        Ok(self.batches[self.next - 1].clone())
    }
}

/// One line of `loss_log.jsonl` / `val_log.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub irm_mse: f64,
    pub ri_mse: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(step: u64, l: LossBreakdown) -> Self {
        Self {
            step,
            irm_mse: l.irm,
            ri_mse: l.ri,
            total: l.total,
        }
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Rewrites a log keeping only entries up to `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let kept: Vec<LossRecord> = if path.exists() {
        read_loss_log(path)?
            .into_iter()
            .filter(|r| r.step <= step)
            .collect()
    } else {
        Vec::new()
    };
    let mut out = String::new();
    for r in kept {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, r: &LossRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))
}

/// Stored in every checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub best_val: Option<f64>,
    pub best_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub start_step: u64,
    pub final_step: u64,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_val: Option<f64>,
    pub latest: PathBuf,
}

pub const LATEST: &str = "latest.ckpt";
pub const BEST: &str = "best.ckpt";

/// Mean validation loss, each utterance run on its own in inference mode.
pub fn validation_loss(model: &Model, val: &[Utterance]) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown {
        irm: 0.0,
        ri: 0.0,
        total: 0.0,
    };
    let frames: usize = val.iter().map(Utterance::frames).sum();
    for u in val {
        let l = model.loss(&u.features, &u.targets, &[0..u.frames()], Mode::Infer, 0)?;
        let w = u.frames() as f64 / frames as f64;
        acc.irm += w * l.irm;
        acc.ri += w * l.ri;
        acc.total += w * l.total;
    }
    Ok(acc)
}

/// Adam training with per-step logging, periodic validation, and
/// `latest`/`best` checkpoints. Resumes from `latest` when allowed.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.require_data_dir()?;
    let t = &cfg.training;
    let run = cfg.run_dir();
    let ckpt_dir = cfg.checkpoint_dir();
    create_dir(&ckpt_dir)?;
    let loss_log = run.join("loss_log.jsonl");
    let val_log = run.join("val_log.jsonl");
    let latest = ckpt_dir.join(LATEST);

    let records = read_manifest(&cfg.manifest_path())?;
    let normalizer = NormalizerStats::load(cfg.normalizer_path())?;
    let pick = |s: Split| records.iter().filter(move |r| r.split == s).collect::<Vec<_>>();
    let train_utts = load_utterances(&pick(Split::Train), &cfg.data_dir, &normalizer, cfg.data.irm_exponent)?;
    let val_utts = load_utterances(&pick(Split::Val), &cfg.data_dir, &normalizer, cfg.data.irm_exponent)?;
    if train_utts.is_empty() {
        return Err(Error::invalid("manifest has no training mixtures"));
    }
    log::info!(
        "{} training and {} validation utterances",
        train_utts.len(),
        val_utts.len()
    );

    let mut model = Model::build(&cfg.model, cfg.seed)?;
    let adam_cfg = AdamConfig {
        lr: t.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.params, adam_cfg);
    let mut meta = CheckpointMeta {
        model: cfg.model.clone(),
        seed: cfg.seed,
        best_val: None,
        best_step: None,
    };
    let mut start = 0;
    if t.resume && latest.exists() {
        let ck = load_checkpoint(&latest)?;
        let saved: CheckpointMeta = serde_json::from_value(ck.header.meta.clone())?;
        if saved.model != cfg.model || saved.seed != cfg.seed {
            return Err(Error::State(format!(
                "{} was trained with a different model config or seed; \
                 set training.resume = false to start over",
                latest.display()
            )));
        }
        ck.restore(&mut model.params, Some(&mut adam))?;
        adam.config.lr = t.lr;
        start = ck.header.step;
        meta = saved;
        log::info!("resuming from step {start}");
    } else {
        let best = ckpt_dir.join(BEST);
        if best.exists() {
            fs::remove_file(&best).map_err(|e| Error::io(&best, e))?;
        }
    }
    truncate_log(&loss_log, start)?;
    truncate_log(&val_log, start)?;

    let counts: Vec<usize> = train_utts.iter().map(Utterance::frames).collect();
    let mut cursor = EpochCursor::new(counts, t.batch_frames, cfg.seed)?;
    for _ in 0..start {
        cursor.next_batch()?;
    }
    let save = |model: &Model, adam: &AdamState, step: u64, meta: &CheckpointMeta, path: &Path| {
        save_checkpoint(
            path,
            &model.params,
            Some(adam),
            step,
            &serde_json::to_value(meta)?,
            t.checkpoint_dtype,
        )
    };

    let mut first_loss = None;
    let mut final_loss = None;
    for step in start + 1..=t.steps {
        let plan = cursor.next_batch()?;
        let batch = assemble(&train_utts, plan.utterances.iter().map(|(u, _)| *u));
        let out = model.train_step(
            &batch.features,
            &batch.targets,
            &batch.segments,
            mix_seed(cfg.seed, step),
        )?;
        adam_step(&mut model.params, &out.grads, &mut adam)?;
        model.params.apply_bn_updates(&out.bn_updates);
        append_log(&loss_log, &LossRecord::new(step, out.loss))?;
        first_loss.get_or_insert(out.loss.total);
        final_loss = Some(out.loss.total);
        log::debug!("step {step}: loss {:.6}", out.loss.total);

        let last = step == t.steps;
        if !val_utts.is_empty() && (step % t.val_interval == 0 || last) {
            let v = validation_loss(&model, &val_utts)?;
            append_log(&val_log, &LossRecord::new(step, v))?;
            log::info!("step {step}: train {:.6}, val {:.6}", out.loss.total, v.total);
            if meta.best_val.is_none_or(|b| v.total < b) {
                meta.best_val = Some(v.total);
                meta.best_step = Some(step);
                save(&model, &adam, step, &meta, &ckpt_dir.join(BEST))?;
            }
        }
        if step % t.checkpoint_interval == 0 || last {
            save(&model, &adam, step, &meta, &latest)?;
        }
    }
    Ok(TrainReport {
        start_step: start,
        final_step: t.steps.max(start),
        first_loss,
        final_loss,
        best_val: meta.best_val,
        latest,
    })
}

/// The checkpoint enhance/evaluate use: the configured one, else the best,
/// else the latest.
pub fn resolve_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cfg.checkpoint {
        return Ok(p.clone());
    }
    let dir = cfg.checkpoint_dir();
    [BEST, LATEST]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::State(format!(
                "no checkpoint in {} (run `train` first)",
                dir.display()
            ))
        })
}

/// Model (architecture from the checkpoint) and normalizer.
pub fn load_trained(cfg: &RunConfig) -> Result<(Model, NormalizerStats)> {
    let path = resolve_checkpoint(cfg)?;
    let ck = load_checkpoint(&path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.header.meta.clone())?;
    let mut model = Model::build(&meta.model, meta.seed)?;
    ck.restore(&mut model.params, None)?;
    let normalizer = NormalizerStats::load(cfg.normalizer_path())?;
    Ok((model, normalizer))
}

pub fn enhance_file(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let (model, normalizer) = load_trained(cfg)?;
    let noisy = load_wav(input)?;
    let out = enhance_utterance(&noisy, &model, &normalizer, cfg.mode)?;
    save_wav(output, &out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnhanceReport {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(String, String)>,
}

/// Enhances every test mixture into `<run_dir>/enhanced/<mode>/<id>.wav`.
pub fn enhance_manifest(cfg: &RunConfig) -> Result<EnhanceReport> {
    cfg.require_data_dir()?;
    let (model, normalizer) = load_trained(cfg)?;
    let records = read_manifest(&cfg.manifest_path())?;
    let dir = cfg.run_dir().join("enhanced").join(cfg.mode.as_str());
    create_dir(&dir)?;
    let results: Vec<(String, Result<PathBuf>)> = records
        .par_iter()
        .filter(|r| r.split.is_test())
        .map(|r| {
            let res = (|| {
                let mix = r.realize(&cfg.data_dir)?;
                let out = enhance_utterance(&mix.noisy, &model, &normalizer, cfg.mode)?;
                let path = dir.join(format!("{}.wav", r.id));
                save_wav(&path, &out)?;
                Ok(path)
            })();
            (r.id.clone(), res)
        })
        .collect();
    let mut report = EnhanceReport {
        written: Vec::new(),
        failures: Vec::new(),
    };
    for (id, r) in results {
        match r {
            Ok(p) => report.written.push(p),
            Err(e) => report.failures.push((id, e.to_string())),
        }
    }
    Ok(report)
}

/// Scores the test splits; writes `report.json` and `report.txt`.
pub fn evaluate(cfg: &RunConfig) -> Result<MetricReport> {
    cfg.require_data_dir()?;
    let (model, normalizer) = load_trained(cfg)?;
    let records = read_manifest(&cfg.manifest_path())?;
    let enhancer = ModelEnhancer {
        model: &model,
        normalizer: &normalizer,
    };
    let report = evaluate_corpus(&enhancer, &records, &cfg.data_dir, &cfg.evaluation.modes)?;
    let run = cfg.run_dir();
    create_dir(&run)?;
    let json = run.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
    let txt = run.join("report.txt");
    fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

/// Per-layer parameter and FLOP table for the configured model.
pub fn inspect(cfg: &RunConfig) -> Result<String> {
    let model = Model::build(&cfg.model, cfg.seed)?;
    let c = model.complexity();
    let name_w = c.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<name_w$}  {:>12}  {:>14}", "layer", "params", "flops/frame");
    for l in &c.layers {
        let _ = writeln!(out, "{:<name_w$}  {:>12}  {:>14}", l.name, l.params, l.flops);
    }
    let _ = writeln!(out, "{:<name_w$}  {:>12}  {:>14}", "total", c.params, c.flops_per_frame);
    let _ = writeln!(out, "params: {:.3}M", c.params as f64 / 1e6);
    let _ = writeln!(out, "flops/frame: {:.3}M", c.flops_per_frame as f64 / 1e6);
    let _ = writeln!(out, "flops/param ratio: {:.4}", c.ratio());
    let _ = writeln!(out, "past receptive field: {} frames", cfg.model.past_reach() + 1);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_salt() {
        let a: Vec<u64> = (0..100).map(|s| mix_seed(7, s)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }

    #[test]
    fn cursor_covers_each_epoch_once() {
        let counts = vec![5, 7, 3, 9, 4];
        let mut c = EpochCursor::new(counts.clone(), 12, 1).unwrap();
        let mut seen = vec![0; counts.len()];
        let per_epoch = make_batches(&counts, 12, mix_seed(1, 0)).unwrap().len();
        for _ in 0..per_epoch {
            for (u, r) in c.next_batch().unwrap().utterances {
                assert_eq!(r, 0..counts[u]);
                seen[u] += 1;
            }
        }
        assert_eq!(seen, vec![1; counts.len()]);
    }
}
