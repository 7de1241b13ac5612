use std::path::Path;
use std::process::{Command, Output};

use phasedcn::dsp::{load_wav, save_wav, Waveform, SAMPLE_RATE};
use phasedcn::pipeline::read_loss_log;

fn phasedcn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phasedcn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TOY: &str = r#"{
  "data_dir": "data",
  "model": {"scale_factor": 0.03125},
  "data": {"synth": {"n_clean": 5, "n_noise": 2, "clean_secs": 1.5, "noise_secs": 8.0}},
  "training": {"steps": 10, "batch_frames": 300, "checkpoint_interval": 5, "val_interval": 5},
  "evaluation": {"modes": ["ave-enpha"]}
}"#;

#[test]
fn inspect_default_config_reports_table3_ratio() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"data_dir": "data"}"#).unwrap();
    let out = ok(&phasedcn(&["inspect", "--config", "c.json"], dir.path()));
    let ratio: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("flops/param ratio: "))
        .expect("ratio line")
        .trim()
        .parse()
        .unwrap();
    assert!((1.8..=2.2).contains(&ratio), "{ratio}");
    assert!(out.contains("trunk.0"));
    assert!(out.lines().any(|l| l.starts_with("total")));
}

#[test]
fn prepare_train_enhance_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), TOY).unwrap();
    ok(&phasedcn(&["prepare", "--config", "c.json"], d));
    assert!(d.join("data/manifest.jsonl").exists());
    assert!(d.join("data/normalizer.bin").exists());

    ok(&phasedcn(&["train", "--config", "c.json"], d));
    assert!(d.join("data/run/checkpoints/latest.ckpt").exists());
    assert!(d.join("data/run/checkpoints/best.ckpt").exists());
    let log = read_loss_log(&d.join("data/run/loss_log.jsonl")).unwrap();
    assert_eq!(log.len(), 10);
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());

    let noisy: Vec<f64> = (0..16000)
        .map(|i| 0.3 * (i as f64 * 0.05).sin() + 0.05 * ((i * 7919 % 1000) as f64 / 1000.0 - 0.5))
        .collect();
    save_wav(d.join("in.wav"), &Waveform::new(noisy, SAMPLE_RATE).unwrap()).unwrap();
    ok(&phasedcn(&["enhance", "in.wav", "out.wav", "--config", "c.json"], d));
    let out = load_wav(d.join("out.wav")).unwrap();
    assert_eq!(out.sample_rate, SAMPLE_RATE);
    assert!(!out.is_empty() && out.samples.iter().all(|v| v.is_finite()));

    let table = ok(&phasedcn(&["evaluate", "--config", "c.json"], d));
    assert!(table.contains("ave-enpha"));
    assert!(d.join("data/run/report.json").exists());

    let mode_out = ok(&phasedcn(
        &["enhance", "--config", "c.json", "--mode", "irm-unpha"],
        d,
    ));
    assert!(mode_out.contains("wrote"));
    assert!(d.join("data/run/enhanced/irm-unpha").is_dir());
}

#[test]
fn bad_inputs_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("typo.json"), r#"{"data_dir": "x", "model": {"dropuot": 0.1}}"#).unwrap();
    let out = phasedcn(&["inspect", "--config", "typo.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropuot"));

    std::fs::write(d.join("ok.json"), r#"{"data_dir": "missing"}"#).unwrap();
    let out = phasedcn(&["train", "--config", "ok.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("data_dir"));

    let out = phasedcn(&["inspect", "--config", "ok.json", "--mode", "loud"], d);
    assert!(!out.status.success());

    let out = phasedcn(&["inspect"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}
