mod common;

use std::fs;
use std::path::Path;

use tax_core::checkpoint::Checkpoint;
use tax_core::config::{RoutingSource, RunConfig};
use tax_core::data::{build_dataset, Dataset};
use tax_core::train::{train_stage, EpochLog, RunDir, Stage, StageOptions};
use tax_core::TaxError;

fn tiny_config() -> RunConfig {
    common::tiny_run_config()
}

fn dataset(dir: &Path, cfg: &RunConfig) -> Dataset {
    build_dataset(dir, cfg.seed, &cfg.data).unwrap();
    Dataset::load(dir).unwrap()
}

fn run_all(ds: &Dataset, cfg: &RunConfig, run: &RunDir) {
    for st in Stage::ALL {
        let r = train_stage(st, ds, cfg, run, &StageOptions::default()).unwrap();
        assert_eq!(r.epochs.len(), 3);
        assert!(r.progress.done);
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn identical_runs_write_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ds = dataset(&dir.path().join("data"), &cfg);
    let (a, b) = (RunDir::new(dir.path().join("a")), RunDir::new(dir.path().join("b")));
    run_all(&ds, &cfg, &a);
    run_all(&ds, &cfg, &b);
    for st in Stage::ALL {
        assert_eq!(read(&a.log(st)), read(&b.log(st)), "{} log", st.name());
        assert_eq!(read(&a.checkpoint(st)), read(&b.checkpoint(st)), "{} checkpoint", st.name());
        let text = fs::read_to_string(a.log(st)).unwrap();
        let lines: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
        for l in text.lines() {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
            keys.sort();
            assert_eq!(keys, ["epoch", "loss", "stage"]);
        }
        // load then save reproduces the file byte for byte
        let path = a.checkpoint(st);
        let copy = dir.path().join("copy.ckpt");
        Checkpoint::load(&path).unwrap().save(&copy).unwrap();
        assert_eq!(read(&copy), read(&path));
    }
}

#[test]
fn interrupted_stages_resume_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.routing = RoutingSource::Pseudo;
    let ds = dataset(&dir.path().join("data"), &cfg);
    let whole = RunDir::new(dir.path().join("whole"));
    run_all(&ds, &cfg, &whole);
    let split = RunDir::new(dir.path().join("split"));
    for st in Stage::ALL {
        // 4 batches per epoch, 12 steps per stage; stop twice along the way.
        let first = train_stage(st, &ds, &cfg, &split, &StageOptions { max_steps: Some(5), resume: false }).unwrap();
        assert_eq!(first.progress.steps, 5);
        assert!(!first.progress.done);
        let second = train_stage(st, &ds, &cfg, &split, &StageOptions { max_steps: Some(4), resume: true }).unwrap();
        assert_eq!(second.progress.steps, 9);
        let last = train_stage(st, &ds, &cfg, &split, &StageOptions { max_steps: None, resume: true }).unwrap();
        assert_eq!(last.progress.steps, 12);
        assert_eq!(read(&split.checkpoint(st)), read(&whole.checkpoint(st)), "{} checkpoint", st.name());
        assert_eq!(read(&split.log(st)), read(&whole.log(st)), "{} log", st.name());
    }
}

#[test]
fn later_stages_need_their_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ds = dataset(&dir.path().join("data"), &cfg);
    let run = RunDir::new(dir.path().join("run"));
    for st in [Stage::Assigner, Stage::Tax] {
        match train_stage(st, &ds, &cfg, &run, &StageOptions::default()) {
            Err(TaxError::Config(msg)) => assert!(msg.contains(st.prerequisite().unwrap().name()), "{msg}"),
            r => panic!("{r:?}"),
        }
    }
}

#[test]
fn resume_rejects_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ds = dataset(&dir.path().join("data"), &cfg);
    let run = RunDir::new(dir.path().join("run"));
    train_stage(Stage::Vanilla, &ds, &cfg, &run, &StageOptions { max_steps: Some(2), resume: false }).unwrap();
    let mut other = cfg.clone();
    other.train.vanilla.learning_rate = 0.5;
    assert!(matches!(train_stage(Stage::Vanilla, &ds, &other, &run, &StageOptions { max_steps: None, resume: true }), Err(TaxError::Config(_))));
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.vanilla.learning_rate = 1e12;
    let ds = dataset(&dir.path().join("data"), &cfg);
    let run = RunDir::new(dir.path().join("run"));
    match train_stage(Stage::Vanilla, &ds, &cfg, &run, &StageOptions::default()) {
        Err(TaxError::Diverged { stage, loss, .. }) => {
            assert_eq!(stage, "vanilla");
            assert!(!loss.is_finite());
        }
        r => panic!("expected divergence, got {r:?}"),
    }
    let ck = Checkpoint::load(&run.checkpoint(Stage::Vanilla)).unwrap();
    assert!(ck.tensors.iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite())));
}
