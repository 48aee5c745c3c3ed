use std::fs;
use std::path::Path;

use glyphforge::checkpoint::{self, Checkpoint};
use glyphforge::config::{ModelSpec, Preset, TrainFile, CONFIG_VERSION};
use glyphforge::partition_cache;
use glyphforge::run::{self, step_file, LATEST};
use glyphforge::store::{serialize, write_json};
use glyphforge_core::adaptive_loss::{PartitionTable, TABLE_POINTS};
use glyphforge_core::corpus::{make_splits, BatchSpec};
use glyphforge_core::model::init_params;
use glyphforge_core::optim::AdamConfig;
use glyphforge_core::synthetic::toy_corpus;
use glyphforge_core::trainer::{TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Toy corpus, splits and a config file under `root`.
fn setup(root: &Path, steps: u64, checkpoint_every: u64) -> TrainFile {
    let m = toy_corpus(5, 6, 64, 3).unwrap();
    serialize(&m, &root.join("corpus")).unwrap();
    write_json(&root.join("splits.json"), &make_splits(&m, 1).unwrap()).unwrap();
    let cfg = TrainFile {
        version: CONFIG_VERSION,
        corpus: "corpus".into(),
        splits: "splits.json".into(),
        checkpoint_dir: "ckpt".into(),
        metrics: None,
        partition_cache: "cache/log_partition.bin".into(),
        seed: 11,
        steps,
        batch: BatchSpec { fonts: 2, chars_per_font: 3 },
        optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        checkpoint_every,
        dev_observations: 2,
        resume: true,
        model: ModelSpec { preset: Preset::Toy, k: Some(8), ..ModelSpec::default() },
    };
    write_json(&root.join("train.json"), &cfg).unwrap();
    TrainFile::load(&root.join("train.json")).unwrap()
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 0, 1000);
    let summary = run::train(&cfg, |_| {}).unwrap();
    assert_eq!(summary.final_step, 0);
    let ck = checkpoint::load(&cfg.checkpoint_dir.join(step_file(0))).unwrap();
    let model = cfg.model.resolve().unwrap();
    assert_eq!(ck.state.params, init_params(&model, &mut ChaCha8Rng::seed_from_u64(11)).unwrap());
    assert!(ck.state.optimizer.m.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2, 1000);
    run::train(&cfg, |_| {}).unwrap();
    let path = cfg.checkpoint_dir.join(LATEST);
    let bytes = fs::read(&path).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(ck.state.step(), 2);
    assert!(ck.state.optimizer.v.iter().any(|t| t.data().iter().any(|&v| v > 0.0)));
    assert_eq!(checkpoint::encode(&ck), bytes);
    assert_eq!(checkpoint::decode(&checkpoint::encode(&ck)).unwrap(), ck);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = ModelSpec { preset: Preset::Toy, k: Some(4), ..ModelSpec::default() }.resolve().unwrap();
    let ck = Checkpoint {
        state: TrainState::new(&model, AdamConfig::default(), 0).unwrap(),
        train: TrainConfig::default(),
    };
    let bytes = checkpoint::encode(&ck);
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
    let mut version = bytes.clone();
    version[4] = 99;
    assert!(checkpoint::decode(&version).unwrap_err().contains("version"));
    assert!(checkpoint::decode(b"PNG?").is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let cfg = setup(a.path(), 4, 2);
    let mut lines = Vec::new();
    run::train(&cfg, |m| lines.push(*m)).unwrap();

    let b = tempfile::tempdir().unwrap();
    let mut cfg_b = setup(b.path(), 2, 2);
    let mut resumed = Vec::new();
    run::train(&cfg_b, |m| resumed.push(*m)).unwrap();
    cfg_b.steps = 4;
    let summary = run::train(&cfg_b, |m| resumed.push(*m)).unwrap();
    assert_eq!(summary.start_step, 2);

    assert_eq!(lines, resumed);
    let latest = |c: &TrainFile| fs::read(c.checkpoint_dir.join(LATEST)).unwrap();
    assert_eq!(latest(&cfg), latest(&cfg_b));
    let log_a = fs::read_to_string(cfg.metrics_path()).unwrap();
    assert_eq!(log_a, fs::read_to_string(cfg_b.metrics_path()).unwrap());
    for (line, m) in log_a.lines().zip(&lines) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], m.step);
        for key in ["elbo", "recon", "kl"] {
            assert!(v[key].as_f64().unwrap().is_finite());
        }
        assert_eq!(v.as_object().unwrap().len(), 4);
    }
    assert!(cfg.checkpoint_dir.join("best.gfc").is_file());
    assert!(cfg.checkpoint_dir.join(step_file(2)).is_file());
}

#[test]
fn mismatched_resume_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 1, 1000);
    run::train(&cfg, |_| {}).unwrap();
    cfg.steps = 2;
    cfg.model.k = Some(6);
    assert!(run::train(&cfg, |_| {}).is_err());
}

#[test]
fn partition_cache_round_trip_and_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache/log_partition.bin");
    let built = partition_cache::load_or_build(&path).unwrap();
    assert_eq!(built, PartitionTable::build(TABLE_POINTS));
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"GFLZ");
    assert_eq!(partition_cache::load_or_build(&path).unwrap(), built);

    let mut stale = bytes.clone();
    stale[4..8].copy_from_slice(&(partition_cache::VERSION + 1).to_le_bytes());
    stale[20..28].copy_from_slice(&123.0f64.to_le_bytes());
    fs::write(&path, &stale).unwrap();
    assert_eq!(partition_cache::load_or_build(&path).unwrap(), built);
    assert_eq!(fs::read(&path).unwrap(), bytes);
}

#[test]
fn config_schema_defaults_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.json");
    fs::write(&p, r#"{"version": 1, "corpus": "c", "splits": "s.json", "checkpoint_dir": "out"}"#).unwrap();
    let cfg = TrainFile::load(&p).unwrap();
    assert_eq!(cfg.steps, 2000);
    assert_eq!(cfg.optimizer.lr, 1e-4);
    assert_eq!(cfg.batch, BatchSpec { fonts: 10, chars_per_font: 20 });
    assert_eq!(cfg.corpus, dir.path().join("c"));
    assert_eq!(cfg.model.resolve().unwrap().k, 256);

    fs::write(&p, r#"{"version": 2, "corpus": "c", "splits": "s", "checkpoint_dir": "o"}"#).unwrap();
    assert!(TrainFile::load(&p).is_err());
    fs::write(&p, r#"{"version": 1, "corpus": "c", "splits": "s", "checkpoint_dir": "o", "lr": 1}"#).unwrap();
    assert!(TrainFile::load(&p).is_err());

    let spec = ModelSpec { preset: Preset::Toy, side: Some(32), ..ModelSpec::default() };
    let m = spec.resolve().unwrap();
    assert_eq!((m.side, m.decoder_base_side), (32, 4));
    assert!(ModelSpec { side: Some(48), ..ModelSpec::default() }.resolve().is_err());
}
