//! End-to-end behavior of the three-stage schedule: log structure,
//! checkpoint chaining, resumption, and reproducibility.

use std::path::{Path, PathBuf};

use tempfile::TempDir;

use direid_core::data::DatasetManifest;
use direid_core::eval::AttentionMode;
use direid_core::image::ImageGeometry;
use direid_core::networks::{load_checkpoint, NetworkConfig};
use direid_core::synthetic::build_synthetic_dataset;
use direid_core::train::{
    pretrain_identity_encoder, read_log, resume_ddgan, train_ddgan, train_dfen, DfenOptions,
    DfenSource, StepRecord, TrainConfig, TrainStage, train_log_path,
};

fn corpus(ids: usize, per_id: usize, seed: u64) -> (TempDir, DatasetManifest) {
    let dir = TempDir::new().unwrap();
    let geom = ImageGeometry {
        height: 16,
        width: 8,
    };
    let manifest = build_synthetic_dataset(ids, per_id, 2, seed, dir.path(), geom).unwrap();
    (dir, manifest)
}

fn cfg(stage: TrainStage, iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        seed,
        batch_size: 4,
        ..TrainConfig::for_stage(stage)
    }
}

fn stage0_checkpoint(data: &DatasetManifest, net: &NetworkConfig, dir: &Path) -> PathBuf {
    let mut c = cfg(TrainStage::PretrainId, 0, 5);
    c.iterations = 0;
    pretrain_identity_encoder(&c, net, data, dir).unwrap()
}

#[test]
fn the_ddgan_log_alternates_self_and_cross() {
    let (_data_dir, data) = corpus(4, 3, 101);
    let net = NetworkConfig::tiny(4);
    let out = TempDir::new().unwrap();
    let stage0 = stage0_checkpoint(&data, &net, out.path());

    let c = cfg(TrainStage::Ddgan, 3, 7);
    let final_ckpt = train_ddgan(&c, &net, &data, &stage0, out.path()).unwrap();
    assert_eq!(final_ckpt.file_name().unwrap(), "stage1_iter3.ckpt");

    let records = read_log(&train_log_path(out.path(), TrainStage::Ddgan)).unwrap();
    assert_eq!(records.len(), 6);
    for (i, pair) in records.chunks(2).enumerate() {
        assert_eq!(pair[0].phase, "self");
        assert_eq!(pair[1].phase, "cross");
        assert_eq!(pair[0].iteration, i as u64);
        assert_eq!(pair[1].iteration, i as u64);
    }

    let self_keys: Vec<&str> = records[0].terms.keys().map(String::as_str).collect();
    assert_eq!(self_keys, ["deg", "invc", "pre", "real", "recon"]);
    let cross_keys: Vec<&str> = records[1].terms.keys().map(String::as_str).collect();
    assert_eq!(cross_keys, ["deg", "id", "pre", "real", "recon"]);

    for record in &records {
        match record.phase.as_str() {
            "self" => {
                assert!(record.deg_skipped.is_none());
                assert!(record.deg_audit.is_empty());
            }
            "cross" => {
                let skipped = record.deg_skipped.expect("cross records count skips");
                assert_eq!(record.deg_audit.len(), 2);
                let zeros = record
                    .deg_audit
                    .iter()
                    .filter(|a| a.gamma == 0)
                    .count();
                assert_eq!(skipped, zeros);
            }
            other => panic!("unexpected phase {other}"),
        }
    }
}

#[test]
fn resuming_replays_the_recorded_trajectory() {
    let (_data_dir, data) = corpus(4, 3, 103);
    let net = NetworkConfig::tiny(4);
    let full_dir = TempDir::new().unwrap();
    let stage0 = stage0_checkpoint(&data, &net, full_dir.path());

    let mut c = cfg(TrainStage::Ddgan, 6, 13);
    c.checkpoint_every = 3;
    train_ddgan(&c, &net, &data, &stage0, full_dir.path()).unwrap();
    let full = read_log(&train_log_path(full_dir.path(), TrainStage::Ddgan)).unwrap();
    assert_eq!(full.len(), 12);

    let mid = full_dir.path().join("stage1_iter3.ckpt");
    let resumed_dir = TempDir::new().unwrap();
    resume_ddgan(&c, &net, &data, &mid, resumed_dir.path()).unwrap();
    let resumed = read_log(&train_log_path(resumed_dir.path(), TrainStage::Ddgan)).unwrap();
    assert_eq!(resumed.len(), 6);

    // The optimizer state rides along in the checkpoint, so the replay
    // is not merely close — it is the identical trajectory.
    let tail: Vec<&StepRecord> = full.iter().skip(6).collect();
    for (a, b) in tail.iter().zip(&resumed) {
        assert_eq!(a.phase, b.phase);
        assert_eq!(a.iteration, b.iteration);
        assert_eq!(a.terms, b.terms);
        assert_eq!(a.total, b.total);
    }
}

#[test]
fn pretraining_is_reproducible_across_runs() {
    let (_data_dir, data) = corpus(4, 4, 107);
    let net = NetworkConfig::tiny(4);
    let c = cfg(TrainStage::PretrainId, 40, 19);

    let run = || {
        let out = TempDir::new().unwrap();
        pretrain_identity_encoder(&c, &net, &data, out.path()).unwrap();
        read_log(&train_log_path(out.path(), TrainStage::PretrainId)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 40);
    let last_a = a.last().unwrap();
    let last_b = b.last().unwrap();
    assert!(
        (last_a.total - last_b.total).abs() <= 1e-4,
        "final losses diverge: {} vs {}",
        last_a.total,
        last_b.total
    );
    // Individual batches are noisy at this size, so the learning signal
    // is judged on window means rather than single records.
    let mean = |w: &[StepRecord]| w.iter().map(|r| r.total).sum::<f64>() / w.len() as f64;
    let (head, tail) = (mean(&a[..8]), mean(&a[32..]));
    assert!(
        tail < head,
        "loss failed to improve: {head} -> {tail}"
    );
}

#[test]
fn the_three_stages_chain_through_their_checkpoints() {
    let (_data_dir, data) = corpus(4, 4, 109);
    let net = NetworkConfig::tiny(4);
    let out = TempDir::new().unwrap();

    let mut c0 = cfg(TrainStage::PretrainId, 2, 23);
    c0.iterations = 2;
    let stage0 = pretrain_identity_encoder(&c0, &net, &data, out.path()).unwrap();

    let c1 = cfg(TrainStage::Ddgan, 2, 23);
    let stage1 = train_ddgan(&c1, &net, &data, &stage0, out.path()).unwrap();

    let c2 = cfg(TrainStage::Dfen, 2, 23);
    let run_dfen = |dir: &Path| {
        let options = DfenOptions {
            source: DfenSource::Checkpoints {
                stage1: &stage1,
                stage0: &stage0,
            },
            attention: AttentionMode::Learned,
            out_dir: dir,
        };
        let ckpt = train_dfen(&c2, &net, &data, &options).unwrap();
        let records = read_log(&train_log_path(dir, TrainStage::Dfen)).unwrap();
        (ckpt, records)
    };

    let (ckpt, records) = run_dfen(out.path());
    assert_eq!(ckpt.file_name().unwrap(), "stage2_iter2.ckpt");
    let (_, meta) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(meta.stage, "stage2");
    assert_eq!(meta.iteration, 2);
    assert_eq!(records.len(), 2);
    let keys: Vec<&str> = records[0].terms.keys().map(String::as_str).collect();
    assert_eq!(keys, ["both", "inv", "sen"]);

    // Identical seed and sources: the run is reproducible.
    let second = TempDir::new().unwrap();
    let (_, records2) = run_dfen(second.path());
    assert_eq!(records.last().unwrap().total, records2.last().unwrap().total);

    // The ablation source skips the Stage-1 checkpoint entirely.
    let ablation = TempDir::new().unwrap();
    let options = DfenOptions {
        source: DfenSource::RandomContent { stage0: &stage0 },
        attention: AttentionMode::ForcedUnit,
        out_dir: ablation.path(),
    };
    let mut c_ab = cfg(TrainStage::Dfen, 1, 29);
    c_ab.iterations = 1;
    train_dfen(&c_ab, &net, &data, &options).unwrap();
}
