//! One function per subcommand, plus the ablation chain plumbing.

use std::path::{Path, PathBuf};

use anyhow::Context;

use direid_core::data::{load_manifest, DatasetManifest};
use direid_core::degrade::build_mlr_split;
use direid_core::eval::{
    extract_features, single_shot_eval, AttentionMode, FeatureVariant, MetricsReport,
};
use direid_core::networks::{load_checkpoint, Models, NetworkConfig};
use direid_core::rng::derive_rng;
use direid_core::synthetic::build_synthetic_dataset;
use direid_core::train::{
    checkpoint_name, classification_accuracy, pretrain_identity_encoder, resume_ddgan,
    train_ddgan, train_dfen, DfenOptions, DfenSource, TrainStage,
};

use crate::config::{manifest_path, require_exists, usage, ExperimentConfig};
use crate::preset::Preset;

fn load_corpus(cfg: &ExperimentConfig, data: Option<&Path>) -> anyhow::Result<DatasetManifest> {
    let root = data.unwrap_or(&cfg.dataset.root);
    let manifest = manifest_path(root);
    require_exists(&manifest, "dataset manifest")?;
    load_manifest(&manifest).context("loading dataset manifest")
}

pub fn generate_data(cfg: &ExperimentConfig, data: Option<&Path>) -> anyhow::Result<()> {
    let root = data.unwrap_or(&cfg.dataset.root);
    let geom = cfg.network.geometry()?;
    let manifest = build_synthetic_dataset(
        cfg.dataset.ids,
        cfg.dataset.per_id,
        cfg.dataset.cameras,
        cfg.seed,
        root,
        geom,
    )?;
    println!(
        "wrote {} images ({} identities x {} each, {} cameras, {}x{}) to {}",
        manifest.len(),
        manifest.num_identities(),
        cfg.dataset.per_id,
        manifest.num_cameras(),
        geom.height,
        geom.width,
        root.display()
    );
    Ok(())
}

/// Default location of the degraded-query / clean-gallery split.
pub fn split_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("split")
}

pub fn degrade(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    query_camera: Option<u32>,
    out: &Path,
) -> anyhow::Result<()> {
    let manifest = load_corpus(cfg, data)?;
    let camera = query_camera.or(cfg.eval.query_camera);
    let mut rng = derive_rng(cfg.seed, "mlr.split", &[]);
    let split = build_mlr_split(&manifest, &mut rng, camera, out)?;
    let mut counts = std::collections::BTreeMap::new();
    for ratio in &split.ratios {
        *counts.entry(format!("x{ratio}")).or_insert(0usize) += 1;
    }
    let histogram: Vec<String> = counts.iter().map(|(k, n)| format!("{k}:{n}")).collect();
    println!(
        "split written to {}: {} down-sampled queries ({}), {} gallery images",
        out.display(),
        split.split.query.len(),
        histogram.join(" "),
        split.split.gallery.len(),
    );
    Ok(())
}

pub fn pretrain_id(cfg: &ExperimentConfig, data: Option<&Path>) -> anyhow::Result<()> {
    let manifest = load_corpus(cfg, data)?;
    let net = cfg.network.build(manifest.num_identities())?;
    let train = cfg.to_train_config(TrainStage::PretrainId)?;
    let ckpt = pretrain_identity_encoder(&train, &net, &manifest, &cfg.out_dir)?;
    let (models, _) = load_checkpoint(&ckpt)?;
    let accuracy = classification_accuracy(&models, &manifest)?;
    println!(
        "stage-0 checkpoint {} (training accuracy {:.1}%)",
        ckpt.display(),
        100.0 * accuracy
    );
    Ok(())
}

/// The final checkpoint a stage's configured run leaves behind.
pub fn final_checkpoint_path(cfg: &ExperimentConfig, dir: &Path, stage: TrainStage) -> PathBuf {
    let iterations = match stage {
        TrainStage::PretrainId => cfg.train.pretrain.iterations,
        TrainStage::Ddgan => cfg.train.ddgan.iterations,
        TrainStage::Dfen => cfg.train.dfen.iterations,
    };
    dir.join(checkpoint_name(stage, iterations as u64))
}

pub fn cmd_train_ddgan(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    stage0: Option<&Path>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let manifest = load_corpus(cfg, data)?;
    let net = cfg.network.build(manifest.num_identities())?;
    let train = cfg.to_train_config(TrainStage::Ddgan)?;
    let ckpt = match resume {
        Some(checkpoint) => {
            require_exists(checkpoint, "stage-1 checkpoint")?;
            resume_ddgan(&train, &net, &manifest, checkpoint, &cfg.out_dir)?
        }
        None => {
            let default0 = final_checkpoint_path(cfg, &cfg.out_dir, TrainStage::PretrainId);
            let stage0 = stage0.unwrap_or(&default0);
            require_exists(stage0, "stage-0 checkpoint")?;
            train_ddgan(&train, &net, &manifest, stage0, &cfg.out_dir)?
        }
    };
    println!("stage-1 checkpoint {}", ckpt.display());
    Ok(())
}

pub fn cmd_train_dfen(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    stage0: Option<&Path>,
    stage1: Option<&Path>,
    no_attention: bool,
    random_content: bool,
) -> anyhow::Result<()> {
    let manifest = load_corpus(cfg, data)?;
    let net = cfg.network.build(manifest.num_identities())?;
    let train = cfg.to_train_config(TrainStage::Dfen)?;
    let default0 = final_checkpoint_path(cfg, &cfg.out_dir, TrainStage::PretrainId);
    let stage0 = stage0.unwrap_or(&default0);
    require_exists(stage0, "stage-0 checkpoint")?;
    let default1 = final_checkpoint_path(cfg, &cfg.out_dir, TrainStage::Ddgan);
    let source = if random_content {
        DfenSource::RandomContent { stage0 }
    } else {
        let stage1 = stage1.unwrap_or(&default1);
        require_exists(stage1, "stage-1 checkpoint")?;
        DfenSource::Checkpoints { stage1, stage0 }
    };
    let attention = if no_attention {
        AttentionMode::ForcedUnit
    } else {
        AttentionMode::Learned
    };
    let options = DfenOptions {
        source,
        attention,
        out_dir: &cfg.out_dir,
    };
    let ckpt = train_dfen(&train, &net, &manifest, &options)?;
    println!("stage-2 checkpoint {}", ckpt.display());
    Ok(())
}

fn original_labels(manifest: &DatasetManifest) -> Vec<u32> {
    manifest
        .entries()
        .iter()
        .map(|e| manifest.original_label(e.identity).expect("entry label"))
        .collect()
}

/// Loads a split directory written by `degrade` (`query.csv` and
/// `gallery.csv` inside).
fn load_split(dir: &Path) -> anyhow::Result<(DatasetManifest, DatasetManifest)> {
    let query = dir.join("query.csv");
    let gallery = dir.join("gallery.csv");
    require_exists(&query, "query manifest")?;
    require_exists(&gallery, "gallery manifest")?;
    Ok((load_manifest(&query)?, load_manifest(&gallery)?))
}

/// Shared by `evaluate` and `ablate`: extracts features from a stage-2
/// checkpoint, runs the single-shot protocol, and writes the metrics
/// report to `out_path`.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: &Path,
    variant: FeatureVariant,
    attention: AttentionMode,
    out_path: &Path,
) -> anyhow::Result<MetricsReport> {
    require_exists(checkpoint, "checkpoint")?;
    let (models, meta) = load_checkpoint(checkpoint)?;
    if meta.stage != TrainStage::Dfen.tag() {
        return Err(usage(format!(
            "checkpoint {} was written by {}; evaluation needs a {} (stage-2) checkpoint",
            checkpoint.display(),
            meta.stage,
            TrainStage::Dfen.tag()
        )));
    }
    let (query, gallery) = load_split(split)?;
    let report = evaluate_models(cfg, &models, &query, &gallery, variant, attention, checkpoint)?;
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    report.write(out_path)?;
    Ok(report)
}

fn evaluate_models(
    cfg: &ExperimentConfig,
    models: &Models,
    query: &DatasetManifest,
    gallery: &DatasetManifest,
    variant: FeatureVariant,
    attention: AttentionMode,
    checkpoint: &Path,
) -> anyhow::Result<MetricsReport> {
    let mut qf = extract_features(models, query, variant, attention)?;
    let mut gf = extract_features(models, gallery, variant, attention)?;
    // The two manifests relabel identities independently, so matching
    // across them must use the original labels.
    qf.ids = original_labels(query);
    gf.ids = original_labels(gallery);
    let mut rng = derive_rng(cfg.seed, "eval.single-shot", &[]);
    let outcome = single_shot_eval(&qf, &gf, cfg.eval.k, cfg.eval.trials, &mut rng)?;
    Ok(MetricsReport {
        variant: variant.to_string(),
        cmc: outcome.averaged.values,
        map: outcome.mean_map,
        trials: cfg.eval.trials,
        seed: cfg.seed,
        checkpoint: checkpoint.display().to_string(),
    })
}

fn summarize(report: &MetricsReport) -> String {
    let rank = |k: usize| {
        report
            .cmc
            .get(k - 1)
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into())
    };
    format!(
        "rank-1 {}  rank-5 {}  rank-10 {}  mAP {:.3}",
        rank(1),
        rank(5),
        rank(10),
        report.map
    )
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: Option<&Path>,
    variant: FeatureVariant,
    no_attention: bool,
) -> anyhow::Result<()> {
    let default_split = split_dir(&cfg.out_dir);
    let split = split.unwrap_or(&default_split);
    let attention = if no_attention {
        AttentionMode::ForcedUnit
    } else {
        AttentionMode::Learned
    };
    let out_path = cfg.out_dir.join(format!("metrics-{variant}.json"));
    let report = evaluate_checkpoint(cfg, checkpoint, split, variant, attention, &out_path)?;
    println!("{}", summarize(&report));
    println!("metrics written to {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation presets
// ---------------------------------------------------------------------------

/// Trains a stage-0 checkpoint in `dir` unless it already exists.
fn ensure_stage0(
    cfg: &ExperimentConfig,
    net: &NetworkConfig,
    manifest: &DatasetManifest,
    dir: &Path,
) -> anyhow::Result<PathBuf> {
    let target = final_checkpoint_path(cfg, dir, TrainStage::PretrainId);
    if target.exists() {
        println!("reusing {}", target.display());
        return Ok(target);
    }
    let train = cfg.to_train_config(TrainStage::PretrainId)?;
    println!("pretraining identity encoder -> {}", target.display());
    Ok(pretrain_identity_encoder(&train, net, manifest, dir)?)
}

fn ensure_stage1(
    cfg: &ExperimentConfig,
    net: &NetworkConfig,
    manifest: &DatasetManifest,
    stage0: &Path,
    dir: &Path,
) -> anyhow::Result<PathBuf> {
    let target = final_checkpoint_path(cfg, dir, TrainStage::Ddgan);
    if target.exists() {
        println!("reusing {}", target.display());
        return Ok(target);
    }
    let train = cfg.to_train_config(TrainStage::Ddgan)?;
    println!("training decomposition GAN -> {}", target.display());
    Ok(train_ddgan(&train, net, manifest, stage0, dir)?)
}

fn ensure_dfen(
    cfg: &ExperimentConfig,
    net: &NetworkConfig,
    manifest: &DatasetManifest,
    source: DfenSource,
    attention: AttentionMode,
    dir: &Path,
) -> anyhow::Result<PathBuf> {
    let target = final_checkpoint_path(cfg, dir, TrainStage::Dfen);
    if target.exists() {
        println!("reusing {}", target.display());
        return Ok(target);
    }
    let train = cfg.to_train_config(TrainStage::Dfen)?;
    println!("training dual-feature network -> {}", target.display());
    let options = DfenOptions {
        source,
        attention,
        out_dir: dir,
    };
    Ok(train_dfen(&train, net, manifest, &options)?)
}

/// Builds the evaluation split under the ablation root unless present.
fn ensure_split(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    dir: &Path,
) -> anyhow::Result<PathBuf> {
    if dir.join("query.csv").exists() {
        println!("reusing split {}", dir.display());
        return Ok(dir.to_path_buf());
    }
    let mut rng = derive_rng(cfg.seed, "mlr.split", &[]);
    let split = build_mlr_split(manifest, &mut rng, cfg.eval.query_camera, dir)?;
    println!(
        "split written to {} ({} queries, {} gallery)",
        dir.display(),
        split.split.query.len(),
        split.split.gallery.len()
    );
    Ok(dir.to_path_buf())
}

pub fn ablate(cfg: &ExperimentConfig, preset: Preset, data: Option<&Path>) -> anyhow::Result<()> {
    let manifest = load_corpus(cfg, data)?;
    let base = cfg.out_dir.join("ablate");
    let split = ensure_split(cfg, &manifest, &base.join("split"))?;
    let net = cfg.network.build(manifest.num_identities())?;

    // Chains shared between presets: everything except the
    // single-branch-encoder variant trains on the standard network.
    let full_dir = base.join("full");
    let (checkpoint, variant, attention) = match preset {
        Preset::Full | Preset::FInvOnly | Preset::FSenOnly => {
            let s0 = ensure_stage0(cfg, &net, &manifest, &full_dir)?;
            let s1 = ensure_stage1(cfg, &net, &manifest, &s0, &full_dir)?;
            let d = ensure_dfen(
                cfg,
                &net,
                &manifest,
                DfenSource::Checkpoints {
                    stage1: &s1,
                    stage0: &s0,
                },
                AttentionMode::Learned,
                &full_dir,
            )?;
            let variant = match preset {
                Preset::FInvOnly => FeatureVariant::FInv,
                Preset::FSenOnly => FeatureVariant::FSenWeighted,
                _ => FeatureVariant::Fused,
            };
            (d, variant, AttentionMode::Learned)
        }
        Preset::NoAttention => {
            let s0 = ensure_stage0(cfg, &net, &manifest, &full_dir)?;
            let s1 = ensure_stage1(cfg, &net, &manifest, &s0, &full_dir)?;
            let d = ensure_dfen(
                cfg,
                &net,
                &manifest,
                DfenSource::Checkpoints {
                    stage1: &s1,
                    stage0: &s0,
                },
                AttentionMode::ForcedUnit,
                &base.join("no-attention"),
            )?;
            (d, FeatureVariant::Fused, AttentionMode::ForcedUnit)
        }
        Preset::NoDil => {
            // Without the decomposition stage there is no trained
            // degradation discriminator either, so the attention gate
            // has no meaningful cue: skip Stage 1, force unit weights.
            let s0 = ensure_stage0(cfg, &net, &manifest, &full_dir)?;
            let d = ensure_dfen(
                cfg,
                &net,
                &manifest,
                DfenSource::RandomContent { stage0: &s0 },
                AttentionMode::ForcedUnit,
                &base.join("no-dil"),
            )?;
            (d, FeatureVariant::Fused, AttentionMode::ForcedUnit)
        }
        Preset::NoMultiScale => {
            let mut section = cfg.network.clone();
            section.encoder_scales = Some(1);
            let net = section.build(manifest.num_identities())?;
            let dir = base.join("no-multi-scale");
            let s0 = ensure_stage0(cfg, &net, &manifest, &dir)?;
            let s1 = ensure_stage1(cfg, &net, &manifest, &s0, &dir)?;
            let d = ensure_dfen(
                cfg,
                &net,
                &manifest,
                DfenSource::Checkpoints {
                    stage1: &s1,
                    stage0: &s0,
                },
                AttentionMode::Learned,
                &dir,
            )?;
            (d, FeatureVariant::Fused, AttentionMode::Learned)
        }
    };

    let out_path = base.join(format!("{}.metrics.json", preset.name()));
    let report = evaluate_checkpoint(cfg, &checkpoint, &split, variant, attention, &out_path)?;
    println!("{}: {}", preset.name(), summarize(&report));
    println!("metrics written to {}", out_path.display());
    Ok(())
}
