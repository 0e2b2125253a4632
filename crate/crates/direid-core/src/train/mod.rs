//! Three-stage optimization schedule.
//!
//! Stage 0 pretrains the identity encoder with a classification head and
//! batch-hard triplets. Stage 1 trains the decomposition GAN by strictly
//! alternating a self-degradation phase and a cross-degradation phase,
//! one discriminator update then one generator update per phase. Stage 2
//! trains the dual-feature network: three classifier heads plus the
//! attention gate, with the encoders fine-tuning at a reduced rate and
//! the degradation discriminator frozen.
//!
//! Every batch is a pure function of `(seed, iteration)`, so resuming
//! from a checkpoint replays the exact remaining schedule.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::degrade::{sample_degradation_param, Degradation, SelfDegradedPair};
use crate::error::{Error, Result};
use crate::eval::AttentionMode;
use crate::image::ImageTensor;
use crate::losses::LossWeights;
use crate::networks::{
    load_checkpoint, save_checkpoint, CheckpointMeta, Models, NetworkConfig,
};
use crate::params::AdamConfig;
use crate::rng::derive_rng;

mod ddgan;
mod dfen;

pub use ddgan::{
    cross_discriminator_gradients, cross_discriminator_objective, cross_generator_gradients,
    cross_generator_objective, cross_generator_objective_with_identity_decoder,
    cross_generator_params, discriminator_params, self_discriminator_gradients,
    self_discriminator_objective, self_generator_gradients, self_generator_objective,
    self_generator_params, DdganTrainer,
};
pub use dfen::{dfen_gradients, dfen_objective, dfen_trainable, DfenTrainer};

/// Which stage a `TrainConfig` drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    PretrainId,
    Ddgan,
    Dfen,
}

impl TrainStage {
    /// Stage index used in checkpoint file names.
    pub fn index(self) -> u8 {
        match self {
            TrainStage::PretrainId => 0,
            TrainStage::Ddgan => 1,
            TrainStage::Dfen => 2,
        }
    }

    /// Tag stored in checkpoint metadata.
    pub fn tag(self) -> &'static str {
        match self {
            TrainStage::PretrainId => "stage0",
            TrainStage::Ddgan => "stage1",
            TrainStage::Dfen => "stage2",
        }
    }
}

/// Base learning rates per parameter group.
///
/// `finetune_scale` multiplies the classifier rate for the encoders that
/// fine-tune during Stage 2; setting it to `0.0` freezes them outright.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub gan: f64,
    pub classifier: f64,
    pub finetune_scale: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            gan: 2e-4,
            classifier: 3e-4,
            finetune_scale: 0.1,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gan", self.gan),
            ("classifier", self.classifier),
            ("finetune_scale", self.finetune_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "learning rate {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: TrainStage,
    /// Images per batch. Phases that pair images use `batch_size / 2`
    /// pairs, so the image budget per step stays comparable across
    /// stages.
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub seed: u64,
    pub degradation: Degradation,
    pub weights: LossWeights,
    /// A checkpoint is written every this many iterations; the final
    /// state is always written.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// A sound default configuration for the given stage.
    pub fn for_stage(stage: TrainStage) -> Self {
        TrainConfig {
            stage,
            batch_size: 8,
            iterations: 100,
            learning_rates: LearningRates::default(),
            seed: 7,
            degradation: Degradation::with_default_range(
                crate::degrade::DegradationKind::Illumination,
            ),
            weights: LossWeights::default(),
            checkpoint_every: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.learning_rates.validate()?;
        self.weights.validate()?;
        if self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even for paired sampling, got {}",
                self.batch_size
            )));
        }
        let min = match self.stage {
            // Triplet mining needs ≥2 identities with ≥2 instances each.
            TrainStage::PretrainId | TrainStage::Dfen => 4,
            TrainStage::Ddgan => 2,
        };
        if self.batch_size < min {
            return Err(Error::Config(format!(
                "batch_size {} is below the stage minimum {min}",
                self.batch_size
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config(
                "checkpoint_every must be at least 1".into(),
            ));
        }
        let (lo, hi) = self.degradation.param_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!(
                "degradation parameter range ({lo}, {hi}) is not a valid interval"
            )));
        }
        Ok(())
    }
}

/// A real image pair for the cross-degradation phase. Identities are
/// unconstrained between the two members; labels feed the content
/// classifier only.
#[derive(Debug, Clone)]
pub struct RealPair {
    pub x_i: ImageTensor,
    pub y_i: u32,
    pub x_k: ImageTensor,
    pub y_k: u32,
}

/// One alternation's worth of data: self-degraded pairs for the S phase
/// and genuine image pairs for the C phase.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub self_pairs: Vec<SelfDegradedPair>,
    pub real_pairs: Vec<RealPair>,
}

impl PairBatch {
    /// Auxiliary real images for the self phase's reality loss: the first
    /// member of each real pair.
    pub fn aux_reals(&self) -> Vec<&ImageTensor> {
        self.real_pairs.iter().map(|p| &p.x_i).collect()
    }
}

/// A labeled image batch for the classifier stages.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<u32>,
}

impl LabeledBatch {
    pub fn image_refs(&self) -> Vec<&ImageTensor> {
        self.images.iter().collect()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// Draws `p` distinct identities, then `k` instances of each (distinct
/// manifest rows where the identity has enough images).
fn sample_pk_rows(
    data: &DatasetManifest,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let num_ids = data.num_identities();
    if p > num_ids {
        return Err(Error::Sampler(format!(
            "batch needs {p} distinct identities but the corpus has {num_ids}"
        )));
    }
    let by_identity = data.indices_by_identity();
    // Partial Fisher-Yates over the identity list.
    let mut ids: Vec<usize> = (0..num_ids).collect();
    for t in 0..p {
        let j = t + rng.random_range(0..num_ids - t);
        ids.swap(t, j);
    }
    let mut rows = Vec::with_capacity(p * k);
    for &id in &ids[..p] {
        let pool = &by_identity[id];
        if pool.len() >= k {
            // Distinct draws via a partial shuffle of the pool indices.
            let mut order: Vec<usize> = (0..pool.len()).collect();
            for t in 0..k {
                let j = t + rng.random_range(0..order.len() - t);
                order.swap(t, j);
            }
            rows.extend(order[..k].iter().map(|&o| pool[o]));
        } else {
            // Too few images: repeat draws rather than fail.
            for _ in 0..k {
                rows.push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    Ok(rows)
}

/// Samples one alternation's data: `batch_size / 2` self-degraded pairs
/// (uniform image draws, fresh degradation parameters) and
/// `batch_size / 2` real pairs from a P×K identity sample.
pub fn sample_pair_batch(
    data: &DatasetManifest,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    if data.is_empty() {
        return Err(Error::Sampler("cannot sample from an empty corpus".into()));
    }
    let pairs = cfg.batch_size / 2;
    let mut self_pairs = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let idx = rng.random_range(0..data.len());
        let image = data.load_image(idx)?;
        let identity = data.entries()[idx].identity;
        let param = sample_degradation_param(&cfg.degradation, rng);
        self_pairs.push(SelfDegradedPair::new(
            image,
            identity,
            cfg.degradation.kind,
            param,
        )?);
    }

    // P identities × K=2 instances, shuffled, then paired off.
    let p = pairs.max(1);
    let mut rows = sample_pk_rows(data, p, 2, rng)?;
    for t in 0..rows.len() {
        let j = t + rng.random_range(0..rows.len() - t);
        rows.swap(t, j);
    }
    let mut real_pairs = Vec::with_capacity(pairs);
    for chunk in rows.chunks(2).take(pairs) {
        let (a, b) = (chunk[0], chunk[1]);
        real_pairs.push(RealPair {
            x_i: data.load_image(a)?,
            y_i: data.entries()[a].identity,
            x_k: data.load_image(b)?,
            y_k: data.entries()[b].identity,
        });
    }
    Ok(PairBatch {
        self_pairs,
        real_pairs,
    })
}

/// Samples a labeled P×K batch (K = 2) for the classifier stages.
pub fn sample_labeled_batch(
    data: &DatasetManifest,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledBatch> {
    if data.is_empty() {
        return Err(Error::Sampler("cannot sample from an empty corpus".into()));
    }
    let rows = sample_pk_rows(data, batch_size / 2, 2, rng)?;
    let mut images = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for idx in rows {
        images.push(data.load_image(idx)?);
        labels.push(data.entries()[idx].identity);
    }
    Ok(LabeledBatch { images, labels })
}

/// Score comparison backing one cross-phase ranking pair, as logged.
/// `gamma` is `0` when the scores tied and the pair was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegPairAudit {
    pub score_i: f64,
    pub score_k: f64,
    pub gamma: i8,
}

/// Loss values from one optimization step.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    /// Term name → value; exactly the terms of the phase's objective.
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    /// Cross phase only: ranking pairs skipped because of tied scores.
    pub deg_skipped: usize,
    /// Cross phase only: the compared scores and resulting rank labels.
    pub deg_audit: Vec<DegPairAudit>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub iteration: u64,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deg_skipped: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deg_audit: Vec<DegPairAudit>,
}

impl StepRecord {
    fn from_breakdown(phase: &str, iteration: u64, b: &LossBreakdown) -> Self {
        StepRecord {
            phase: phase.to_string(),
            iteration,
            terms: b.terms.clone(),
            total: b.total,
            deg_skipped: if phase == "cross" {
                Some(b.deg_skipped)
            } else {
                None
            },
            deg_audit: b.deg_audit.clone(),
        }
    }
}

/// Line-delimited JSON log, one record per step.
pub struct TrainLog {
    writer: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

/// Path of a stage's line-delimited JSON log inside `out_dir`.
pub fn train_log_path(out_dir: &Path, stage: TrainStage) -> PathBuf {
    out_dir.join(format!("{}_log.jsonl", stage.tag()))
}

impl TrainLog {
    /// Opens (appending) the log for a stage inside `out_dir`.
    pub fn open(out_dir: &Path, stage: TrainStage) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = train_log_path(out_dir, stage);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(TrainLog {
            writer: std::io::BufWriter::new(file),
            path,
        })
    }

    pub fn record(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::State(format!("log serialization: {e}")))?;
        writeln!(self.writer, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parses a line-delimited JSON training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::State(format!("log line parse: {e}")))
        })
        .collect()
}

/// Checkpoint file name for a stage at an iteration count.
pub fn checkpoint_name(stage: TrainStage, iteration: u64) -> String {
    format!("{}_iter{iteration}.ckpt", stage.tag())
}

fn require_checkpoint(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::State(format!(
            "missing {what} checkpoint at {}",
            path.display()
        )));
    }
    Ok(())
}

fn require_stage(meta: &CheckpointMeta, path: &Path, expected: TrainStage) -> Result<()> {
    if meta.stage != expected.tag() {
        return Err(Error::State(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            meta.stage,
            expected.tag()
        )));
    }
    Ok(())
}

fn expect_stage(cfg: &TrainConfig, stage: TrainStage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "configuration is for {:?}, this runner trains {:?}",
            cfg.stage, stage
        )));
    }
    Ok(())
}

/// Copies the identity encoder (and its pretraining head) from `source`
/// into `target`, optimizer state included.
fn adopt_identity_encoder(target: &mut Models, source: &Models) -> Result<()> {
    let names: Vec<String> = source
        .store
        .names()
        .into_iter()
        .filter(|n| n.starts_with("eid.") || n.starts_with("eid_cls."))
        .map(str::to_string)
        .collect();
    for name in names {
        let value = source.store.value(&name)?.clone();
        target.store.set_value(&name, value)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 0: identity encoder pretraining
// ---------------------------------------------------------------------------

/// Trains `E_id` plus its classification head with cross-entropy and
/// batch-hard triplets; writes `stage0_iter{N}.ckpt` checkpoints and a
/// JSONL log into `out_dir`, returning the final checkpoint path.
pub fn pretrain_identity_encoder(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    data: &DatasetManifest,
    out_dir: &Path,
) -> Result<PathBuf> {
    expect_stage(cfg, TrainStage::PretrainId)?;
    cfg.validate()?;
    let mut models = Models::new(net.clone(), derive_seed(cfg.seed, "stage0.init"))?;
    let adam = AdamConfig::default();
    let mut log = TrainLog::open(out_dir, TrainStage::PretrainId)?;
    let lr = cfg.learning_rates.classifier;

    for iter in 0..cfg.iterations as u64 {
        let mut rng = derive_rng(cfg.seed, "stage0.batch", &[iter]);
        let batch = sample_labeled_batch(data, cfg.batch_size, &mut rng)?;
        let breakdown = pretrain_step(&mut models, &batch, cfg, &adam, lr)?;
        log.record(&StepRecord::from_breakdown("pretrain", iter, &breakdown))?;
        maybe_checkpoint(&models, cfg, TrainStage::PretrainId, iter, out_dir)?;
    }
    final_checkpoint(&models, cfg, TrainStage::PretrainId, out_dir)
}

fn pretrain_step(
    models: &mut Models,
    batch: &LabeledBatch,
    cfg: &TrainConfig,
    adam: &AdamConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let trainable = |name: &str| name.starts_with("eid.") || name.starts_with("eid_cls.");
    let mut tape = crate::autodiff::Tape::new();
    let mut fwd = models.forward(&mut tape, trainable);
    let x = fwd.input(&batch.image_refs())?;
    let emb = fwd.identity_embedding(x);
    let logits = fwd.identity_logits(emb);
    let labels = batch.label_indices();
    let ce = crate::losses::identification_loss(fwd.tape, logits, &labels)?;
    let trip =
        crate::losses::triplet_hard_loss(fwd.tape, emb, &labels, cfg.weights.triplet_margin)?;
    let total = fwd.tape.add(ce, trip);
    let ce_v = tape_scalar(fwd.tape, ce);
    let trip_v = tape_scalar(fwd.tape, trip);
    let total_v = tape_scalar(fwd.tape, total);
    let grad_list = fwd.tape.backward(total);
    let grads = fwd.gradients(&grad_list);
    models.store.adam_step(&grads, adam, |_| lr)?;
    let mut terms = BTreeMap::new();
    terms.insert("ce".to_string(), ce_v);
    terms.insert("triplet".to_string(), trip_v);
    Ok(LossBreakdown {
        terms,
        total: total_v,
        ..LossBreakdown::default()
    })
}

/// Training-set classification accuracy of the pretrained identity head.
pub fn classification_accuracy(models: &Models, data: &DatasetManifest) -> Result<f64> {
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(16) {
        let images: Vec<ImageTensor> = chunk
            .iter()
            .map(|&i| data.load_image(i))
            .collect::<Result<_>>()?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let mut tape = crate::autodiff::Tape::new();
        let mut fwd = models.forward(&mut tape, |_| false);
        let x = fwd.input(&refs)?;
        let emb = fwd.identity_embedding(x);
        let logits = fwd.identity_logits(emb);
        let values = fwd
            .tape
            .value(logits)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("logit rank");
        for (row, &idx) in chunk.iter().enumerate() {
            let predicted = values
                .row(row)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("non-empty logits");
            if predicted == data.entries()[idx].identity as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Stage 1: DDGAN
// ---------------------------------------------------------------------------

/// Trains the decomposition GAN from a Stage-0 checkpoint, alternating
/// self and cross phases strictly (S, C, S, C, …). Returns the final
/// checkpoint path.
pub fn train_ddgan(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    data: &DatasetManifest,
    stage0: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    expect_stage(cfg, TrainStage::Ddgan)?;
    cfg.validate()?;
    require_checkpoint(stage0, "stage-0")?;
    let (stage0_models, meta0) = Models::load_compatible(stage0, net)?;
    require_stage(&meta0, stage0, TrainStage::PretrainId)?;
    let mut models = Models::new(net.clone(), derive_seed(cfg.seed, "stage1.init"))?;
    adopt_identity_encoder(&mut models, &stage0_models)?;
    run_ddgan(models, 0, cfg, data, out_dir)
}

/// Resumes Stage-1 training from one of its own checkpoints.
pub fn resume_ddgan(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    data: &DatasetManifest,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    expect_stage(cfg, TrainStage::Ddgan)?;
    cfg.validate()?;
    require_checkpoint(checkpoint, "stage-1")?;
    let (models, meta) = Models::load_compatible(checkpoint, net)?;
    require_stage(&meta, checkpoint, TrainStage::Ddgan)?;
    run_ddgan(models, meta.iteration, cfg, data, out_dir)
}

fn run_ddgan(
    models: Models,
    start: u64,
    cfg: &TrainConfig,
    data: &DatasetManifest,
    out_dir: &Path,
) -> Result<PathBuf> {
    let mut trainer = DdganTrainer::new(models, cfg.clone())?;
    let mut log = TrainLog::open(out_dir, TrainStage::Ddgan)?;
    for iter in start..cfg.iterations as u64 {
        let mut rng = derive_rng(cfg.seed, "stage1.batch", &[iter]);
        let batch = sample_pair_batch(data, cfg, &mut rng)?;
        let aux: Vec<&ImageTensor> = batch.aux_reals();
        let self_report = trainer.self_step(&batch.self_pairs, &aux)?;
        log.record(&StepRecord::from_breakdown("self", iter, &self_report))?;
        let cross_report = trainer.cross_step(&batch.real_pairs)?;
        log.record(&StepRecord::from_breakdown("cross", iter, &cross_report))?;
        maybe_checkpoint(&trainer.models, cfg, TrainStage::Ddgan, iter, out_dir)?;
    }
    final_checkpoint(&trainer.models, cfg, TrainStage::Ddgan, out_dir)
}

// ---------------------------------------------------------------------------
// Stage 2: DFEN
// ---------------------------------------------------------------------------

/// Where Stage 2 takes its starting weights from.
pub enum DfenSource<'a> {
    /// The normal pipeline: Stage-1 weights for the content encoder and
    /// degradation discriminator, Stage-0 weights for the identity
    /// encoder.
    Checkpoints { stage1: &'a Path, stage0: &'a Path },
    /// Ablation: skip Stage 1 entirely — random content encoder, only
    /// the identity encoder is pretrained.
    RandomContent { stage0: &'a Path },
}

/// Stage-2 options beyond the train config.
pub struct DfenOptions<'a> {
    pub source: DfenSource<'a>,
    /// `ForcedUnit` disables the attention gate (weights ≡ 1) for the
    /// corresponding ablation.
    pub attention: AttentionMode,
    pub out_dir: &'a Path,
}

/// Trains the dual-feature identity network. Returns the final
/// checkpoint path.
pub fn train_dfen(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    data: &DatasetManifest,
    options: &DfenOptions,
) -> Result<PathBuf> {
    expect_stage(cfg, TrainStage::Dfen)?;
    cfg.validate()?;
    let models = match options.source {
        DfenSource::Checkpoints { stage1, stage0 } => {
            require_checkpoint(stage1, "stage-1")?;
            require_checkpoint(stage0, "stage-0")?;
            let (mut models, meta1) = Models::load_compatible(stage1, net)?;
            require_stage(&meta1, stage1, TrainStage::Ddgan)?;
            let (stage0_models, meta0) = Models::load_compatible(stage0, net)?;
            require_stage(&meta0, stage0, TrainStage::PretrainId)?;
            adopt_identity_encoder(&mut models, &stage0_models)?;
            models
        }
        DfenSource::RandomContent { stage0 } => {
            require_checkpoint(stage0, "stage-0")?;
            let mut models = Models::new(net.clone(), derive_seed(cfg.seed, "stage2.init"))?;
            let (stage0_models, meta0) = Models::load_compatible(stage0, net)?;
            require_stage(&meta0, stage0, TrainStage::PretrainId)?;
            adopt_identity_encoder(&mut models, &stage0_models)?;
            models
        }
    };

    let mut trainer = DfenTrainer::new(models, cfg.clone(), options.attention)?;
    let mut log = TrainLog::open(options.out_dir, TrainStage::Dfen)?;
    for iter in 0..cfg.iterations as u64 {
        let mut rng = derive_rng(cfg.seed, "stage2.batch", &[iter]);
        let mut batch = sample_labeled_batch(data, cfg.batch_size, &mut rng)?;
        degrade_half(&mut batch, cfg, &mut rng)?;
        let breakdown = trainer.step(&batch)?;
        log.record(&StepRecord::from_breakdown("dfen", iter, &breakdown))?;
        maybe_checkpoint(&trainer.models, cfg, TrainStage::Dfen, iter, options.out_dir)?;
    }
    final_checkpoint(&trainer.models, cfg, TrainStage::Dfen, options.out_dir)
}

/// Applies the configured degradation to each batch member with
/// probability one half, so the classifiers see clean and corrupted
/// views of the same identities.
fn degrade_half(batch: &mut LabeledBatch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    for image in &mut batch.images {
        if rng.random_range(0.0..1.0) < 0.5 {
            let param = sample_degradation_param(&cfg.degradation, rng);
            *image = crate::degrade::apply_degradation(cfg.degradation.kind, image, param)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn derive_seed(root: u64, tag: &str) -> u64 {
    crate::rng::mix_seed(root, tag, &[])
}

fn tape_scalar(tape: &crate::autodiff::Tape, v: crate::autodiff::Var) -> f64 {
    tape.scalar_value(v)
}

fn maybe_checkpoint(
    models: &Models,
    cfg: &TrainConfig,
    stage: TrainStage,
    iter: u64,
    out_dir: &Path,
) -> Result<()> {
    let done = iter + 1;
    if done % cfg.checkpoint_every as u64 == 0 && done < cfg.iterations as u64 {
        let path = out_dir.join(checkpoint_name(stage, done));
        let meta = CheckpointMeta {
            stage: stage.tag().to_string(),
            iteration: done,
        };
        save_checkpoint(models, &meta, &path)?;
    }
    Ok(())
}

fn final_checkpoint(
    models: &Models,
    cfg: &TrainConfig,
    stage: TrainStage,
    out_dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(checkpoint_name(stage, cfg.iterations as u64));
    let meta = CheckpointMeta {
        stage: stage.tag().to_string(),
        iteration: cfg.iterations as u64,
    };
    save_checkpoint(models, &meta, &path)?;
    Ok(path)
}

/// Loads a checkpoint written by any stage runner.
pub fn load_stage_checkpoint(path: &Path) -> Result<(Models, CheckpointMeta)> {
    load_checkpoint(path)
}
