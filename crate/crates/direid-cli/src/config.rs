//! The experiment configuration: a TOML document, dotted-path overrides,
//! and the resolved-config manifest every run writes next to its outputs.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use direid_core::degrade::{Degradation, DegradationKind};
use direid_core::image::ImageGeometry;
use direid_core::losses::LossWeights;
use direid_core::networks::NetworkConfig;
use direid_core::train::{LearningRates, TrainConfig, TrainStage};

/// A mistake in the invocation itself (bad key, bad value, missing
/// input) rather than a failure while running the pipeline. `main`
/// maps these to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Everything a run needs, resolved from the config file plus overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives its generators from it unless a
    /// stage section pins its own.
    pub seed: u64,
    /// Output root for checkpoints, logs, splits, and reports.
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub degradation: DegradationSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            network: NetworkSection::default(),
            degradation: DegradationSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Corpus directory; `generate-data` writes it, everything else
    /// reads `manifest.csv` inside it.
    pub root: PathBuf,
    pub ids: usize,
    pub per_id: usize,
    pub cameras: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: PathBuf::from("data/corpus"),
            ids: 16,
            per_id: 6,
            cameras: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// `"desk"` (64×32 images, full widths) or `"tiny"` (16×8,
    /// gradient-check scale).
    pub preset: String,
    pub content_channels: Option<usize>,
    pub degradation_dim: Option<usize>,
    pub sensitive_dim: Option<usize>,
    pub cue_dim: Option<usize>,
    pub encoder_scales: Option<usize>,
    pub discriminator_scales: Option<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            preset: "desk".into(),
            content_channels: None,
            degradation_dim: None,
            sensitive_dim: None,
            cue_dim: None,
            encoder_scales: None,
            discriminator_scales: None,
        }
    }
}

impl NetworkSection {
    fn preset_config(&self, num_identities: usize) -> anyhow::Result<NetworkConfig> {
        match self.preset.as_str() {
            "desk" => Ok(NetworkConfig::desk(num_identities)),
            "tiny" => Ok(NetworkConfig::tiny(num_identities)),
            other => Err(usage(format!(
                "network.preset: unknown preset '{other}' (expected 'desk' or 'tiny')"
            ))),
        }
    }

    /// The image geometry the preset trains on.
    pub fn geometry(&self) -> anyhow::Result<ImageGeometry> {
        Ok(self.preset_config(1)?.geometry)
    }

    /// The full network configuration for a corpus with
    /// `num_identities` classes.
    pub fn build(&self, num_identities: usize) -> anyhow::Result<NetworkConfig> {
        let mut cfg = self.preset_config(num_identities)?;
        if let Some(v) = self.content_channels {
            cfg.content_channels = v;
        }
        if let Some(v) = self.degradation_dim {
            cfg.degradation_dim = v;
        }
        if let Some(v) = self.sensitive_dim {
            cfg.sensitive_dim = v;
        }
        if let Some(v) = self.cue_dim {
            cfg.cue_dim = v;
        }
        if let Some(v) = self.encoder_scales {
            cfg.encoder_scales = v;
        }
        if let Some(v) = self.discriminator_scales {
            cfg.discriminator_scales = v;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSection {
    /// `"illumination"` or `"resolution"`.
    pub kind: String,
    /// Sampling range bounds; the kind's default range when omitted.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl Default for DegradationSection {
    fn default() -> Self {
        DegradationSection {
            kind: "illumination".into(),
            lo: None,
            hi: None,
        }
    }
}

impl DegradationSection {
    pub fn build(&self) -> anyhow::Result<Degradation> {
        let kind = match self.kind.to_ascii_lowercase().as_str() {
            "illumination" => DegradationKind::Illumination,
            "resolution" => DegradationKind::Resolution,
            other => {
                return Err(usage(format!(
                    "degradation.kind: unknown kind '{other}' (expected 'illumination' or 'resolution')"
                )))
            }
        };
        let (dlo, dhi) = kind.default_range();
        Ok(Degradation {
            kind,
            param_range: (self.lo.unwrap_or(dlo), self.hi.unwrap_or(dhi)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Overrides the global seed for this stage only.
    pub seed: Option<u64>,
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection {
            iterations: 100,
            batch_size: 8,
            checkpoint_every: 1000,
            seed: None,
        }
    }
}

fn stage_defaults(iterations: usize) -> StageSection {
    StageSection {
        iterations,
        ..StageSection::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub pretrain: StageSection,
    pub ddgan: StageSection,
    pub dfen: StageSection,
    pub learning_rates: LearningRates,
    pub weights: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pretrain: stage_defaults(400),
            ddgan: stage_defaults(600),
            dfen: stage_defaults(400),
            learning_rates: LearningRates::default(),
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// CMC depth (ranks 1..=k).
    pub k: usize,
    /// Single-shot gallery resamplings.
    pub trials: usize,
    /// Camera whose images become the degraded query set; lowest camera
    /// id when omitted.
    pub query_camera: Option<u32>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 10,
            trials: 10,
            query_camera: None,
        }
    }
}

impl ExperimentConfig {
    /// The stage section for a training stage, as a core `TrainConfig`.
    pub fn to_train_config(&self, stage: TrainStage) -> anyhow::Result<TrainConfig> {
        let section = match stage {
            TrainStage::PretrainId => &self.train.pretrain,
            TrainStage::Ddgan => &self.train.ddgan,
            TrainStage::Dfen => &self.train.dfen,
        };
        let cfg = TrainConfig {
            stage,
            batch_size: section.batch_size,
            iterations: section.iterations,
            learning_rates: self.train.learning_rates,
            seed: section.seed.unwrap_or(self.seed),
            degradation: self.degradation.build()?,
            weights: self.train.weights,
            checkpoint_every: section.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads the config file (defaults when absent) and applies the
/// `--set key.path=value` overrides in order.
pub fn load(path: Option<&Path>, sets: &[String]) -> anyhow::Result<ExperimentConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    value
        .try_into()
        .map_err(|e| usage(format!("invalid configuration: {e}")))
}

fn apply_set(root: &mut toml::Value, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--set '{spec}': expected key.path=value")))?;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("--set '{spec}': empty key segment")));
    }
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| usage(format!("--set {path}: '{part}' is not inside a table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let last = parts[parts.len() - 1];
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| usage(format!("--set {path}: '{last}' is not inside a table")))?;
    table.insert(last.to_string(), parse_scalar(raw));
    Ok(())
}

/// Parses an override value with TOML scalar syntax, falling back to a
/// bare string so `--set degradation.kind=resolution` needs no quotes.
fn parse_scalar(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    toml::from_str::<Holder>(&format!("v = {raw}"))
        .map(|h| h.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// The reproduction manifest: the exact invocation plus the fully
/// resolved configuration it ran with.
#[derive(Serialize)]
struct ResolvedRun<'a> {
    command: &'a str,
    argv: Vec<String>,
    config: &'a ExperimentConfig,
}

/// Writes `resolved-<command>.toml` under the output root and returns
/// its path.
pub fn write_resolved(
    cfg: &ExperimentConfig,
    command: &str,
    out_dir: &Path,
) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let doc = ResolvedRun {
        command,
        argv: std::env::args().collect(),
        config: cfg,
    };
    let text = toml::to_string_pretty(&doc).context("serializing resolved config")?;
    let path = out_dir.join(format!("resolved-{command}.toml"));
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Fails when the path is missing, so mistakes surface before any
/// training time is spent.
pub fn require_exists(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

pub fn manifest_path(dataset_root: &Path) -> PathBuf {
    dataset_root.join("manifest.csv")
}

/// Maps an error chain to the process exit code: 2 for usage errors,
/// 1 for pipeline failures.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.chain().any(|c| c.is::<UsageError>()) {
        2
    } else {
        1
    }
}
