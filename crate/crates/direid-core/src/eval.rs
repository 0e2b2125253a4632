//! Retrieval evaluation: feature extraction, distances, CMC, and mAP.
//!
//! The protocol is the standard one for person retrieval: queries are
//! ranked against the gallery by Euclidean distance on L2-normalized
//! features; gallery entries sharing both identity and camera with the
//! query are excluded; queries left without a valid positive are dropped
//! from the denominators. Ties in distance break by gallery index, so
//! every number here is reproducible bit-for-bit.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::Models;

/// Which representation to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    /// Fused representation: `concat(f_inv, f_sen ⊙ weights)`.
    Fused,
    /// Invariant half only.
    FInv,
    /// Attention-weighted sensitive half only.
    FSenWeighted,
}

impl std::fmt::Display for FeatureVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            FeatureVariant::Fused => "fused",
            FeatureVariant::FInv => "f_inv",
            FeatureVariant::FSenWeighted => "f_sen_weighted",
        };
        f.write_str(name)
    }
}

/// Whether the attention head is consulted during extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// Weights come from the learned head.
    #[default]
    Learned,
    /// Weights forced to 1 (the "without attention" configuration).
    ForcedUnit,
}

/// Features for one manifest, row-aligned with identity and camera labels.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub ids: Vec<u32>,
    pub cams: Vec<u32>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let values = Array2::from_shape_fn((rows.len(), self.dim()), |(i, j)| {
            self.values[[rows[i], j]]
        });
        FeatureMatrix {
            values,
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            cams: rows.iter().map(|&r| self.cams[r]).collect(),
        }
    }
}

/// A CMC curve over ranks 1..=K.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub values: Vec<f64>,
}

impl CmcCurve {
    /// Value at `rank` (1-based).
    pub fn at(&self, rank: usize) -> f64 {
        self.values[rank - 1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

const EXTRACT_CHUNK: usize = 16;

/// Evaluation-mode embeddings for every manifest row, without the final
/// normalization. Exposed so audits can inspect raw coordinates; ranking
/// uses [`extract_features`].
pub fn extract_raw_features(
    models: &Models,
    manifest: &DatasetManifest,
    variant: FeatureVariant,
    attention: AttentionMode,
) -> Result<FeatureMatrix> {
    let cfg = models.config();
    let dim = match variant {
        FeatureVariant::Fused => cfg.fused_dim(),
        FeatureVariant::FInv => cfg.content_channels,
        FeatureVariant::FSenWeighted => cfg.sensitive_dim,
    };
    let mut values = Array2::<f64>::zeros((manifest.len(), dim));
    let mut ids = Vec::with_capacity(manifest.len());
    let mut cams = Vec::with_capacity(manifest.len());
    for entry in manifest.entries() {
        ids.push(entry.identity);
        cams.push(entry.camera);
    }
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let images: Vec<ImageTensor> = chunk
            .iter()
            .map(|&i| manifest.load_image(i))
            .collect::<Result<_>>()?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let mut tape = crate::autodiff::Tape::new();
        let mut fwd = models.forward(&mut tape, |_| false);
        let input = fwd.input(&refs)?;
        let feature = match variant {
            FeatureVariant::FInv => fwd.encode_content(input).pooled,
            FeatureVariant::FSenWeighted => {
                let emb = fwd.identity_embedding(input);
                weighted_sensitive(&mut fwd, input, emb, attention)
            }
            FeatureVariant::Fused => {
                let pooled = fwd.encode_content(input).pooled;
                let emb = fwd.identity_embedding(input);
                let weighted = weighted_sensitive(&mut fwd, input, emb, attention);
                fwd.tape.concat_cols(&[pooled, weighted])
            }
        };
        let out = fwd
            .tape
            .value(feature)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("feature rank");
        for (row, &i) in chunk.iter().enumerate() {
            values.row_mut(i).assign(&out.row(row));
        }
    }
    Ok(FeatureMatrix { values, ids, cams })
}

pub(crate) fn weighted_sensitive(
    fwd: &mut crate::networks::Forward,
    input: crate::autodiff::Var,
    emb: crate::autodiff::Var,
    attention: AttentionMode,
) -> crate::autodiff::Var {
    match attention {
        AttentionMode::ForcedUnit => emb,
        AttentionMode::Learned => {
            let deg = fwd.degradation_forward(input);
            let weights = fwd.attention(deg.cue);
            fwd.tape.mul(emb, weights)
        }
    }
}

/// L2-normalizes each row in place. Rows with negligible norm are left
/// untouched rather than divided into garbage.
pub fn normalize_rows(values: &mut Array2<f64>) {
    for mut row in values.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Evaluation-mode, L2-normalized features for every manifest row.
pub fn extract_features(
    models: &Models,
    manifest: &DatasetManifest,
    variant: FeatureVariant,
    attention: AttentionMode,
) -> Result<FeatureMatrix> {
    let mut features = extract_raw_features(models, manifest, variant, attention)?;
    normalize_rows(&mut features.values);
    Ok(features)
}

/// Pairwise Euclidean distances, queries by rows.
pub fn distance_matrix(q: &FeatureMatrix, g: &FeatureMatrix) -> Result<Array2<f64>> {
    if q.dim() != g.dim() {
        return Err(Error::shape(
            "distance matrix",
            format!("gallery dim {}", q.dim()),
            format!("dim {}", g.dim()),
        ));
    }
    let cross = q.values.dot(&g.values.t());
    let qn: Array1<f64> = q.values.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gn: Array1<f64> = g.values.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut dist = Array2::zeros((q.rows(), g.rows()));
    for i in 0..q.rows() {
        for j in 0..g.rows() {
            let sq = qn[i] + gn[j] - 2.0 * cross[[i, j]];
            dist[[i, j]] = sq.max(0.0).sqrt();
        }
    }
    Ok(dist)
}

fn check_protocol_dims(
    dist: &Array2<f64>,
    q_ids: &[u32],
    g_ids: &[u32],
    q_cams: &[u32],
    g_cams: &[u32],
) -> Result<()> {
    let (nq, ng) = dist.dim();
    if q_ids.len() != nq || q_cams.len() != nq {
        return Err(Error::shape(
            "retrieval protocol",
            format!("{nq} query labels"),
            format!("{} ids, {} cams", q_ids.len(), q_cams.len()),
        ));
    }
    if g_ids.len() != ng || g_cams.len() != ng {
        return Err(Error::shape(
            "retrieval protocol",
            format!("{ng} gallery labels"),
            format!("{} ids, {} cams", g_ids.len(), g_cams.len()),
        ));
    }
    Ok(())
}

/// Gallery order for one query after camera exclusion: indices sorted by
/// (distance, gallery index).
fn ranked_gallery(
    dist_row: ndarray::ArrayView1<f64>,
    q_id: u32,
    q_cam: u32,
    g_ids: &[u32],
    g_cams: &[u32],
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g_ids.len())
        .filter(|&j| !(g_ids[j] == q_id && g_cams[j] == q_cam))
        .collect();
    order.sort_by(|&a, &b| {
        dist_row[a]
            .partial_cmp(&dist_row[b])
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    order
}

/// Cumulative match characteristic over ranks 1..=K.
pub fn cmc(
    dist: &Array2<f64>,
    q_ids: &[u32],
    g_ids: &[u32],
    q_cams: &[u32],
    g_cams: &[u32],
    k: usize,
) -> Result<CmcCurve> {
    check_protocol_dims(dist, q_ids, g_ids, q_cams, g_cams)?;
    if k == 0 {
        return Err(Error::Parameter {
            name: "k",
            reason: "CMC needs at least rank 1".into(),
        });
    }
    let mut hits = vec![0usize; k];
    let mut valid_queries = 0usize;
    for (qi, (&q_id, &q_cam)) in q_ids.iter().zip(q_cams).enumerate() {
        let order = ranked_gallery(dist.row(qi), q_id, q_cam, g_ids, g_cams);
        let first_correct = order.iter().position(|&j| g_ids[j] == q_id);
        match first_correct {
            None => continue, // no valid positive: query dropped
            Some(pos) => {
                valid_queries += 1;
                if pos < k {
                    hits[pos] += 1;
                }
            }
        }
    }
    if valid_queries == 0 {
        return Err(Error::Protocol(
            "every query lacks a valid gallery positive".into(),
        ));
    }
    let mut values = Vec::with_capacity(k);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        values.push(acc as f64 / valid_queries as f64);
    }
    Ok(CmcCurve { values })
}

/// Mean average precision under the same exclusion and tie rules.
pub fn mean_average_precision(
    dist: &Array2<f64>,
    q_ids: &[u32],
    g_ids: &[u32],
    q_cams: &[u32],
    g_cams: &[u32],
) -> Result<f64> {
    check_protocol_dims(dist, q_ids, g_ids, q_cams, g_cams)?;
    let mut ap_sum = 0.0;
    let mut valid_queries = 0usize;
    for (qi, (&q_id, &q_cam)) in q_ids.iter().zip(q_cams).enumerate() {
        let order = ranked_gallery(dist.row(qi), q_id, q_cam, g_ids, g_cams);
        let mut relevant_seen = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &j) in order.iter().enumerate() {
            if g_ids[j] == q_id {
                relevant_seen += 1;
                precision_sum += relevant_seen as f64 / (pos + 1) as f64;
            }
        }
        if relevant_seen == 0 {
            continue;
        }
        valid_queries += 1;
        ap_sum += precision_sum / relevant_seen as f64;
    }
    if valid_queries == 0 {
        return Err(Error::Protocol(
            "every query lacks a valid gallery positive".into(),
        ));
    }
    Ok(ap_sum / valid_queries as f64)
}

/// One single-shot evaluation: per-trial curves plus their average.
#[derive(Debug, Clone)]
pub struct SingleShotOutcome {
    pub averaged: CmcCurve,
    pub per_trial: Vec<CmcCurve>,
    pub mean_map: f64,
    pub per_trial_map: Vec<f64>,
}

/// Repeats the single-shot protocol: each trial keeps exactly one gallery
/// image per identity (chosen by `rng`), evaluates CMC and mAP, and the
/// curves are averaged elementwise.
pub fn single_shot_eval(
    query: &FeatureMatrix,
    gallery: &FeatureMatrix,
    k: usize,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SingleShotOutcome> {
    if trials == 0 {
        return Err(Error::Parameter {
            name: "trials",
            reason: "single-shot evaluation needs at least one trial".into(),
        });
    }
    // Group gallery rows by identity, in sorted identity order so the
    // sampling sequence is a pure function of the rng stream.
    let mut by_id: std::collections::BTreeMap<u32, Vec<usize>> = std::collections::BTreeMap::new();
    for (row, &id) in gallery.ids.iter().enumerate() {
        by_id.entry(id).or_default().push(row);
    }
    for &q_id in &query.ids {
        if !by_id.contains_key(&q_id) {
            return Err(Error::Protocol(format!(
                "query identity {q_id} has no gallery candidates"
            )));
        }
    }
    let mut per_trial = Vec::with_capacity(trials);
    let mut per_trial_map = Vec::with_capacity(trials);
    for _ in 0..trials {
        let rows: Vec<usize> = by_id
            .values()
            .map(|candidates| candidates[rng.random_range(0..candidates.len())])
            .collect();
        let sub = gallery.select(&rows);
        let dist = distance_matrix(query, &sub)?;
        let shot_k = k.min(sub.rows());
        let curve = cmc(&dist, &query.ids, &sub.ids, &query.cams, &sub.cams, shot_k)?;
        let map = mean_average_precision(&dist, &query.ids, &sub.ids, &query.cams, &sub.cams)?;
        per_trial.push(curve);
        per_trial_map.push(map);
    }
    let len = per_trial[0].len();
    let mut averaged = vec![0.0; len];
    for curve in &per_trial {
        for (a, v) in averaged.iter_mut().zip(&curve.values) {
            *a += v;
        }
    }
    for a in &mut averaged {
        *a /= trials as f64;
    }
    let mean_map = per_trial_map.iter().sum::<f64>() / trials as f64;
    Ok(SingleShotOutcome {
        averaged: CmcCurve { values: averaged },
        per_trial,
        mean_map,
        per_trial_map,
    })
}

/// The JSON document evaluation runs emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    /// CMC at ranks 1..=K.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub trials: usize,
    pub seed: u64,
    pub checkpoint: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Protocol(format!("metrics report {}: {e}", path.display()))
        })
    }
}
