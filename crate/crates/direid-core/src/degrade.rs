//! Self-supervised degradation functions and degraded retrieval splits.
//!
//! Two corruptions are implemented: gamma correction (illumination) and
//! down/up resampling (resolution). Both keep the image geometry fixed, so
//! every tensor in the pipeline stays the configured size. Stochasticity
//! lives exclusively in the parameter samplers; the operators themselves
//! are deterministic in their arguments.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::data::{DatasetManifest, DatasetSplit};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// The two corruption families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    /// Down-sample then up-sample by a ratio; destroys high frequencies.
    Resolution,
    /// Gamma correction with exponent > 1; darkens and crushes shadows.
    Illumination,
}

impl DegradationKind {
    /// Default closed parameter range for the kind.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            DegradationKind::Resolution => (2.0, 4.0),
            DegradationKind::Illumination => (2.0, 3.5),
        }
    }
}

impl std::fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DegradationKind::Resolution => write!(f, "resolution"),
            DegradationKind::Illumination => write!(f, "illumination"),
        }
    }
}

/// A corruption family with its sampling range.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Degradation {
    pub kind: DegradationKind,
    /// Closed interval the parameter is drawn from.
    pub param_range: (f64, f64),
}

impl Degradation {
    /// The kind with its default parameter range.
    pub fn with_default_range(kind: DegradationKind) -> Self {
        Degradation {
            kind,
            param_range: kind.default_range(),
        }
    }
}

/// Applies gamma correction `out = x^gamma` elementwise.
pub fn gamma_degrade(x: &ImageTensor, gamma: f64) -> Result<ImageTensor> {
    if !(gamma > 0.0) {
        return Err(Error::Parameter {
            name: "gamma",
            reason: format!("must be > 0, got {gamma}"),
        });
    }
    ImageTensor::new(x.data().mapv(|v| v.powf(gamma)))
}

/// Overlap-weights for area-averaging `src` samples down to `dst`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let lo = t as f64 * scale;
            let hi = (t as f64 + 1.0) * scale;
            let span = hi - lo;
            let mut cells = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            for s in first..last {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((s, overlap / span));
                }
            }
            cells
        })
        .collect()
}

/// Source taps for bilinear upsampling `src` samples to `dst`
/// (half-pixel-center convention, borders clamped).
fn bilinear_weights(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let pos = (t as f64 + 0.5) * scale - 0.5;
            let clamped = pos.clamp(0.0, (src - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let frac = clamped - i0 as f64;
            [(i0, 1.0 - frac), (i1, frac)]
        })
        .collect()
}

/// Applies separable 1D resampling weights along rows then columns.
fn resample<W: AsRef<[(usize, f64)]>>(
    input: &ndarray::Array3<f64>,
    row_w: &[W],
    col_w: &[W],
) -> ndarray::Array3<f64> {
    let (c, _, w_in) = input.dim();
    let (h_out, w_out) = (row_w.len(), col_w.len());
    // Rows first.
    let mut rows = ndarray::Array3::<f64>::zeros((c, h_out, w_in));
    for ch in 0..c {
        for (y, taps) in row_w.iter().enumerate() {
            for &(sy, wy) in taps.as_ref() {
                for x in 0..w_in {
                    rows[[ch, y, x]] += wy * input[[ch, sy, x]];
                }
            }
        }
    }
    let mut out = ndarray::Array3::zeros((c, h_out, w_out));
    for ch in 0..c {
        for y in 0..h_out {
            for (x, taps) in col_w.iter().enumerate() {
                let mut acc = 0.0;
                for &(sx, wx) in taps.as_ref() {
                    acc += wx * rows[[ch, y, sx]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

/// Degrades resolution: area-average down to `(ceil(H/ratio), ceil(W/ratio))`,
/// then bilinear back up to `(H, W)`, so the geometry is unchanged.
pub fn resolution_degrade(x: &ImageTensor, ratio: f64) -> Result<ImageTensor> {
    if !(ratio >= 1.0) {
        return Err(Error::Parameter {
            name: "ratio",
            reason: format!("must be >= 1, got {ratio}"),
        });
    }
    let (h, w) = (x.height(), x.width());
    let h_small = (h as f64 / ratio).ceil() as usize;
    let w_small = (w as f64 / ratio).ceil() as usize;
    let down = resample(
        x.data(),
        &area_weights(h, h_small),
        &area_weights(w, w_small),
    );
    let up = resample(
        &down,
        &bilinear_weights(h_small, h),
        &bilinear_weights(w_small, w),
    );
    // Convex combinations stay in [0,1] up to rounding; clamp the dust.
    ImageTensor::new(up.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Dispatches to the operator for `kind`.
pub fn apply_degradation(kind: DegradationKind, x: &ImageTensor, param: f64) -> Result<ImageTensor> {
    match kind {
        DegradationKind::Resolution => resolution_degrade(x, param),
        DegradationKind::Illumination => gamma_degrade(x, param),
    }
}

/// Draws a parameter uniformly from the degradation's closed range.
pub fn sample_degradation_param(d: &Degradation, rng: &mut impl Rng) -> f64 {
    let (lo, hi) = d.param_range;
    rng.random_range(lo..=hi)
}

/// A clean image and its synthetically degraded copy.
#[derive(Debug, Clone)]
pub struct SelfDegradedPair {
    pub x_i: ImageTensor,
    pub x_j: ImageTensor,
    pub identity: u32,
    pub kind: DegradationKind,
    pub param: f64,
}

impl SelfDegradedPair {
    /// Degrades `x_i` with `(kind, param)` and stores both images.
    pub fn new(x_i: ImageTensor, identity: u32, kind: DegradationKind, param: f64) -> Result<Self> {
        let x_j = apply_degradation(kind, &x_i, param)?;
        Ok(SelfDegradedPair {
            x_i,
            x_j,
            identity,
            kind,
            param,
        })
    }

    /// True iff re-applying the stored parameter reproduces `x_j` bitwise.
    pub fn recheck(&self) -> Result<bool> {
        Ok(apply_degradation(self.kind, &self.x_i, self.param)? == self.x_j)
    }
}

/// A query/gallery split with the per-query down-sampling ratios drawn
/// while building it.
#[derive(Debug, Clone)]
pub struct MlrSplit {
    pub split: DatasetSplit,
    /// Ratio used for each query entry, in query order.
    pub ratios: Vec<f64>,
}

/// Builds the multi-low-resolution split: one camera's images become the
/// query set, each down-sampled by a ratio drawn uniformly from {2,3,4};
/// the other cameras' originals form the gallery.
///
/// Degraded queries are written under `out_dir` (plus `query.csv` and
/// `gallery.csv`); the source dataset directory is never written to — the
/// gallery manifest references the original files by absolute path.
pub fn build_mlr_split(
    manifest: &DatasetManifest,
    rng: &mut impl Rng,
    query_camera: Option<u32>,
    out_dir: &Path,
) -> Result<MlrSplit> {
    if manifest.num_cameras() < 2 {
        return Err(Error::Protocol(
            "multi-low-resolution split needs at least 2 cameras".into(),
        ));
    }
    let cameras: Vec<u32> = manifest.entries().iter().map(|e| e.camera).collect();
    let q_cam = query_camera.unwrap_or_else(|| *cameras.iter().min().unwrap());
    if !cameras.contains(&q_cam) {
        return Err(Error::Protocol(format!(
            "designated query camera {q_cam} has no images"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut query_rows = Vec::new();
    let mut gallery_rows = Vec::new();
    let mut ratios = Vec::new();
    for (idx, entry) in manifest.entries().iter().enumerate() {
        let original_id = manifest.original_label(entry.identity).unwrap();
        if entry.camera == q_cam {
            let ratio = [2.0, 3.0, 4.0][rng.random_range(0..3)];
            let degraded = resolution_degrade(&manifest.load_image(idx)?, ratio)?;
            let flat_name = entry
                .path
                .to_string_lossy()
                .replace(std::path::MAIN_SEPARATOR, "_");
            degraded.save_png(&out_dir.join(&flat_name))?;
            query_rows.push((PathBuf::from(flat_name), original_id, entry.camera));
            ratios.push(ratio);
        } else {
            // Absolute path: the gallery stays where it is, untouched.
            let absolute = std::fs::canonicalize(manifest.image_path(idx))
                .map_err(|e| Error::io(manifest.image_path(idx), e))?;
            gallery_rows.push((absolute, original_id, entry.camera));
        }
    }
    if gallery_rows.is_empty() {
        return Err(Error::Protocol("gallery would be empty".into()));
    }
    let query = DatasetManifest::from_rows(out_dir, query_rows)?;
    let gallery = DatasetManifest::from_rows(out_dir, gallery_rows)?;
    query.write("query.csv")?;
    gallery.write("gallery.csv")?;
    let split = DatasetSplit::new(query, gallery)?;
    Ok(MlrSplit { split, ratios })
}
