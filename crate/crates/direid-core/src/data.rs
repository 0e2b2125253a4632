//! Dataset manifests and query/gallery splits.
//!
//! A manifest is a three-column CSV (`relative_path,identity,camera`, no
//! header, UTF-8) next to the images it names. On ingestion, identity
//! labels are relabeled to a contiguous `0..K` range; the original labels
//! are retained for reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// One manifest row after relabeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub path: PathBuf,
    /// Contiguous identity label in `0..num_identities`.
    pub identity: u32,
    /// Camera id as written in the file.
    pub camera: u32,
}

/// An ingested dataset: entries plus the identity relabeling map.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    /// Original label for each contiguous identity (index = new label).
    original_labels: Vec<u32>,
}

impl DatasetManifest {
    /// Builds a manifest from raw rows `(relative path, identity, camera)`,
    /// relabeling identities contiguously in sorted-original-label order.
    pub fn from_rows(root: impl Into<PathBuf>, rows: Vec<(PathBuf, u32, u32)>) -> Result<Self> {
        let root = root.into();
        if rows.is_empty() {
            return Err(Error::Manifest {
                path: root.clone(),
                line: 0,
                reason: "empty manifest".into(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for (path, _, _) in &rows {
            if !seen.insert(path.clone()) {
                return Err(Error::Manifest {
                    path: root.clone(),
                    line: 0,
                    reason: format!("duplicate image path {}", path.display()),
                });
            }
        }
        let mut originals: Vec<u32> = rows.iter().map(|(_, id, _)| *id).collect();
        originals.sort_unstable();
        originals.dedup();
        let relabel: BTreeMap<u32, u32> = originals
            .iter()
            .enumerate()
            .map(|(new, old)| (*old, new as u32))
            .collect();
        let entries = rows
            .into_iter()
            .map(|(path, id, camera)| ManifestEntry {
                path,
                identity: relabel[&id],
                camera,
            })
            .collect();
        Ok(DatasetManifest {
            root,
            entries,
            original_labels: originals,
        })
    }

    /// Directory that entry paths are relative to.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of distinct identities (labels are `0..num_identities`).
    pub fn num_identities(&self) -> usize {
        self.original_labels.len()
    }

    /// Number of distinct camera ids.
    pub fn num_cameras(&self) -> usize {
        let mut cams: Vec<u32> = self.entries.iter().map(|e| e.camera).collect();
        cams.sort_unstable();
        cams.dedup();
        cams.len()
    }

    /// Original label that contiguous `identity` was relabeled from.
    pub fn original_label(&self, identity: u32) -> Option<u32> {
        self.original_labels.get(identity as usize).copied()
    }

    /// The full `original -> contiguous` relabeling map.
    pub fn relabel_map(&self) -> BTreeMap<u32, u32> {
        self.original_labels
            .iter()
            .enumerate()
            .map(|(new, old)| (*old, new as u32))
            .collect()
    }

    /// Entry indices grouped by contiguous identity label.
    pub fn indices_by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_identities()];
        for (idx, e) in self.entries.iter().enumerate() {
            groups[e.identity as usize].push(idx);
        }
        groups
    }

    /// Absolute path of entry `idx`.
    pub fn image_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.entries[idx].path)
    }

    /// Loads the image behind entry `idx`.
    pub fn load_image(&self, idx: usize) -> Result<ImageTensor> {
        ImageTensor::load_png(&self.image_path(idx))
    }

    /// Serializes entries back to manifest text (original labels restored).
    pub fn to_manifest_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let original = self.original_labels[e.identity as usize];
            let _ = writeln!(
                out,
                "{},{},{}",
                e.path.display(),
                original,
                e.camera
            );
        }
        out
    }

    /// Writes the manifest file into its root directory.
    pub fn write(&self, file_name: &str) -> Result<PathBuf> {
        let path = self.root.join(file_name);
        std::fs::write(&path, self.to_manifest_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Reads and relabels a manifest file; image paths resolve relative to the
/// manifest's own directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (rel, id, cam) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(rel), Some(id), Some(cam), None) => (rel, id, cam),
            _ => {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: "expected exactly 3 comma-separated fields".into(),
                })
            }
        };
        let parse_u32 = |s: &str, what: &str| {
            s.trim().parse::<u32>().map_err(|_| Error::Manifest {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("{what} `{s}` is not a non-negative integer"),
            })
        };
        rows.push((
            PathBuf::from(rel.trim()),
            parse_u32(id, "identity")?,
            parse_u32(cam, "camera")?,
        ));
    }
    if rows.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            reason: "empty manifest".into(),
        });
    }
    DatasetManifest::from_rows(root, rows)
}

/// Query/gallery pair for retrieval evaluation.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub query: DatasetManifest,
    pub gallery: DatasetManifest,
}

impl DatasetSplit {
    /// Validates that every query identity is present in the gallery.
    ///
    /// Identities are compared by *original* labels, since the two
    /// manifests relabel independently.
    pub fn new(query: DatasetManifest, gallery: DatasetManifest) -> Result<Self> {
        let gallery_ids: std::collections::BTreeSet<u32> = gallery
            .entries()
            .iter()
            .map(|e| gallery.original_label(e.identity).unwrap())
            .collect();
        for e in query.entries() {
            let original = query.original_label(e.identity).unwrap();
            if !gallery_ids.contains(&original) {
                return Err(Error::Protocol(format!(
                    "query identity {original} has no gallery image"
                )));
            }
        }
        Ok(DatasetSplit { query, gallery })
    }
}
