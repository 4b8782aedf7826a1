//! Dataset listings. Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use revisp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, read_json, write_json, Error, Result};
use crate::image_io::{load_raw, load_rgb, RawSidecar};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_path: Option<PathBuf>,
    /// RAW sidecar; required whenever `raw_path` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_path: Option<PathBuf>,
    /// Precomputed RAW prediction for paired evaluation; shares `meta_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_path: Option<PathBuf>,
    pub camera_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

/// A RAW entry with its decoded image.
#[derive(Debug, Clone)]
pub struct LoadedRaw {
    pub index: usize,
    pub raw: Tensor,
    pub sidecar: RawSidecar,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            entries,
            root: PathBuf::new(),
        }
    }

    /// Parses and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Self = read_json(path)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                found: self.schema,
                expected: MANIFEST_SCHEMA,
            });
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.raw_path.is_some() && e.meta_path.is_none() {
                return Err(format_err(
                    path,
                    format!("entry {i}: raw_path without meta_path"),
                ));
            }
            if e.pred_path.is_some() && e.meta_path.is_none() {
                return Err(format_err(
                    path,
                    format!("entry {i}: pred_path without meta_path"),
                ));
            }
            if e.rgb_path.is_none() && e.raw_path.is_none() && e.pred_path.is_none() {
                return Err(format_err(path, format!("entry {i}: no image paths")));
            }
            for p in [&e.rgb_path, &e.raw_path, &e.meta_path, &e.pred_path]
                .into_iter()
                .flatten()
            {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(format_err(
                        path,
                        format!("entry {i}: {} does not exist", full.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn sidecar(&self, i: usize) -> Result<RawSidecar> {
        let e = &self.entries[i];
        let meta = e
            .meta_path
            .as_ref()
            .ok_or_else(|| format_err(&self.root, format!("entry {i} has no meta_path")))?;
        RawSidecar::load(&self.resolve(meta))
    }

    /// Decodes the RAW of entry `i`.
    pub fn load_raw(&self, i: usize) -> Result<LoadedRaw> {
        let raw_path = self.entries[i]
            .raw_path
            .as_ref()
            .ok_or_else(|| format_err(&self.root, format!("entry {i} has no raw_path")))?;
        let sidecar = self.sidecar(i)?;
        let raw = load_raw(&self.resolve(raw_path), &sidecar)?;
        Ok(LoadedRaw {
            index: i,
            raw,
            sidecar,
        })
    }

    pub fn load_rgb(&self, i: usize) -> Result<Tensor> {
        let p = self.entries[i]
            .rgb_path
            .as_ref()
            .ok_or_else(|| format_err(&self.root, format!("entry {i} has no rgb_path")))?;
        load_rgb(&self.resolve(p))
    }

    pub fn load_pred(&self, i: usize) -> Result<Tensor> {
        let p = self.entries[i]
            .pred_path
            .as_ref()
            .ok_or_else(|| format_err(&self.root, format!("entry {i} has no pred_path")))?;
        load_raw(&self.resolve(p), &self.sidecar(i)?)
    }

    /// Indices of entries with a RAW image.
    pub fn raw_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].raw_path.is_some())
            .collect()
    }

    /// Indices of RGB-only entries, the unpaired images for teacher pairs.
    pub fn unpaired_rgb_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].raw_path.is_none() && self.entries[i].rgb_path.is_some())
            .collect()
    }
}
