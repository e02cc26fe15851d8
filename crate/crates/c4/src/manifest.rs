//! Dataset manifests: CSV with header `path,r,g,b,mask,fold,camera`.
//!
//! Paths are resolved relative to the manifest's directory. `mask` and `fold`
//! may be empty.

use std::fs;
use std::path::{Path, PathBuf};

use c4_core::data::{assign_folds, Sample};
use c4_core::Illuminant;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{C4Error, Result};
use crate::io::{read_image, read_mask};

pub const HEADER: [&str; 7] = ["path", "r", "g", "b", "mask", "fold", "camera"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    pub mask: Option<PathBuf>,
    pub fold: Option<usize>,
    pub camera: String,
}

impl ManifestEntry {
    pub fn illuminant(&self) -> c4_core::Result<Illuminant> {
        Illuminant::new(self.r, self.g, self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = fs::File::open(path).map_err(|e| C4Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let line_err = |line: u64, message: String| C4Error::Line {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header = reader.headers().map_err(|e| line_err(1, e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(line_err(
                1,
                format!("header must be `{}`", HEADER.join(",")),
            ));
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                line_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let entry: ManifestEntry = record
                .deserialize(Some(&csv::StringRecord::from(HEADER.to_vec())))
                .map_err(|e| line_err(line, e.to_string()))?;
            entry
                .illuminant()
                .map_err(|e| line_err(line, format!("illuminant: {e}")))?;
            for file in std::iter::once(&entry.path).chain(entry.mask.as_ref()) {
                if !root.join(file).is_file() {
                    return Err(line_err(line, format!("{} does not exist", file.display())));
                }
            }
            entries.push(entry);
        }
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for entry in &self.entries {
            writer
                .serialize(entry)
                .map_err(|e| C4Error::format(path, e.to_string()))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| C4Error::format(path, e.to_string()))?;
        fs::write(path, bytes).map_err(|e| C4Error::io(path, e))
    }

    /// Assigns a seeded `k`-fold partition unless every entry already has a fold.
    ///
    /// A manifest where only some entries carry a fold is rejected.
    pub fn with_folds(mut self, k: usize, seed: u64) -> Result<Self> {
        let given = self.entries.iter().filter(|e| e.fold.is_some()).count();
        if given == self.entries.len() {
            if let Some(e) = self.entries.iter().find(|e| e.fold.is_some_and(|f| f >= k)) {
                return Err(C4Error::Usage(format!(
                    "{} is in fold {:?} but only {k} folds were requested",
                    e.path.display(),
                    e.fold
                )));
            }
            return Ok(self);
        }
        if given != 0 {
            return Err(C4Error::Usage(format!(
                "{given} of {} manifest entries carry a fold; give all or none",
                self.entries.len()
            )));
        }
        let folds = assign_folds(self.entries.len(), k, seed)?;
        for (e, f) in self.entries.iter_mut().zip(folds) {
            e.fold = Some(f);
        }
        Ok(self)
    }

    /// Reads every image (in parallel) and attaches its mask and label.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .par_iter()
            .map(|e| {
                let path = self.root.join(&e.path);
                let mut image = read_image(&path)?;
                if let Some(mask) = &e.mask {
                    let mask = read_mask(&self.root.join(mask), image.height(), image.width())?;
                    image = image.with_mask(mask)?;
                }
                Ok(Sample {
                    id: e.path.to_string_lossy().into_owned(),
                    image,
                    illuminant: e.illuminant()?.normalized(),
                    fold: e.fold,
                    camera: e.camera.clone(),
                })
            })
            .collect()
    }
}
