//! Dataset manifests.
//!
//! A manifest is a CSV file with header `case_id,image,mask`; paths are
//! resolved relative to the manifest's directory. Loading validates that
//! case ids are unique, referenced files exist, image and mask dimensions
//! match per case, and spatial sizes are divisible by the pyramid factor.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::pgm::{read_pgm_image, read_pgm_mask};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub case_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub path: PathBuf,
}

/// One loaded dataset case.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "case_id,image,mask" => {}
        Some((_, header)) => {
            return Err(Error::Validation(format!(
                "manifest header must be `case_id,image,mask`, got `{header}`"
            )))
        }
        None => return Err(Error::Validation("empty manifest".into())),
    }
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Validation(format!(
                "manifest line {} has {} fields, expected 3",
                lineno + 1,
                fields.len()
            )));
        }
        let case_id = fields[0].trim().to_string();
        if case_id.is_empty() {
            return Err(Error::Validation(format!(
                "manifest line {} has an empty case_id",
                lineno + 1
            )));
        }
        if !seen.insert(case_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate case_id `{case_id}` in manifest"
            )));
        }
        let image = base.join(fields[1].trim());
        let mask = base.join(fields[2].trim());
        for file in [&image, &mask] {
            if !file.exists() {
                return Err(Error::Validation(format!(
                    "manifest references missing file {}",
                    file.display()
                )));
            }
        }
        rows.push(ManifestRow { case_id, image, mask });
    }
    if rows.is_empty() {
        return Err(Error::Validation("manifest lists no cases".into()));
    }
    Ok(DatasetManifest {
        rows,
        path: path.to_path_buf(),
    })
}

impl DatasetManifest {
    pub fn case_ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.case_id.clone()).collect()
    }

    /// Loads every case, validating per-case dimension agreement and
    /// divisibility by `2^(scales-1)`.
    pub fn load_cases(&self, scales: usize) -> Result<Vec<Case>> {
        let factor = 1usize << (scales - 1);
        let mut cases = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let image = read_pgm_image::<f32>(&row.image)?;
            let mask = read_pgm_mask::<f32>(&row.mask)?;
            if image.shape() != mask.shape() {
                return Err(Error::Validation(format!(
                    "case `{}`: image {} and mask {} dimensions differ",
                    row.case_id,
                    image.shape(),
                    mask.shape()
                )));
            }
            let s = image.shape();
            if s.h % factor != 0 || s.w % factor != 0 {
                return Err(Error::Validation(format!(
                    "case `{}`: size {}x{} not divisible by {factor}",
                    row.case_id, s.h, s.w
                )));
            }
            cases.push(Case {
                id: row.case_id.clone(),
                image,
                mask,
            });
        }
        Ok(cases)
    }
}
