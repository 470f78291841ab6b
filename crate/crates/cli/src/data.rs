//! Dataset layout: one directory per case holding `image.nii`, `gland.nii`
//! and optionally `tz.nii` and `pz.nii`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use gusl_core::pipeline::Case;
use gusl_core::volume::{encode_nifti, load_nifti, save_nifti, BinaryMask, ProbMap, Volume3D};
use gusl_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

fn load_mask(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::from_volume(&load_nifti(path)?)?)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut case_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    case_dirs.sort();
    if case_dirs.is_empty() {
        return Err(Error::Invalid(format!("no case directories in {}", dir.display())).into());
    }
    case_dirs
        .iter()
        .map(|d| {
            let optional = |name: &str| -> Result<Option<BinaryMask>> {
                let p = d.join(name);
                if p.exists() {
                    load_mask(&p).map(Some)
                } else {
                    Ok(None)
                }
            };
            Ok(Case {
                id: d.file_name().unwrap().to_string_lossy().into_owned(),
                volume: load_nifti(d.join("image.nii"))?,
                gland: load_mask(&d.join("gland.nii"))?,
                tz: optional("tz.nii")?,
                pz: optional("pz.nii")?,
            })
        })
        .collect()
}

pub fn write_dataset(dir: &Path, cases: &[Case]) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    for c in cases {
        let case_dir = dir.join(&c.id);
        fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
        let (sp, or) = (c.volume.spacing, c.volume.origin);
        let mut vols = vec![("image.nii", c.volume.clone()), ("gland.nii", c.gland.to_volume(sp, or)?)];
        for (name, m) in [("tz.nii", &c.tz), ("pz.nii", &c.pz)] {
            if let Some(m) = m {
                vols.push((name, m.to_volume(sp, or)?));
            }
        }
        for (name, v) in vols {
            let bytes = encode_nifti(&v);
            let p = case_dir.join(name);
            fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
            files.push(FileEntry {
                path: format!("{}/{name}", c.id),
                bytes: bytes.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
    }
    Ok(files)
}

/// Output name and image path for an `--input` argument.
pub fn resolve_input(path: &Path) -> Result<(String, PathBuf)> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
    if path.is_dir() {
        let n = name(path).unwrap_or_else(|| "case".into());
        Ok((n, path.join("image.nii")))
    } else {
        let n = name(path).unwrap_or_else(|| "case".into());
        Ok((n.strip_suffix(".nii").unwrap_or(&n).to_owned(), path.to_path_buf()))
    }
}

/// Writes `<name>.nii` (binary mask) and `<name>_prob.nii` (probabilities).
pub fn write_prediction(dir: &Path, name: &str, mask: &BinaryMask, prob: &ProbMap, like: &Volume3D) -> Result<()> {
    save_nifti(&mask.to_volume(like.spacing, like.origin)?, dir.join(format!("{name}.nii")))?;
    let g = prob.grid().map(|v| v as f32);
    save_nifti(&Volume3D::new(g, like.spacing, like.origin)?, dir.join(format!("{name}_prob.nii")))?;
    Ok(())
}
