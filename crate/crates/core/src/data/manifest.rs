use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::{read_image_pgm, read_label_pgm, write_image_pgm, write_label_pgm};
use super::Sample;
use crate::error::{Error, Result};

/// One `image<TAB>label` line of a dataset manifest, paths already resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Parses a manifest. Relative paths resolve against the manifest's directory;
/// blank lines and lines starting with `#` are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(image), Some(labels), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Data(format!(
                "{}:{}: expected \"image_path<TAB>label_path\"",
                path.display(),
                lineno + 1
            )));
        };
        entries.push(ManifestEntry {
            image: base.join(image.trim()),
            labels: base.join(labels.trim()),
        });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no samples", path.display())));
    }
    Ok(entries)
}

pub fn load_manifest_samples(path: impl AsRef<Path>, classes: usize) -> Result<Vec<Sample>> {
    read_manifest(path)?
        .iter()
        .map(|e| {
            let image = read_image_pgm(&e.image)?;
            let labels = read_label_pgm(&e.labels, classes)?;
            if (labels.height(), labels.width()) != (image.height(), image.width()) {
                return Err(Error::Data(format!(
                    "{} is {}x{} but {} is {}x{}",
                    e.image.display(),
                    image.height(),
                    image.width(),
                    e.labels.display(),
                    labels.height(),
                    labels.width()
                )));
            }
            Ok(Sample { image, labels })
        })
        .collect()
}

/// Writes `sample_NNNN.pgm` / `sample_NNNN_labels.pgm` pairs into `dir` plus a
/// `manifest.tsv` listing them by relative path. Returns the manifest path.
pub fn write_dataset(samples: &[Sample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let image = format!("sample_{i:04}.pgm");
        let labels = format!("sample_{i:04}_labels.pgm");
        write_image_pgm(&s.image, dir.join(&image))?;
        write_label_pgm(&s.labels, dir.join(&labels))?;
        manifest.push_str(&format!("{image}\t{labels}\n"));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
