use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::image::{decode_image, encode_gray_png, preprocess};
use super::{DataError, Dataset, Sample, IMAGE_SIZE};

/// One file that could not be used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub skipped: Vec<SkipEntry>,
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files below `dir`, sorted by path.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| DataError::Io {
            path: e.path().unwrap_or(dir).to_path_buf(),
            source: e
                .into_io_error()
                .unwrap_or_else(|| std::io::Error::other("filesystem loop")),
        })?;
        if entry.file_type().is_file() && is_png(entry.path()) {
            files.push(entry.into_path());
        }
    }
    files.sort();
    Ok(files)
}

/// Reads and preprocesses one image file.
pub fn load_image(path: &Path) -> Result<Vec<f32>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(preprocess(&decode_image(&bytes)?))
}

/// Loads `<root>/<class_names[i]>/**/*.png` as class `i`. Files that fail to
/// decode are listed in the skip report instead of aborting the load.
pub fn load_dataset(root: &Path, class_names: &[String]) -> Result<LoadReport, DataError> {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (label, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(DataError::MissingClassDir(dir));
        }
        let before = samples.len();
        for path in png_files(&dir)? {
            match load_image(&path) {
                Ok(pixels) => samples.push(Sample::new(pixels, label, path.display().to_string())),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push(SkipEntry {
                        path: path.display().to_string(),
                        error: e.to_string(),
                    });
                }
            }
        }
        if samples.len() == before {
            return Err(DataError::EmptyClass(name.clone()));
        }
    }
    Ok(LoadReport {
        dataset: Dataset::new(samples, class_names.to_vec()),
        skipped,
    })
}

/// Writes each sample as an 8-bit grayscale PNG under `<root>/<class>/`,
/// numbered by position within its class.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut written = Vec::with_capacity(dataset.len());
    let mut per_class = vec![0usize; dataset.class_names.len()];
    for s in &dataset.samples {
        let dir = root.join(&dataset.class_names[s.label]);
        let path = dir.join(format!("{:05}.png", per_class[s.label]));
        per_class[s.label] += 1;
        let write = || -> std::io::Result<()> {
            fs::create_dir_all(&dir)?;
            fs::write(&path, encode_gray_png(s.pixels(), IMAGE_SIZE, IMAGE_SIZE))
        };
        write().map_err(|source| DataError::WriteFailure {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_class_names, synth_glyphs};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_glyphs(2, 8);
        write_dataset(&ds, dir.path()).unwrap();
        let report = load_dataset(dir.path(), &default_class_names()).unwrap();
        assert!(report.skipped.is_empty());
        assert_eq!(report.dataset.counts(), vec![2, 2, 2]);
        for (a, b) in ds.samples.iter().zip(&report.dataset.samples) {
            assert_eq!(a.pixels(), b.pixels());
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn corrupt_file_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&synth_glyphs(2, 8), dir.path()).unwrap();
        let bad = dir.path().join("Reversed").join("00001.png");
        fs::write(&bad, b"\x89PNG garbage").unwrap();
        let report = load_dataset(dir.path(), &default_class_names()).unwrap();
        assert_eq!(report.dataset.len(), 5);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].path, bad.display().to_string());
    }

    #[test]
    fn missing_class_dir() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&synth_glyphs(1, 8), dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join("Corrected")).unwrap();
        let err = load_dataset(dir.path(), &default_class_names()).unwrap_err();
        assert!(matches!(err, DataError::MissingClassDir(p) if p.ends_with("Corrected")));
    }

    #[test]
    fn empty_class() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&synth_glyphs(1, 8), dir.path()).unwrap();
        fs::write(dir.path().join("Normal").join("00000.png"), b"nope").unwrap();
        let err = load_dataset(dir.path(), &default_class_names()).unwrap_err();
        assert!(matches!(err, DataError::EmptyClass(n) if n == "Normal"));
    }
}
