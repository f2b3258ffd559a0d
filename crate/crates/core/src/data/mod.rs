//! Image ingestion, preprocessing, augmentation, synthetic glyphs and
//! stratified fold planning.

mod augment;
mod folds;
mod image;
mod loader;
mod synth;

pub use augment::{augment, derive_seed, AugmentConfig};
pub use folds::{stratified_kfold, FoldPlan};
pub use image::{decode_image, encode_gray_png, encode_rgb_png, preprocess, RawImage};
pub use loader::{load_dataset, load_image, png_files, write_dataset, LoadReport, SkipEntry};
pub use synth::{render_glyph, synth_glyphs, GlyphJitter, GLYPH_TEMPLATES};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

/// Side length of every preprocessed image.
pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 3;
/// Default class directory names, indexed by label.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["Normal", "Reversed", "Corrected"];

pub fn default_class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("class directory missing: {}", .0.display())]
    MissingClassDir(PathBuf),
    #[error("class `{0}` has no decodable images")]
    EmptyClass(String),
    #[error("fold count must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("class {class} has {count} samples, fewer than {k} folds")]
    TooFewSamples { class: usize, count: usize, k: usize },
    #[error("invalid augmentation config: {0}")]
    InvalidAugment(String),
    #[error("failed to write {}: {source}", path.display())]
    WriteFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A preprocessed `1×32×32` grayscale image in `[0, 1]` with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_id: String,
}

impl Sample {
    pub fn new(pixels: Vec<f32>, label: usize, source_id: impl Into<String>) -> Self {
        debug_assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            image: Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], pixels, false).expect("32×32 pixel buffer"),
            label,
            source_id: source_id.into(),
        }
    }

    pub fn pixels(&self) -> &[f32] {
        self.image.data()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Self {
        debug_assert!(samples.iter().all(|s| s.label < class_names.len()));
        Self { samples, class_names }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Per-class tallies.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}
