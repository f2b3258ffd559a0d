//! Grad-CAM heatmaps, colormapped overlays and their PNG / JSON outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{encode_rgb_png, Sample, IMAGE_SIZE};
use crate::nn::{Model, ModelError};
use crate::raster::bilinear_resize;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::train::{argmax, stack_images};
use crate::Scalar;

/// Default blend weight of the colormap over the input image.
pub const DEFAULT_ALPHA: f64 = 0.4;

/// Colormap stops from cold to hot.
const STOPS: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.25, [0.0, 255.0, 255.0]),
    (0.5, [0.0, 255.0, 0.0]),
    (0.75, [255.0, 255.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("model has no activation named `{0}`")]
    MissingTargetLayer(String),
    #[error("class {class} out of range for a {classes}-class model")]
    InvalidClass { class: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("failed to write {}: {source}", path.display())]
    WriteFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Class-activation map at input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f32>,
    pub target_class: usize,
    /// Maximum of the rectified map before normalization.
    pub raw_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub heatmap: Heatmap,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
}

/// Side-car record written next to each overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamReport {
    pub source_id: String,
    pub predicted_class: usize,
    pub target_class: usize,
    pub probabilities: Vec<f64>,
    pub raw_max: f64,
}

impl CamReport {
    pub fn new(source_id: impl Into<String>, e: &Explanation) -> Self {
        Self {
            source_id: source_id.into(),
            predicted_class: e.predicted_class,
            target_class: e.heatmap.target_class,
            probabilities: e.probabilities.clone(),
            raw_max: e.heatmap.raw_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved 8-bit RGB, row-major.
    pub rgb: Vec<u8>,
}

/// Corner-aligned bilinear resampling; see [`bilinear_resize`].
pub fn bilinear_upsample(grid: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    bilinear_resize(grid, h, w, out_h, out_w)
}

/// Weights each channel of a `C×H×W` activation by the spatial mean of its
/// gradient, sums, rectifies and min-max normalizes.
///
/// Returns the normalized map and the maximum before normalization. A map
/// that is zero everywhere stays zero; a constant positive map becomes all
/// ones.
pub fn cam_from_activations(
    activations: &[f64],
    gradients: &[f64],
    channels: usize,
    height: usize,
    width: usize,
) -> (Vec<f64>, f64) {
    let plane = height * width;
    assert_eq!(activations.len(), channels * plane, "activation length");
    assert_eq!(gradients.len(), channels * plane, "gradient length");
    let mut cam = vec![0.0; plane];
    for c in 0..channels {
        let range = c * plane..(c + 1) * plane;
        let alpha = gradients[range.clone()].iter().sum::<f64>() / plane as f64;
        for (m, a) in cam.iter_mut().zip(&activations[range]) {
            *m += alpha * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = cam.iter().copied().fold(0.0, f64::max);
    let min = cam.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return (vec![0.0; plane], 0.0);
    }
    let span = max - min;
    let normalized = if span > 0.0 {
        cam.iter().map(|v| (v - min) / span).collect()
    } else {
        vec![1.0; plane]
    };
    (normalized, max)
}

/// Grad-CAM of `target_class` at the model's last convolutional activation.
pub fn grad_cam<T: Scalar>(model: &Model<T>, sample: &Sample, target_class: usize) -> Result<Heatmap, ExplainError> {
    Ok(explain(model, sample, Some(target_class), model.last_conv_tag())?.heatmap)
}

/// One eval-mode forward pass and one backward pass from the raw logit of
/// the target (the predicted class when `target` is `None`), taken at the
/// activation named `layer`. The model is only read.
pub fn explain<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    target: Option<usize>,
    layer: &str,
) -> Result<Explanation, ExplainError> {
    let classes = model.config().num_classes;
    if let Some(class) = target.filter(|&t| t >= classes) {
        return Err(ExplainError::InvalidClass { class, classes });
    }
    let mut g = Graph::new();
    let x = g.constant(stack_images([sample]));
    let fwd = model.forward_eval(&mut g, x)?;
    let tap = fwd
        .tap(layer)
        .ok_or_else(|| ExplainError::MissingTargetLayer(layer.to_string()))?;

    let logits = g.value(fwd.logits).data().to_vec();
    let predicted_class = argmax(&logits);
    let logits: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = exp.iter().sum();
    let probabilities = exp.iter().map(|e| e / total).collect();

    let target_class = target.unwrap_or(predicted_class);
    let mut onehot = vec![T::zero(); classes];
    onehot[target_class] = T::one();
    let mask = g.constant(Tensor::new(&[1, classes], onehot, false)?);
    let picked = g.mul(fwd.logits, mask)?;
    let root = g.sum_all(picked)?;
    g.backward(root)?;

    let shape = g.shape(tap).to_vec();
    let (c, h, w) = match shape[..] {
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(ExplainError::ShapeMismatch(format!(
                "`{layer}` is {shape:?}, not 1×C×H×W"
            )))
        }
    };
    let to64 = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>();
    let acts = to64(g.value(tap).data());
    let grads = g.grad(tap).map_or_else(|| vec![0.0; acts.len()], to64);
    let (cam, raw_max) = cam_from_activations(&acts, &grads, c, h, w);
    let cam: Vec<f32> = cam.iter().map(|&v| v as f32).collect();
    let values = bilinear_upsample(&cam, h, w, IMAGE_SIZE, IMAGE_SIZE)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Explanation {
        heatmap: Heatmap {
            height: IMAGE_SIZE,
            width: IMAGE_SIZE,
            values,
            target_class,
            raw_max,
        },
        predicted_class,
        probabilities,
    })
}

/// Piecewise-linear blue → cyan → green → yellow → red map of `t ∈ [0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + (c1[i] - c0[i]) * f);
        }
    }
    STOPS[4].1
}

/// Blends the colormapped heatmap over a grayscale image:
/// `round((1 − alpha)·gray + alpha·colormap(t))` per channel.
pub fn colormap_overlay(image: &[f32], heatmap: &Heatmap, alpha: f64) -> Result<OverlayImage, ExplainError> {
    let n = heatmap.height * heatmap.width;
    if image.len() != n || heatmap.values.len() != n {
        return Err(ExplainError::ShapeMismatch(format!(
            "image has {} pixels, heatmap {}×{}",
            image.len(),
            heatmap.height,
            heatmap.width
        )));
    }
    let alpha = alpha.clamp(0.0, 1.0);
    let mut rgb = Vec::with_capacity(3 * n);
    for (&p, &t) in image.iter().zip(&heatmap.values) {
        let gray = f64::from(p.clamp(0.0, 1.0)) * 255.0;
        for c in colormap(f64::from(t)) {
            rgb.push(((1.0 - alpha) * gray + alpha * c).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(OverlayImage {
        width: heatmap.width,
        height: heatmap.height,
        rgb,
    })
}

impl OverlayImage {
    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, scale: usize) -> OverlayImage {
        let scale = scale.max(1);
        let (w, h) = (self.width * scale, self.height * scale);
        let mut rgb = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                let i = 3 * ((y / scale) * self.width + x / scale);
                rgb.extend_from_slice(&self.rgb[i..i + 3]);
            }
        }
        OverlayImage {
            width: w,
            height: h,
            rgb,
        }
    }
}

/// Writes the overlay, enlarged by `scale`, as an 8-bit RGB PNG.
pub fn emit_png(overlay: &OverlayImage, path: &Path, scale: usize) -> Result<(), ExplainError> {
    let big = overlay.upscale(scale);
    fs::write(path, encode_rgb_png(&big.rgb, big.width, big.height)).map_err(|source| ExplainError::WriteFailure {
        path: path.to_path_buf(),
        source,
    })
}

/// Inclusive `(x0, y0, x1, y1)` box around pixels darker than `threshold`.
pub fn ink_bbox(image: &[f32], width: usize, threshold: f32) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in image.iter().enumerate().filter(|(_, &p)| p < threshold) {
        let (x, y) = (i % width, i / width);
        bbox = Some(match bbox {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    bbox
}

/// Mean heatmap value inside and outside the ink box of `image`; `None`
/// when either region is empty.
pub fn localization(image: &[f32], heatmap: &Heatmap, threshold: f32) -> Option<(f64, f64)> {
    let (x0, y0, x1, y1) = ink_bbox(image, heatmap.width, threshold)?;
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for (i, &v) in heatmap.values.iter().enumerate() {
        let (x, y) = (i % heatmap.width, i / heatmap.width);
        let slot = if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
            &mut inside
        } else {
            &mut outside
        };
        slot.0 += f64::from(v);
        slot.1 += 1;
    }
    (inside.1 > 0 && outside.1 > 0).then(|| (inside.0 / inside.1 as f64, outside.0 / outside.1 as f64))
}
