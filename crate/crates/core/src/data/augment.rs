use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Sample, IMAGE_SIZE};
use crate::raster::{flip_horizontal, warp};

const FILL: f32 = 1.0;

/// Training-time augmentation. Flipping defaults to off because a mirrored
/// Normal glyph is indistinguishable from a Reversed one; enabling it
/// relabels nothing and will corrupt supervision for this task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_max_deg: f64,
    pub flip_prob: f64,
    pub zoom_range: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_max_deg: 15.0,
            flip_prob: 0.0,
            zoom_range: [0.9, 1.1],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotation_max_deg: 0.0,
            flip_prob: 0.0,
            zoom_range: [1.0, 1.0],
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidAugment(m.into()));
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return bad("rotation_max_deg must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        let [lo, hi] = self.zoom_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("zoom_range must satisfy 0 < lo <= hi");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite value >= 0");
        }
        Ok(())
    }
}

/// Mixes a global seed with a sample index and epoch into an independent
/// stream seed (splitmix64 finalizer over each word).
pub fn derive_seed(seed: u64, index: u64, epoch: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ index) ^ epoch.rotate_left(32))
}

/// Rotation, optional flip, zoom and Gaussian noise, in that order. The
/// label and source id are carried over unchanged.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let n = IMAGE_SIZE;
    let c = (n as f64 - 1.0) / 2.0;
    let mut img = sample.pixels().to_vec();

    if cfg.rotation_max_deg > 0.0 {
        let deg = rng.random_range(-cfg.rotation_max_deg..=cfg.rotation_max_deg);
        if deg != 0.0 {
            let (sin, cos) = deg.to_radians().sin_cos();
            img = warp(&img, n, n, FILL, |x, y| {
                let (dx, dy) = (x - c, y - c);
                (cos * dx + sin * dy + c, -sin * dx + cos * dy + c)
            });
        }
    }
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        img = flip_horizontal(&img, n, n);
    }
    let [lo, hi] = cfg.zoom_range;
    let zoom = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    if zoom != 1.0 {
        img = warp(&img, n, n, FILL, |x, y| ((x - c) / zoom + c, (y - c) / zoom + c));
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in &mut img {
            *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Sample::new(img, sample.label, sample.source_id.clone())
}
