//! Procedural stand-in for handwritten letter scans.
//!
//! Class 0 draws an asymmetric letter in its usual orientation, class 1 is
//! the horizontal mirror of that raster, and class 2 is the usual
//! orientation again carrying what is left of a reversal: a faint ghost of
//! the mirrored letter and an overshooting main stroke.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::derive_seed;
use super::{default_class_names, Dataset, Sample, CLASS_NAMES, IMAGE_SIZE};
use crate::raster::flip_horizontal;

type Point = (f64, f64);

/// Letters whose mirror image is a different shape.
pub const GLYPH_TEMPLATES: [char; 6] = ['b', 'p', 'F', 'R', 'L', 'J'];

const GHOST_INK: f64 = 0.4;
const OVERSHOOT: f64 = 0.22;

/// Per-sample placement and stroke variation, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphJitter {
    pub dx: f64,
    pub dy: f64,
    pub size: f64,
    pub thickness: f64,
    pub ink: f64,
}

impl GlyphJitter {
    pub const CANONICAL: GlyphJitter = GlyphJitter {
        dx: 0.0,
        dy: 0.0,
        size: 23.0,
        thickness: 2.2,
        ink: 1.0,
    };

    /// Deterministic draw for sample `index` of `class`.
    pub fn draw(seed: u64, class: usize, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (class * 1_000_003 + index) as u64, 0x5157));
        Self {
            dx: rng.random_range(-2.0..=2.0),
            dy: rng.random_range(-1.5..=1.5),
            size: rng.random_range(21.0..=25.0),
            thickness: rng.random_range(1.7..=2.7),
            ink: rng.random_range(0.85..=1.0),
        }
    }
}

fn arc(cx: f64, cy: f64, r: f64, from_deg: f64, to_deg: f64) -> Vec<Point> {
    let steps = 24;
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64).to_radians();
            (cx + r * t.cos(), cy + r * t.sin())
        })
        .collect()
}

/// Polylines in a unit box, `x` right and `y` down. The first stroke is the
/// one that overshoots in corrected letters.
fn strokes(letter: char) -> Vec<Vec<Point>> {
    match letter {
        'b' => vec![vec![(0.2, 0.0), (0.2, 1.0)], arc(0.47, 0.72, 0.27, 0.0, 360.0)],
        'p' => vec![vec![(0.2, 0.3), (0.2, 1.0)], arc(0.47, 0.52, 0.24, 0.0, 360.0)],
        'F' => vec![
            vec![(0.25, 0.0), (0.25, 1.0)],
            vec![(0.25, 0.0), (0.85, 0.0)],
            vec![(0.25, 0.47), (0.7, 0.47)],
        ],
        'R' => {
            let mut bowl = vec![(0.25, 0.0), (0.55, 0.0)];
            bowl.extend(arc(0.55, 0.25, 0.25, -90.0, 90.0));
            bowl.push((0.25, 0.5));
            vec![vec![(0.25, 0.0), (0.25, 1.0)], bowl, vec![(0.45, 0.5), (0.85, 1.0)]]
        }
        'L' => vec![vec![(0.25, 0.0), (0.25, 1.0)], vec![(0.25, 1.0), (0.85, 1.0)]],
        'J' => {
            let mut hook = vec![(0.7, 0.0), (0.7, 0.72)];
            hook.extend(arc(0.45, 0.72, 0.25, 0.0, 180.0));
            vec![hook, vec![(0.35, 0.0), (0.95, 0.0)]]
        }
        other => panic!("no template for {other:?}"),
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Darkens `canvas` (white = 1) along the polylines with a one-pixel
/// anti-aliased edge.
fn stamp(canvas: &mut [f64], lines: &[Vec<Point>], thickness: f64, ink: f64) {
    let n = IMAGE_SIZE;
    for y in 0..n {
        for x in 0..n {
            let p = (x as f64, y as f64);
            let d = lines
                .iter()
                .flat_map(|l| l.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let cover = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            let v = 1.0 - cover * ink;
            let px = &mut canvas[y * n + x];
            *px = px.min(v);
        }
    }
}

fn place(lines: Vec<Vec<Point>>, j: &GlyphJitter, mirrored: bool) -> Vec<Vec<Point>> {
    let c = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    let width = j.size * 0.75;
    lines
        .into_iter()
        .map(|l| {
            l.into_iter()
                .map(|(u, v)| {
                    let u = if mirrored { 1.0 - u } else { u };
                    (c + j.dx + (u - 0.5) * width, c + j.dy + (v - 0.5) * j.size)
                })
                .collect()
        })
        .collect()
}

fn quantize(canvas: &[f64]) -> Vec<f32> {
    canvas
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0)
        .collect()
}

/// Canonical rendering of `GLYPH_TEMPLATES[template]`.
pub fn render_glyph(template: usize, jitter: &GlyphJitter) -> Vec<f32> {
    let mut canvas = vec![1.0; IMAGE_SIZE * IMAGE_SIZE];
    let lines = place(strokes(GLYPH_TEMPLATES[template]), jitter, false);
    stamp(&mut canvas, &lines, jitter.thickness, jitter.ink);
    quantize(&canvas)
}

fn render_corrected(template: usize, jitter: &GlyphJitter) -> Vec<f32> {
    let mut canvas = vec![1.0; IMAGE_SIZE * IMAGE_SIZE];
    let letter = GLYPH_TEMPLATES[template];
    let ghost = place(strokes(letter), jitter, true);
    stamp(&mut canvas, &ghost, jitter.thickness * 0.8, jitter.ink * GHOST_INK);

    let mut lines = strokes(letter);
    let main = &mut lines[0];
    let (a, b) = (main[main.len() - 2], main[main.len() - 1]);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len = (vx * vx + vy * vy).sqrt().max(1e-9);
    main.push((b.0 + vx / len * OVERSHOOT, b.1 + vy / len * OVERSHOOT));
    let lines = place(lines, jitter, false);
    stamp(&mut canvas, &lines, jitter.thickness, jitter.ink);
    quantize(&canvas)
}

/// `n_per_class` samples of each class, class-major. Pixel values are
/// multiples of 1/255 so a PNG round trip is exact.
pub fn synth_glyphs(n_per_class: usize, seed: u64) -> Dataset {
    let mut samples = Vec::with_capacity(3 * n_per_class);
    for (class, name) in CLASS_NAMES.iter().enumerate() {
        for i in 0..n_per_class {
            let template = i % GLYPH_TEMPLATES.len();
            let jitter = GlyphJitter::draw(seed, class, i);
            let pixels = match class {
                0 => render_glyph(template, &jitter),
                1 => flip_horizontal(&render_glyph(template, &jitter), IMAGE_SIZE, IMAGE_SIZE),
                _ => render_corrected(template, &jitter),
            };
            samples.push(Sample::new(pixels, class, format!("synth:{name}:{i:05}")));
        }
    }
    Dataset::new(samples, default_class_names())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_per_class() {
        let ds = synth_glyphs(10, 1);
        assert_eq!(ds.len(), 30);
        assert_eq!(ds.counts(), vec![10, 10, 10]);
        assert_eq!(ds.samples[13].source_id, "synth:Reversed:00003");
    }

    #[test]
    fn reversed_is_mirror_of_canonical() {
        let ds = synth_glyphs(6, 4);
        for i in 0..6 {
            let j = GlyphJitter::draw(4, 1, i);
            let canon = render_glyph(i, &j);
            assert_eq!(ds.samples[6 + i].pixels(), flip_horizontal(&canon, 32, 32).as_slice());
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_glyphs(5, 99);
        let b = synth_glyphs(5, 99);
        assert_eq!(a, b);
        assert_ne!(a, synth_glyphs(5, 100));
    }

    #[test]
    fn templates_are_asymmetric_and_inked() {
        for t in 0..GLYPH_TEMPLATES.len() {
            let img = render_glyph(t, &GlyphJitter::CANONICAL);
            let flipped = flip_horizontal(&img, 32, 32);
            let diff: f32 = img.iter().zip(&flipped).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 20.0, "template {t} too symmetric: {diff}");
            let ink = img.iter().filter(|&&v| v < 0.5).count();
            assert!((30..600).contains(&ink), "template {t} ink {ink}");
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn corrected_differs_from_normal() {
        for t in 0..GLYPH_TEMPLATES.len() {
            let j = GlyphJitter::CANONICAL;
            let normal = render_glyph(t, &j);
            let corrected = render_corrected(t, &j);
            let diff: f32 = normal.iter().zip(&corrected).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 10.0, "template {t}: {diff}");
        }
    }

    #[test]
    fn values_are_byte_levels() {
        for s in &synth_glyphs(2, 3).samples {
            for &v in s.pixels() {
                let level = (v * 255.0).round();
                assert_eq!(level / 255.0, v);
            }
        }
    }
}
