//! Single-channel row-major image grids.

/// Corner-aligned bilinear resampling of an `h×w` grid to `out_h×out_w`.
///
/// Source coordinate of output row `i` is `i·(h−1)/(out_h−1)`; corners map
/// onto corners, constant grids stay constant and outputs never leave the
/// input's value range.
pub fn bilinear_resize(grid: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(grid.len(), h * w, "grid length");
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "empty grid");
    let coords = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                if out == 1 || len == 1 {
                    return (0, 0, 0.0);
                }
                let s = i as f64 * (len - 1) as f64 / (out - 1) as f64;
                let lo = (s.floor() as usize).min(len - 1);
                let hi = (lo + 1).min(len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let at = |y: usize, x: usize| grid[y * w + x] as f64;
            let top = lerp(at(y0, x0), at(y0, x1), fx);
            let bottom = lerp(at(y1, x0), at(y1, x1), fx);
            out.push(lerp(top, bottom, fy) as f32);
        }
    }
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Mirror left-right.
pub fn flip_horizontal(grid: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = grid.to_vec();
    for row in out.chunks_mut(w).take(h) {
        row.reverse();
    }
    out
}

/// Bilinear sample at a fractional position; neighbours outside the grid
/// read as `fill`.
pub fn sample_bilinear(grid: &[f32], h: usize, w: usize, x: f64, y: f64, fill: f32) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            fill as f64
        } else {
            grid[yy as usize * w + xx as usize] as f64
        }
    };
    let top = lerp(at(y0, x0), at(y0, x0 + 1.0), fx);
    let bottom = lerp(at(y0 + 1.0, x0), at(y0 + 1.0, x0 + 1.0), fx);
    lerp(top, bottom, fy) as f32
}

/// Resamples through an inverse map from output to source coordinates.
pub fn warp(grid: &[f32], h: usize, w: usize, fill: f32, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64, y as f64);
            out.push(sample_bilinear(grid, h, w, sx, sy, fill));
        }
    }
    out
}
