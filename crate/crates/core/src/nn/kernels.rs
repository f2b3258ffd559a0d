//! Raw forward/backward loops behind the layer operations.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Relu6,
    HardSigmoid,
    HardSwish,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => x.max(T::zero()).min(six),
            Activation::HardSigmoid => (x + three).max(T::zero()).min(six) / six,
            Activation::HardSwish => x * ((x + three).max(T::zero()).min(six) / six),
        }
    }

    /// Derivative, with 0 chosen at the kinks.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Relu6 => {
                if x > T::zero() && x < six {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::HardSigmoid => {
                if x > -three && x < three {
                    T::one() / six
                } else {
                    T::zero()
                }
            }
            Activation::HardSwish => {
                if x <= -three {
                    T::zero()
                } else if x >= three {
                    T::one()
                } else {
                    (x + x + three) / six
                }
            }
        }
    }
}

pub(crate) fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let (n, c_in, h, w) = nchw(input);
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output columns whose input column `o*stride + tap - pad` is in bounds.
    fn valid_range(&self, tap: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        let limit = in_len + self.pad; // exclusive bound on o*s + tap
        let hi = if limit > tap {
            ((limit - tap - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y_lo, y_hi) = g.valid_range(ky, g.oh, g.h);
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                dst.iter_mut().for_each(|v| *v = T::zero());
                let (x_lo, x_hi) = g.valid_range(kx, g.ow, g.w);
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for ox in x_lo..x_hi {
                        d[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y_lo, y_hi) = g.valid_range(ky, g.oh, g.h);
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * ohw..(row + 1) * ohw];
                let (x_lo, x_hi) = g.valid_range(kx, g.ow, g.w);
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    let d = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in x_lo..x_hi {
                        let ix = ox * g.stride + kx - g.pad;
                        d[ix] = d[ix] + s[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let ohw = g.out_hw();
    let rows = g.col_rows();
    let in_plane = g.c_in * g.h * g.w;
    let out_plane = g.c_out * ohw;
    let mut out = vec![T::zero(); g.n * out_plane];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * ohw]
    };
    for n in 0..g.n {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let src: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        let on = &mut out[n * out_plane..(n + 1) * out_plane];
        T::gemm(
            g.c_out,
            rows,
            ohw,
            T::one(),
            w,
            (rows as isize, 1),
            src,
            (ohw as isize, 1),
            T::zero(),
            on,
            (ohw as isize, 1),
        );
        if let Some(b) = bias {
            for (plane, &bo) in on.chunks_mut(ohw).zip(b) {
                plane.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_bias<T: Scalar>(up: &[T], g: &ConvGeom, db: &mut [T]) {
    let ohw = g.out_hw();
    for (i, plane) in up.chunks(ohw).enumerate() {
        let o = i % g.c_out;
        db[o] = db[o] + plane.iter().copied().sum();
    }
}

pub(crate) fn conv2d_backward_weight<T: Scalar>(up: &[T], x: &[T], g: &ConvGeom, dw: &mut [T]) {
    let ohw = g.out_hw();
    let rows = g.col_rows();
    let in_plane = g.c_in * g.h * g.w;
    let out_plane = g.c_out * ohw;
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * ohw]
    };
    for n in 0..g.n {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let src: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        let un = &up[n * out_plane..(n + 1) * out_plane];
        // dW (O×R) += dOut (O×P) · colᵀ (P×R)
        T::gemm(
            g.c_out,
            ohw,
            rows,
            T::one(),
            un,
            (ohw as isize, 1),
            src,
            (1, ohw as isize),
            T::one(),
            dw,
            (rows as isize, 1),
        );
    }
}

pub(crate) fn conv2d_backward_input<T: Scalar>(up: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.out_hw();
    let rows = g.col_rows();
    let in_plane = g.c_in * g.h * g.w;
    let out_plane = g.c_out * ohw;
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { rows * ohw }];
    for n in 0..g.n {
        let un = &up[n * out_plane..(n + 1) * out_plane];
        let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
        if g.pointwise() {
            T::gemm(
                rows,
                g.c_out,
                ohw,
                T::one(),
                w,
                (1, rows as isize),
                un,
                (ohw as isize, 1),
                T::one(),
                dxn,
                (ohw as isize, 1),
            );
        } else {
            // dcol (R×P) = Wᵀ (R×O) · dOut (O×P)
            T::gemm(
                rows,
                g.c_out,
                ohw,
                T::one(),
                w,
                (1, rows as isize),
                un,
                (ohw as isize, 1),
                T::zero(),
                &mut col,
                (ohw as isize, 1),
            );
            col2im_add(&col, g, dxn);
        }
    }
}

/// Zero-padded input plane split into `s×s` phase planes by row and column
/// position modulo the stride: `xp[i·s + ry][j·s + rx]` lives at
/// `phase[ry][rx][i][j]`. Every tap then reads one contiguous run over a
/// "wide" output grid whose rows are `pw` long; columns past `ow` are junk.
struct Phases<T> {
    s: usize,
    rows: usize,
    pw: usize,
    data: Vec<T>,
}

impl<T: Scalar> Phases<T> {
    fn new(g: &ConvGeom) -> Self {
        let s = g.stride;
        // One slack row absorbs runs that spill past the last real row.
        let rows = (g.h + 2 * g.pad).div_ceil(s) + 1;
        let pw = (g.w + 2 * g.pad).div_ceil(s);
        Self {
            s,
            rows,
            pw,
            data: vec![T::zero(); s * s * rows * pw],
        }
    }

    fn row_base(&self, y: usize, rx: usize) -> usize {
        ((y % self.s * self.s + rx) * self.rows + y / self.s) * self.pw
    }

    /// For phase column `rx`: first input column landing there and its
    /// phase-column index.
    fn column_phase(&self, rx: usize, pad: usize) -> (usize, usize) {
        let ix0 = (rx + self.s - pad % self.s) % self.s;
        (ix0, (ix0 + pad) / self.s)
    }

    fn fill(&mut self, plane: &[T], g: &ConvGeom) {
        for (iy, row) in plane.chunks(g.w).enumerate() {
            for rx in 0..self.s {
                let (ix0, j0) = self.column_phase(rx, g.pad);
                let base = self.row_base(iy + g.pad, rx) + j0;
                if self.s == 1 {
                    self.data[base..base + g.w].copy_from_slice(row);
                } else if ix0 < g.w {
                    let count = (g.w - ix0).div_ceil(self.s);
                    let dst = &mut self.data[base..base + count];
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = row[ix0 + j * self.s];
                    }
                }
            }
        }
    }

    /// Adds the interior of the padded plane into `plane`.
    fn drain_into(&self, plane: &mut [T], g: &ConvGeom) {
        for (iy, row) in plane.chunks_mut(g.w).enumerate() {
            for rx in 0..self.s {
                let (ix0, j0) = self.column_phase(rx, g.pad);
                if ix0 >= g.w {
                    continue;
                }
                let base = self.row_base(iy + g.pad, rx) + j0;
                let count = (g.w - ix0).div_ceil(self.s);
                let src = &self.data[base..base + count];
                for (j, &v) in src.iter().enumerate() {
                    let d = &mut row[ix0 + j * self.s];
                    *d = *d + v;
                }
            }
        }
    }

    /// Run read by tap `(ky, kx)` across the whole wide output grid.
    fn run(&self, ky: usize, kx: usize, oh: usize) -> std::ops::Range<usize> {
        let s = self.s;
        let start = ((ky % s * s + kx % s) * self.rows + ky / s) * self.pw + kx / s;
        start..start + oh * self.pw
    }
}

fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    let src = &src[..dst.len()];
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let b = &b[..a.len()];
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ohw, kk) = (g.h * g.w, g.out_hw(), g.k * g.k);
    let mut out = vec![T::zero(); g.n * g.c_in * ohw];
    let mut ph = Phases::new(g);
    let mut wide = vec![T::zero(); g.oh * ph.pw];
    for (p, (op, xp)) in out.chunks_mut(ohw).zip(x.chunks(hw)).enumerate() {
        ph.fill(xp, g);
        let wc = &w[(p % g.c_in) * kk..(p % g.c_in + 1) * kk];
        wide.iter_mut().for_each(|v| *v = T::zero());
        for ky in 0..g.k {
            for kx in 0..g.k {
                axpy(&mut wide, wc[ky * g.k + kx], &ph.data[ph.run(ky, kx, g.oh)]);
            }
        }
        for (dst, src) in op.chunks_mut(g.ow).zip(wide.chunks(ph.pw)) {
            dst.copy_from_slice(&src[..g.ow]);
        }
    }
    out
}

/// Output-gradient plane laid out on the wide grid, junk columns zeroed.
fn widen<T: Scalar>(plane: &[T], g: &ConvGeom, pw: usize, wide: &mut [T]) {
    for (dst, src) in wide.chunks_mut(pw).zip(plane.chunks(g.ow)) {
        dst[..g.ow].copy_from_slice(src);
        dst[g.ow..].iter_mut().for_each(|v| *v = T::zero());
    }
}

pub(crate) fn depthwise_backward_weight<T: Scalar>(up: &[T], x: &[T], g: &ConvGeom, dw: &mut [T]) {
    let (hw, ohw, kk) = (g.h * g.w, g.out_hw(), g.k * g.k);
    let mut ph = Phases::new(g);
    let mut wide = vec![T::zero(); g.oh * ph.pw];
    for (p, (upl, xp)) in up.chunks(ohw).zip(x.chunks(hw)).enumerate() {
        ph.fill(xp, g);
        widen(upl, g, ph.pw, &mut wide);
        let dwc = &mut dw[(p % g.c_in) * kk..(p % g.c_in + 1) * kk];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let i = ky * g.k + kx;
                dwc[i] = dwc[i] + dot(&wide, &ph.data[ph.run(ky, kx, g.oh)]);
            }
        }
    }
}

pub(crate) fn depthwise_backward_input<T: Scalar>(up: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (hw, ohw, kk) = (g.h * g.w, g.out_hw(), g.k * g.k);
    let mut ph = Phases::new(g);
    let mut wide = vec![T::zero(); g.oh * ph.pw];
    for (p, (upl, dxp)) in up.chunks(ohw).zip(dx.chunks_mut(hw)).enumerate() {
        ph.data.iter_mut().for_each(|v| *v = T::zero());
        widen(upl, g, ph.pw, &mut wide);
        let wc = &w[(p % g.c_in) * kk..(p % g.c_in + 1) * kk];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = ph.run(ky, kx, g.oh);
                axpy(&mut ph.data[r], wc[ky * g.k + kx], &wide);
            }
        }
        ph.drain_into(dxp, g);
    }
}

/// Per-channel batch mean and biased variance, accumulated in f64.
/// Sum of `f(i)` over `0..len` with eight interleaved f64 accumulators.
fn lane_sum(len: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut lanes = [0f64; 8];
    let body = len / 8 * 8;
    for base in (0..body).step_by(8) {
        for (l, acc) in lanes.iter_mut().enumerate() {
            *acc += f(base + l);
        }
    }
    let tail: f64 = (body..len).map(&f).sum();
    lanes.iter().sum::<f64>() + tail
}

/// Per-channel batch mean and biased variance, accumulated in f64.
pub(crate) fn channel_stats<T: Scalar>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    let wide = |v: T| v.to_f64().unwrap_or(f64::NAN);
    for (p, plane) in x.chunks(hw).enumerate() {
        mean[p % c] += lane_sum(plane.len(), |i| wide(plane[i]));
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (p, plane) in x.chunks(hw).enumerate() {
        let m = mean[p % c];
        var[p % c] += lane_sum(plane.len(), |i| {
            let d = wide(plane[i]) - m;
            d * d
        });
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

pub(crate) fn batch_norm_apply<T: Scalar>(
    x: &[T],
    (_, c, h, w): (usize, usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Vec<T> {
    let hw = h * w;
    let mut out = Vec::with_capacity(x.len());
    for (p, plane) in x.chunks(hw).enumerate() {
        let ch = p % c;
        let scale = gamma[ch] * inv_std[ch];
        let (m, b) = (mean[ch], beta[ch]);
        out.extend(plane.iter().map(|&v| (v - m) * scale + b));
    }
    out
}

pub(crate) fn batch_norm_param_grads<T: Scalar>(
    up: &[T],
    x: &[T],
    (_, c, h, w): (usize, usize, usize, usize),
    mean: &[T],
    inv_std: &[T],
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (p, (u, xp)) in up.chunks(hw).zip(x.chunks(hw)).enumerate() {
        let ch = p % c;
        let (m, s) = (mean[ch], inv_std[ch]);
        let mut dg = [T::zero(); 8];
        let mut db = [T::zero(); 8];
        let (cu, cx) = (u.chunks_exact(8), xp.chunks_exact(8));
        for (&ui, &xi) in cu.remainder().iter().zip(cx.remainder()) {
            dg[0] = dg[0] + ui * (xi - m);
            db[0] = db[0] + ui;
        }
        for (u8, x8) in cu.zip(cx) {
            for l in 0..8 {
                dg[l] = dg[l] + u8[l] * (x8[l] - m);
                db[l] = db[l] + u8[l];
            }
        }
        dgamma[ch] = dgamma[ch] + dg.iter().copied().sum::<T>() * s;
        dbeta[ch] = dbeta[ch] + db.iter().copied().sum::<T>();
    }
    (dgamma, dbeta)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward_input<T: Scalar>(
    up: &[T],
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    (dgamma, dbeta): (&[T], &[T]),
    train: bool,
    dx: &mut [T],
) {
    let hw = h * w;
    let count = T::from_usize_lossy(n * hw);
    for (p, ((u, xp), d)) in up.chunks(hw).zip(x.chunks(hw)).zip(dx.chunks_mut(hw)).enumerate() {
        let ch = p % c;
        let (g, m, s) = (gamma[ch], mean[ch], inv_std[ch]);
        if train {
            // dx = g·s/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
            let sum_dy = dbeta[ch];
            let sum_dy_xhat = dgamma[ch];
            let k = g * s / count;
            for ((di, &ui), &xi) in d.iter_mut().zip(u).zip(xp) {
                let xhat = (xi - m) * s;
                *di = *di + k * (count * ui - sum_dy - xhat * sum_dy_xhat);
            }
        } else {
            let k = g * s;
            for (di, &ui) in d.iter_mut().zip(u) {
                *di = *di + k * ui;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_exactly_in_bounds_outputs() {
        for (h, k, s, p) in [(5, 3, 1, 1), (6, 3, 2, 1), (7, 5, 2, 2), (4, 1, 1, 0), (3, 3, 1, 0)] {
            let g = ConvGeom::new(&[1, 1, h, h], 1, k, s, p).unwrap();
            for tap in 0..k {
                let (lo, hi) = g.valid_range(tap, g.oh, h);
                for o in 0..g.oh {
                    let pos = (o * s + tap) as isize - p as isize;
                    let inside = pos >= 0 && (pos as usize) < h;
                    assert_eq!(inside, o >= lo && o < hi, "h={h} k={k} s={s} p={p} tap={tap} o={o}");
                }
            }
        }
    }

    #[test]
    fn activation_boundary_values() {
        assert_eq!(Activation::HardSwish.apply(0.0f32), 0.0);
        assert_eq!(Activation::HardSwish.apply(-3.0f32), 0.0);
        assert_eq!(Activation::HardSwish.apply(3.0f32), 3.0);
        assert_eq!(Activation::HardSigmoid.apply(0.0f32), 0.5);
        assert_eq!(Activation::Relu6.apply(7.0f32), 6.0);
        assert_eq!(Activation::Relu.apply(-1.0f32), 0.0);
    }
}
