//! Raw numeric kernels behind the graph operations.
//!
//! Convolutions use a zero-padded "frame" per input channel. With the frame
//! flattened, every kernel tap becomes one constant offset, so a whole
//! channel contributes through a handful of long contiguous multiply-adds.
//! Output position `q` in frame coordinates reads input `q + tap_offset`.
//! Positions of `q` that fall in the padding gutter are computed and then
//! dropped.

use rayon::prelude::*;

use super::dense::for_each_index;

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    spatial: Vec<usize>,
    kernel: Vec<usize>,
    padded: Vec<usize>,
    frame_strides: Vec<usize>,
    frame_len: usize,
    valid_len: usize,
    center: usize,
    /// Offsets of the first tap of each kernel row along the last axis.
    row_offsets: Vec<usize>,
}

impl ConvGeom {
    pub fn new(spatial: &[usize], kernel: &[usize]) -> Self {
        debug_assert_eq!(spatial.len(), kernel.len());
        let pads: Vec<usize> = kernel.iter().map(|k| k / 2).collect();
        let padded: Vec<usize> = spatial.iter().zip(&pads).map(|(s, p)| s + 2 * p).collect();
        let frame_strides = super::dense::strides(&padded);
        let frame_len = padded.iter().product();
        let valid_len = spatial
            .iter()
            .zip(&frame_strides)
            .map(|(s, fs)| (s - 1) * fs)
            .sum::<usize>()
            + 1;
        let center = pads.iter().zip(&frame_strides).map(|(p, fs)| p * fs).sum();
        let rank = kernel.len();
        let mut row_offsets = Vec::new();
        for_each_index(&kernel[..rank - 1], |_, dot| {
            row_offsets.push(dot(&frame_strides[..rank - 1]));
        });
        Self {
            spatial: spatial.to_vec(),
            kernel: kernel.to_vec(),
            padded,
            frame_strides,
            frame_len,
            valid_len,
            center,
            row_offsets,
        }
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn row_len(&self) -> usize {
        *self.kernel.last().unwrap()
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial.iter().product()
    }

    /// Calls `f(src_row_start, frame_row_start)` for every row of the last axis.
    fn rows(&self, mut f: impl FnMut(usize, usize)) {
        let rank = self.spatial.len();
        let src_strides = super::dense::strides(&self.spatial);
        for_each_index(&self.spatial[..rank - 1], |_, dot| {
            f(dot(&src_strides[..rank - 1]), dot(&self.frame_strides[..rank - 1]));
        });
    }

    fn pad(&self, channel: &[f32]) -> Vec<f32> {
        let mut frame = vec![0.0; self.frame_len];
        let w = *self.spatial.last().unwrap();
        self.rows(|src, dst| {
            let dst = dst + self.center;
            frame[dst..dst + w].copy_from_slice(&channel[src..src + w]);
        });
        frame
    }

    /// Output-frame values (length `valid_len`) to a dense spatial channel.
    fn extract(&self, acc: &[f32], out: &mut [f32]) {
        let w = *self.spatial.last().unwrap();
        self.rows(|dst, src| out[dst..dst + w].copy_from_slice(&acc[src..src + w]));
    }

    /// Dense spatial gradient to an output frame with zeros in the gutter.
    fn embed(&self, grad: &[f32]) -> Vec<f32> {
        let mut frame = vec![0.0; self.valid_len];
        let w = *self.spatial.last().unwrap();
        self.rows(|src, dst| frame[dst..dst + w].copy_from_slice(&grad[src..src + w]));
        frame
    }

    /// Interior of a padded input frame as a dense spatial channel.
    fn interior(&self, frame: &[f32], out: &mut [f32]) {
        let w = *self.spatial.last().unwrap();
        self.rows(|dst, src| {
            let src = src + self.center;
            out[dst..dst + w].copy_from_slice(&frame[src..src + w]);
        });
    }

    #[allow(dead_code)]
    pub fn padded(&self) -> &[usize] {
        &self.padded
    }
}

#[inline]
fn axpy_row(acc: &mut [f32], src: &[f32], w: &[f32]) {
    let n = acc.len();
    match w.len() {
        1 => {
            let w0 = w[0];
            for (a, x) in acc.iter_mut().zip(&src[..n]) {
                *a += w0 * x;
            }
        }
        3 => {
            let (w0, w1, w2) = (w[0], w[1], w[2]);
            let (s0, s1, s2) = (&src[..n], &src[1..n + 1], &src[2..n + 2]);
            for i in 0..n {
                acc[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
            }
        }
        k => {
            for (t, &wt) in w.iter().enumerate().take(k) {
                for (a, x) in acc.iter_mut().zip(&src[t..t + n]) {
                    *a += wt * x;
                }
            }
        }
    }
}

/// Transposed counterpart of [`axpy_row`]: scatters `g` into `dst` shifted by each tap.
#[inline]
fn scatter_row(dst: &mut [f32], g: &[f32], w: &[f32]) {
    let n = g.len();
    for (t, &wt) in w.iter().enumerate() {
        if wt == 0.0 {
            continue;
        }
        for (d, x) in dst[t..t + n].iter_mut().zip(g) {
            *d += wt * x;
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    lanes.iter().map(|&v| v as f64).sum::<f64>() as f32 + tail
}

/// Channel-first convolution: `input` is `[cin, spatial..]`, `weight` is
/// `[cout, cin, kernel..]`. Returns `[cout, spatial..]`.
pub(crate) fn conv_forward(
    geom: &ConvGeom,
    cin: usize,
    cout: usize,
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let s = geom.spatial_len();
    let taps = geom.taps();
    let row = geom.row_len();
    let frames: Vec<Vec<f32>> = (0..cin)
        .into_par_iter()
        .map(|ci| geom.pad(&input[ci * s..(ci + 1) * s]))
        .collect();
    let mut out = vec![0.0; cout * s];
    out.par_chunks_mut(s).enumerate().for_each(|(co, out_c)| {
        let mut acc = vec![bias[co]; geom.valid_len];
        for (ci, frame) in frames.iter().enumerate() {
            let wbase = (co * cin + ci) * taps;
            for (r, &off) in geom.row_offsets.iter().enumerate() {
                let w = &weight[wbase + r * row..wbase + (r + 1) * row];
                if w.iter().all(|&v| v == 0.0) {
                    continue;
                }
                axpy_row(&mut acc, &frame[off..], w);
            }
        }
        geom.extract(&acc, out_c);
    });
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv_backward(
    geom: &ConvGeom,
    cin: usize,
    cout: usize,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    want_input: bool,
    want_weight: bool,
) -> ConvGrads {
    let s = geom.spatial_len();
    let taps = geom.taps();
    let row = geom.row_len();
    let frames: Vec<Vec<f32>> = if want_weight {
        (0..cin).into_par_iter().map(|ci| geom.pad(&input[ci * s..(ci + 1) * s])).collect()
    } else {
        Vec::new()
    };
    let gframes: Vec<Vec<f32>> = (0..cout)
        .into_par_iter()
        .map(|co| geom.embed(&grad_out[co * s..(co + 1) * s]))
        .collect();

    let mut gin = vec![0.0; if want_input { cin * s } else { 0 }];
    gin.par_chunks_mut(s).enumerate().for_each(|(ci, gin_c)| {
        let mut frame = vec![0.0; geom.frame_len];
        for (co, g) in gframes.iter().enumerate() {
            let wbase = (co * cin + ci) * taps;
            for (r, &off) in geom.row_offsets.iter().enumerate() {
                let w = &weight[wbase + r * row..wbase + (r + 1) * row];
                scatter_row(&mut frame[off..], g, w);
            }
        }
        geom.interior(&frame, gin_c);
    });

    let mut gw = vec![0.0; if want_weight { cout * cin * taps } else { 0 }];
    gw.par_chunks_mut(cin * taps).enumerate().for_each(|(co, gw_c)| {
        let g = &gframes[co];
        for (ci, frame) in frames.iter().enumerate() {
            for (r, &off) in geom.row_offsets.iter().enumerate() {
                for t in 0..row {
                    gw_c[ci * taps + r * row + t] = dot(g, &frame[off + t..off + t + g.len()]);
                }
            }
        }
    });

    let gb = gframes
        .iter()
        .map(|g| g.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    ConvGrads { input: gin, weight: gw, bias: gb }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn pool_axis(data: &[f32], shape: &[usize], axis: usize, factor: usize) -> Vec<f32> {
    let (outer, n, inner) = around(shape, axis);
    let m = n / factor;
    let scale = 1.0 / factor as f32;
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for i in 0..m {
            let dst = &mut out[(o * m + i) * inner..(o * m + i + 1) * inner];
            for k in 0..factor {
                let src = &data[(o * n + i * factor + k) * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
    }
    out
}

/// Adjoint of [`pool_axis`]; `shape` is the pooled (output) shape.
pub(crate) fn pool_axis_backward(grad: &[f32], shape: &[usize], axis: usize, factor: usize) -> Vec<f32> {
    let scaled: Vec<f32> = grad.iter().map(|g| g / factor as f32).collect();
    upsample_axis(&scaled, shape, axis, factor)
}

pub(crate) fn upsample_axis(data: &[f32], shape: &[usize], axis: usize, factor: usize) -> Vec<f32> {
    let (outer, n, inner) = around(shape, axis);
    let mut out = vec![0.0; outer * n * factor * inner];
    for o in 0..outer {
        for i in 0..n {
            let src = &data[(o * n + i) * inner..][..inner];
            for k in 0..factor {
                let d = (o * n * factor + i * factor + k) * inner;
                out[d..d + inner].copy_from_slice(src);
            }
        }
    }
    out
}

/// Adjoint of [`upsample_axis`]; `shape` is the upsampled (output) shape.
pub(crate) fn upsample_axis_backward(grad: &[f32], shape: &[usize], axis: usize, factor: usize) -> Vec<f32> {
    let mut summed = pool_axis(grad, shape, axis, factor);
    summed.iter_mut().for_each(|v| *v *= factor as f32);
    summed
}

/// Swaps the two leading axes of a `[a, b, inner]` buffer.
pub(crate) fn swap_leading(data: &[f32], a: usize, b: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * inner;
            let dst = (j * a + i) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop 1D convolution over `[cin, len]` with zero padding.
    fn naive_conv1d(input: &[f32], cin: usize, len: usize, w: &[f32], b: &[f32], cout: usize, k: usize) -> Vec<f32> {
        let p = k as isize / 2;
        let mut out = vec![0.0; cout * len];
        for co in 0..cout {
            for l in 0..len {
                let mut acc = b[co];
                for ci in 0..cin {
                    for t in 0..k {
                        let src = l as isize + t as isize - p;
                        if src >= 0 && (src as usize) < len {
                            acc += w[(co * cin + ci) * k + t] * input[ci * len + src as usize];
                        }
                    }
                }
                out[co * len + l] = acc;
            }
        }
        out
    }

    #[test]
    fn frame_conv_matches_direct_loops() {
        let (cin, cout, len) = (3, 2, 7);
        let input: Vec<f32> = (0..cin * len).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..cout * cin * 3).map(|i| (i as f32 * 0.91).cos()).collect();
        let b = vec![0.1, -0.2];
        let geom = ConvGeom::new(&[len], &[3]);
        let got = conv_forward(&geom, cin, cout, &input, &w, &b);
        let want = naive_conv1d(&input, cin, len, &w, &b, cout, 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn pooling_halves_and_averages() {
        let out = pool_axis(&[1.0, 3.0, 5.0, 7.0], &[4], 0, 2);
        assert_eq!(out, vec![2.0, 6.0]);
        let up = upsample_axis(&[2.0, 6.0], &[2], 0, 2);
        assert_eq!(up, vec![2.0, 2.0, 6.0, 6.0]);
    }

    #[test]
    fn swap_leading_round_trips() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let t = swap_leading(&data, 2, 3, 4);
        assert_eq!(swap_leading(&t, 3, 2, 4), data);
    }
}
