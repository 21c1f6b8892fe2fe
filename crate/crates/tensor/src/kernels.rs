//! Per-sample compute kernels behind the graph ops.

use crate::gemm::{gemm, gemm_strided, Strided};

/// Geometry of a square-kernel 2-D convolution on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the unfolded patch matrix, `C * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// 1x1, stride 1, no padding: the input already is its own patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output indices `o` in `[lo, hi)` whose input index `o * stride + offset - padding`
/// falls inside `[0, len)`.
fn valid_range(out: usize, stride: usize, offset: usize, padding: usize, len: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(offset).div_ceil(stride);
    if len + padding <= offset {
        return (0, 0);
    }
    let hi = ((len + padding - offset - 1) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Unfolds one sample `(C, H, W)` into `cols`, a `(C*k*k, Ho*Wo)` matrix.
pub fn im2col(input: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    im2col_rows(input, g, 0, g.out_height(), cols);
}

/// [`im2col`] restricted to output rows `oy0..oy1`; `cols` is
/// `(C*k*k, (oy1 - oy0) * Wo)`.
pub fn im2col_rows(input: &[f64], g: &ConvGeometry, oy0: usize, oy1: usize, cols: &mut [f64]) {
    let ow = g.out_width();
    let t = (oy1 - oy0) * ow;
    let k = g.kernel;
    let s = g.stride;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (vy0, vy1) = valid_range(g.out_height(), s, ky, g.padding, g.height);
            let (y0, y1) = (vy0.clamp(oy0, oy1), vy1.clamp(oy0, oy1));
            for kx in 0..k {
                let (x0, x1) = valid_range(ow, s, kx, g.padding, g.width);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * t..(row + 1) * t];
                dst[..(y0 - oy0) * ow].fill(0.0);
                dst[(y1 - oy0) * ow..].fill(0.0);
                for oy in y0..y1 {
                    let iy = oy * s + ky - g.padding;
                    let line = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    line[..x0].fill(0.0);
                    line[x1..].fill(0.0);
                    if x1 == x0 {
                        continue;
                    }
                    let ix0 = x0 * s + kx - g.padding;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    if s == 1 {
                        line[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for (d, v) in line[x0..x1].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `grad_input`.
pub fn col2im(cols: &[f64], g: &ConvGeometry, grad_input: &mut [f64]) {
    col2im_rows(cols, g, 0, g.out_height(), grad_input);
}

/// Adjoint of [`im2col_rows`].
pub fn col2im_rows(cols: &[f64], g: &ConvGeometry, oy0: usize, oy1: usize, grad_input: &mut [f64]) {
    let ow = g.out_width();
    let t = (oy1 - oy0) * ow;
    let k = g.kernel;
    let s = g.stride;
    for c in 0..g.in_channels {
        let plane = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (vy0, vy1) = valid_range(g.out_height(), s, ky, g.padding, g.height);
            let (y0, y1) = (vy0.clamp(oy0, oy1), vy1.clamp(oy0, oy1));
            for kx in 0..k {
                let (x0, x1) = valid_range(ow, s, kx, g.padding, g.width);
                if x1 == x0 {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * t..(row + 1) * t];
                for oy in y0..y1 {
                    let iy = oy * s + ky - g.padding;
                    let ix0 = x0 * s + kx - g.padding;
                    let line = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let from = &src[(oy - oy0) * ow + x0..(oy - oy0) * ow + x1];
                    for (d, v) in line[ix0..].iter_mut().step_by(s).zip(from) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Unfolded tiles are kept near this many elements so they stay in cache.
const TILE_ELEMENTS: usize = 1 << 14;

/// Output-row tiles `(oy0, oy1)` covering the whole output.
fn row_tiles(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let oh = g.out_height();
    let rows = (TILE_ELEMENTS / (g.patch_len() * g.out_width()).max(1)).clamp(1, oh);
    (0..oh).step_by(rows).map(move |r| (r, (r + rows).min(oh)))
}

/// Batched forward convolution. `input` is `(N, C, H, W)`, `weight` is
/// `(O, C, k, k)`, output is `(N, O, Ho, Wo)`.
pub fn conv2d_forward(
    input: &[f64],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let per_in = g.in_channels * g.height * g.width;
    let p = g.positions();
    let kk = g.patch_len();
    let ow = g.out_width();
    let mut out = vec![0.0; batch * out_channels * p];
    let mut cols = Vec::new();
    let w = Strided::dense(weight, out_channels, kk, false);
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    for n in 0..batch {
        let x = &input[n * per_in..(n + 1) * per_in];
        let y = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.fill(b[o]);
            }
        }
        if g.is_pointwise() {
            gemm(out_channels, kk, p, 1.0, weight, false, x, false, beta, y);
            continue;
        }
        for (oy0, oy1) in row_tiles(g) {
            let t = (oy1 - oy0) * ow;
            cols.resize(kk * t, 0.0);
            im2col_rows(x, g, oy0, oy1, &mut cols);
            let patches = Strided::dense(&cols, kk, t, false);
            gemm_strided(out_channels, kk, t, 1.0, w, patches, beta, &mut y[oy0 * ow..], p);
        }
    }
    out
}

/// Gradients of a batched convolution; each requested output is accumulated
/// in sample order so results do not depend on scheduling.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f64],
    out_channels: usize,
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let per_in = g.in_channels * g.height * g.width;
    let p = g.positions();
    let kk = g.patch_len();
    let ow = g.out_width();
    let mut grad_input = want_input.then(|| vec![0.0; batch * per_in]);
    let mut grad_weight = want_weight.then(|| vec![0.0; out_channels * kk]);
    let mut grad_bias = want_bias.then(|| vec![0.0; out_channels]);
    let pointwise = g.is_pointwise();
    let wt = Strided::dense(weight, kk, out_channels, true);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for n in 0..batch {
        let x = &input[n * per_in..(n + 1) * per_in];
        let dy = &grad_out[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(db) = grad_bias.as_mut() {
            for (o, row) in dy.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        if pointwise {
            if let Some(dw) = grad_weight.as_mut() {
                gemm(out_channels, p, kk, 1.0, dy, false, x, true, 1.0, dw);
            }
            if let Some(dx_all) = grad_input.as_mut() {
                let dx = &mut dx_all[n * per_in..(n + 1) * per_in];
                gemm(kk, out_channels, p, 1.0, weight, true, dy, false, 1.0, dx);
            }
            continue;
        }
        for (oy0, oy1) in row_tiles(g) {
            let t = (oy1 - oy0) * ow;
            let dy_tile = Strided {
                data: &dy[oy0 * ow..],
                row_stride: p,
                col_stride: 1,
            };
            if let Some(dw) = grad_weight.as_mut() {
                cols.resize(kk * t, 0.0);
                im2col_rows(x, g, oy0, oy1, &mut cols);
                let patches_t = Strided::dense(&cols, t, kk, true);
                gemm_strided(out_channels, t, kk, 1.0, dy_tile, patches_t, 1.0, dw, kk);
            }
            if let Some(dx_all) = grad_input.as_mut() {
                let dx = &mut dx_all[n * per_in..(n + 1) * per_in];
                dcols.resize(kk * t, 0.0);
                gemm_strided(kk, out_channels, t, 1.0, wt, dy_tile, 0.0, &mut dcols, t);
                col2im_rows(&dcols, g, oy0, oy1, dx);
            }
        }
    }
    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

/// Two-tap linear interpolation weights for 2x upsampling along one axis,
/// half-pixel centred (`align_corners = false`).
pub fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

/// `planes` independent `(H, W)` planes upsampled to `(2H, 2W)`.
pub fn upsample_nearest(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    out
}

pub fn upsample_bilinear(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(grad: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = src[y * ow + x];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(input: &[f64], g: &ConvGeometry, weight: &[f64], out_c: usize) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; out_c * oh * ow];
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < g.height
                                    && (ix as usize) < g.width
                                {
                                    let wv = weight
                                        [((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
                                    acc += wv
                                        * input[(c * g.height + iy as usize) * g.width + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(stride, padding, kernel) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
            let g = ConvGeometry {
                in_channels: 2,
                height: 6,
                width: 6,
                kernel,
                stride,
                padding,
            };
            let input: Vec<f64> = (0..72).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let weight: Vec<f64> = (0..3 * g.patch_len())
                .map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3)
                .collect();
            let got = conv2d_forward(&input, 1, &g, &weight, 3, None);
            let want = direct_conv(&input, &g, &weight, 3);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {padding}");
            }
        }
    }

    #[test]
    fn valid_ranges_match_brute_force() {
        for out in 1..9 {
            for stride in 1..3 {
                for offset in 0..4 {
                    for padding in 0..3 {
                        for len in 1..12 {
                            let ok: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + offset) as isize - padding as isize;
                                    i >= 0 && i < len as isize
                                })
                                .collect();
                            let (lo, hi) = valid_range(out, stride, offset, padding, len);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), ok, "{out} {stride} {offset} {padding} {len}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stride_two_halves_even_sizes() {
        let g = ConvGeometry {
            in_channels: 1,
            height: 32,
            width: 32,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!((g.out_height(), g.out_width()), (16, 16));
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let x = vec![2.5; 3 * 4];
        let y = upsample_bilinear(&x, 1, 3, 4);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn nearest_replicates_blocks() {
        let y = upsample_nearest(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(
            y,
            vec![
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0
            ]
        );
    }
}
