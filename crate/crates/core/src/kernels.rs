//! Raw slice kernels behind the graph operations. Everything here works on
//! single `C, H, W` planes; batching happens in the callers.

use crate::tensor::{matmul, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    /// 1x1, stride 1, no padding: the input plane already is the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lower one `C, H, W` sample into a `(C*K*K, Ho*Wo)` patch matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ow = g.out_w;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * g.out_plane()..(row + 1) * g.out_plane()];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if s == 1 {
                        // ix = ox + kj - p; valid ox range is contiguous
                        let shift = kj as isize - p;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (g.in_w as isize - shift).clamp(0, ow as isize) as usize;
                        out_row[..lo].fill(T::ZERO);
                        if hi > lo {
                            let start = (lo as isize + shift) as usize;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                        out_row[hi.max(lo)..].fill(T::ZERO);
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *v = if ix < 0 || ix >= g.in_w as isize {
                                T::ZERO
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto a `C, H, W` sample gradient.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ow = g.out_w;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * g.out_plane()..(row + 1) * g.out_plane()];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let grad_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in grad_row.iter().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward over a batch. `out` is `N, O, Ho, Wo`.
pub fn conv_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    g: &ConvGeometry,
    out: &mut [T],
) {
    let in_len = g.in_channels * g.in_plane();
    let out_len = g.out_channels * g.out_plane();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; g.patch_len() * g.out_plane()]
    };
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let os = &mut out[n * out_len..(n + 1) * out_len];
        for (o, row) in os.chunks_mut(g.out_plane()).enumerate() {
            row.fill(bias[o]);
        }
        let patches: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        matmul(
            g.out_channels,
            g.patch_len(),
            g.out_plane(),
            weight,
            false,
            patches,
            false,
            os,
            true,
        );
    }
}

/// Convolution backward. Any of the gradient outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    batch: usize,
    g: &ConvGeometry,
    mut dx: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let in_len = g.in_channels * g.in_plane();
    let out_len = g.out_channels * g.out_plane();
    let mut cols = vec![T::ZERO; g.patch_len() * g.out_plane()];
    let mut dcols = vec![T::ZERO; g.patch_len() * g.out_plane()];
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let ds = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = dbias.as_deref_mut() {
            for (o, row) in ds.chunks(g.out_plane()).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            let patches: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            matmul(
                g.out_channels,
                g.out_plane(),
                g.patch_len(),
                ds,
                false,
                patches,
                true,
                dw,
                true,
            );
        }
        if let Some(dxa) = dx.as_deref_mut() {
            let dxs = &mut dxa[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                matmul(
                    g.patch_len(),
                    g.out_channels,
                    g.out_plane(),
                    weight,
                    true,
                    ds,
                    false,
                    dxs,
                    true,
                );
            } else {
                matmul(
                    g.patch_len(),
                    g.out_channels,
                    g.out_plane(),
                    weight,
                    true,
                    ds,
                    false,
                    &mut dcols,
                    false,
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
}

/// Non-overlapping `k x k` max pooling over `planes` planes of `h x w`.
/// Records, per output, the flat input offset of the winning element; ties
/// keep the first element in row-major window order.
pub fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / k, w / k);
    if k == 2 {
        return maxpool2_forward(x, planes, h, w, out, argmax);
    }
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * k * w + ox * k;
                let mut best = x[best_idx];
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * k + ky) * w + ox * k + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

/// 2x2 windows; same tie rule as the general path (first of row-major).
fn maxpool2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            let r0 = base + 2 * oy * w;
            let r1 = r0 + w;
            let top = &x[r0..r0 + w];
            let bot = &x[r1..r1 + w];
            let o = p * oh * ow + oy * ow;
            let (orow, arow) = (&mut out[o..o + ow], &mut argmax[o..o + ow]);
            for ox in 0..ow {
                let c = 2 * ox;
                let mut best = top[c];
                let mut idx = r0 + c;
                if top[c + 1] > best {
                    best = top[c + 1];
                    idx = r0 + c + 1;
                }
                if bot[c] > best {
                    best = bot[c];
                    idx = r1 + c;
                }
                if bot[c + 1] > best {
                    best = bot[c + 1];
                    idx = r1 + c + 1;
                }
                orow[ox] = best;
                arow[ox] = idx as u32;
            }
        }
    }
}

pub fn upsample_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    out: &mut [T],
) {
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, v) in drow.iter_mut().enumerate() {
                *v = srow[ox / factor];
            }
        }
    }
}

pub fn upsample_backward<T: Real>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    dx: &mut [T],
) {
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let drow = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
            for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                drow[ox / factor] += v;
            }
        }
    }
}

/// Numerically stable softmax over consecutive rows of length `row`.
pub fn softmax_rows<T: Real>(x: &[T], row: usize, out: &mut [T]) {
    for (xs, os) in x.chunks(row).zip(out.chunks_mut(row)) {
        let max = xs
            .iter()
            .copied()
            .fold(xs[0], |m, v| if v > m { v } else { m });
        let mut total = 0.0f64;
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - max).exp();
            total += o.to_f64();
        }
        let inv = 1.0 / total;
        for o in os.iter_mut() {
            *o = T::from_f64(o.to_f64() * inv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-definition convolution used as an independent oracle.
    fn direct_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let k = g.kernel;
        let mut out = vec![0.0; g.out_channels * g.out_plane()];
        for o in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[o];
                    for c in 0..g.in_channels {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                acc += x[c * g.in_plane() + iy as usize * g.in_w + ix as usize]
                                    * w[((o * g.in_channels + c) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[o * g.out_plane() + oy * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn lowered_conv_matches_direct_definition() {
        for &(c, o, k, s, p, h, w) in &[
            (1, 1, 1, 1, 0, 3, 3),
            (3, 4, 3, 1, 1, 7, 5),
            (2, 3, 5, 1, 2, 8, 8),
            (2, 2, 3, 2, 1, 9, 6),
            (1, 2, 2, 2, 0, 4, 4),
        ] {
            let out_h = (h + 2 * p - k) / s + 1;
            let out_w = (w + 2 * p - k) / s + 1;
            let g = ConvGeometry {
                in_channels: c,
                out_channels: o,
                kernel: k,
                stride: s,
                pad: p,
                in_h: h,
                in_w: w,
                out_h,
                out_w,
            };
            let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let b: Vec<f64> = (0..o).map(|i| i as f64 * 0.25).collect();
            let mut out = vec![0.0; o * out_h * out_w];
            conv_forward(&x, &wt, &b, 1, &g, &mut out);
            assert_eq!(out, direct_conv(&x, &wt, &b, &g), "geometry {g:?}");
        }
    }

    #[test]
    fn maxpool_ties_pick_first_index() {
        let x = [5.0f32; 4];
        let mut out = [0.0f32; 1];
        let mut arg = [9u32; 1];
        maxpool_forward(&x, 1, 2, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 5.0);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn pool2_fast_path_matches_window_scan() {
        // small integer values force many ties
        let (planes, h, w) = (3, 6, 8);
        let x: Vec<f32> = (0..planes * h * w).map(|i| ((i * 7919) % 5) as f32).collect();
        let mut out = vec![0.0f32; planes * h * w / 4];
        let mut arg = vec![0u32; out.len()];
        maxpool_forward(&x, planes, h, w, 2, &mut out, &mut arg);
        for p in 0..planes {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let cands = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dy, dx)| p * h * w + (2 * oy + dy) * w + 2 * ox + dx);
                    let best = cands.iter().copied().fold(cands[0], |b, i| if x[i] > x[b] { i } else { b });
                    let o = p * (h / 2) * (w / 2) + oy * (w / 2) + ox;
                    assert_eq!(arg[o] as usize, best);
                    assert_eq!(out[o], x[best]);
                }
            }
        }
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let dout = [1.0f32; 16];
        let mut dx = [0.0f32; 4];
        upsample_backward(&dout, 1, 2, 2, 2, &mut dx);
        assert_eq!(dx, [4.0; 4]);
    }
}
