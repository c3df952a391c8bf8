//! Raw forward/adjoint kernels on `C×H×W` buffers.

use super::tensor::{matmul, Scalar};

/// Unfolds `x` (`cin×h×w`) into a `(cin·k·k) × (h·w)` patch matrix with zero padding `k/2`.
pub(crate) fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut col = vec![T::zero(); cin * k * k * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize) - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let src = &plane[(src_row as isize + x_lo as isize + dx) as usize
                        ..(src_row as isize + x_hi as isize + dx) as usize];
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds patch-matrix gradients back onto the image, accumulating.
pub(crate) fn col2im<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [T],
) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize) - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (iy as usize * w) as isize + dx;
                    for xx in x_lo..x_hi {
                        let d = &mut plane[(base + xx as isize) as usize];
                        *d = *d + src[y * w + xx];
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvForward<T> {
    pub out: Vec<T>,
    /// Patch matrix, kept for the adjoint. `None` for 1×1 kernels (the input itself).
    pub col: Option<Vec<T>>,
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) -> ConvForward<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); cout * hw];
    if k == 1 {
        matmul(cout, cin, hw, weight, false, x, false, &mut out, false);
        ConvForward { out, col: None }
    } else {
        let col = im2col(x, cin, h, w, k);
        matmul(
            cout,
            cin * k * k,
            hw,
            weight,
            false,
            &col,
            false,
            &mut out,
            false,
        );
        ConvForward {
            out,
            col: Some(col),
        }
    }
}

/// Returns `(d_input, d_weight)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    col: Option<&[T]>,
    weight: &[T],
    grad_out: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let kk = cin * k * k;
    let patches = col.unwrap_or(x);
    let mut d_weight = vec![T::zero(); cout * kk];
    matmul(
        cout,
        hw,
        kk,
        grad_out,
        false,
        patches,
        true,
        &mut d_weight,
        false,
    );
    let mut d_input = vec![T::zero(); cin * hw];
    if k == 1 {
        matmul(
            cin,
            cout,
            hw,
            weight,
            true,
            grad_out,
            false,
            &mut d_input,
            false,
        );
    } else {
        let mut d_col = vec![T::zero(); kk * hw];
        matmul(
            kk, cout, hw, weight, true, grad_out, false, &mut d_col, false,
        );
        col2im(&d_col, cin, h, w, k, &mut d_input);
    }
    (d_input, d_weight)
}

/// 2×2 stride-2 max pooling. Returns pooled values and, per output element, the flat
/// input index that won (first maximum in row-major window order).
pub(crate) fn maxpool2_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &x[ch * h * w + (oy / 2) * w..ch * h * w + (oy / 2) * w + w];
            let dst = &mut out[ch * oh * ow + oy * ow..ch * oh * ow + (oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &g[ch * oh * ow + oy * ow..ch * oh * ow + (oy + 1) * ow];
            let dst = &mut out[ch * h * w + (oy / 2) * w..ch * h * w + (oy / 2 + 1) * w];
            for (ox, &v) in src.iter().enumerate() {
                dst[ox / 2] = dst[ox / 2] + v;
            }
        }
    }
    out
}

/// Softmax across the channel axis of a `c × hw` buffer.
pub(crate) fn softmax_channels<T: Scalar>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut max = x[..hw].to_vec();
    for ch in 1..c {
        for (m, &v) in max.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut out = vec![T::zero(); c * hw];
    let mut denom = vec![T::zero(); hw];
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        let dst = &mut out[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            let e = (src[p] - max[p]).exp();
            dst[p] = e;
            denom[p] = denom[p] + e;
        }
    }
    for ch in 0..c {
        for (o, &d) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&denom) {
            *o = *o / d;
        }
    }
    out
}

/// Adjoint of channel softmax: `dx = y ⊙ (dy − Σ_c y·dy)`.
pub(crate) fn softmax_channels_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    c: usize,
    hw: usize,
) -> Vec<T> {
    let mut dot = vec![T::zero(); hw];
    for ch in 0..c {
        let ys = &y[ch * hw..(ch + 1) * hw];
        let ds = &dy[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            dot[p] = dot[p] + ys[p] * ds[p];
        }
    }
    let mut dx = vec![T::zero(); c * hw];
    for ch in 0..c {
        for p in 0..hw {
            let i = ch * hw + p;
            dx[i] = y[i] * (dy[i] - dot[p]);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        wt: &[f64],
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        k: usize,
    ) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xx as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * cin + c) * k + ky) * k + kx]
                                    * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let (cin, cout, h, w) = (2, 3, 5, 4);
        for k in [1, 3] {
            let x: Vec<f64> = (0..cin * h * w)
                .map(|i| ((i * 7) % 11) as f64 - 5.0)
                .collect();
            let wt: Vec<f64> = (0..cout * cin * k * k)
                .map(|i| ((i * 3) % 5) as f64 * 0.25 - 0.5)
                .collect();
            let got = conv2d_forward(&x, &wt, cin, cout, h, w, k).out;
            let want = naive_conv(&x, &wt, cin, cout, h, w, k);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)>
        let (c, h, w, k) = (2, 4, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..c * k * k * h * w)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let col = im2col(&x, c, h, w, k);
        let lhs: f64 = col.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * h * w];
        col2im(&g, c, h, w, k, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_ties_resolve_to_first_in_row_major_order() {
        let x = vec![1.0f64, 1.0, 1.0, 1.0];
        let (out, arg) = maxpool2_forward(&x, 1, 2, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
        let x = vec![0.0f64, 2.0, 2.0, 1.0];
        assert_eq!(maxpool2_forward(&x, 1, 2, 2).1, vec![1]);
    }
}
