//! Intensity windowing and center cropping.

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `clamp((raw − lo) / (hi − lo), 0, 1)` elementwise.
pub fn window_intensity<T: Scalar>(raw: &Tensor<T>, lo: f64, hi: f64) -> Result<Tensor<T>> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "intensity window needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    let (lo_t, span) = (T::lit(lo), T::lit(hi - lo));
    Ok(raw.map(|v| ((v - lo_t) / span).max(T::zero()).min(T::one())))
}

/// Offset of a centered window of `size` inside `extent`; an odd remainder leaves
/// the extra pixel on the high-index side.
pub fn crop_offset(extent: usize, size: usize) -> usize {
    (extent - size) / 2
}

/// Centered `rows × cols` sub-window of the last two axes.
pub fn center_crop<T: Scalar>(image: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "center_crop needs at least two axes, got {shape:?}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if rows == 0 || cols == 0 || rows > h || cols > w {
        return Err(Error::InvalidArgument(format!(
            "crop {rows}×{cols} does not fit inside {h}×{w}"
        )));
    }
    let data = crop_plane_stack(image.data(), h, w, rows, cols);
    let mut out_shape = shape[..shape.len() - 2].to_vec();
    out_shape.extend([rows, cols]);
    Tensor::new(&out_shape, data)
}

/// Crops every `h×w` plane of a flat buffer; shared by images and label maps.
pub(crate) fn crop_plane_stack<V: Copy>(
    data: &[V],
    h: usize,
    w: usize,
    rows: usize,
    cols: usize,
) -> Vec<V> {
    let (top, left) = (crop_offset(h, rows), crop_offset(w, cols));
    let planes = data.len() / (h * w);
    let mut out = Vec::with_capacity(planes * rows * cols);
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for y in top..top + rows {
            out.extend_from_slice(&plane[y * w + left..y * w + left + cols]);
        }
    }
    out
}
