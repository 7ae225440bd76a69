//! Bicubic resampling.
//!
//! Standard separable bicubic with kernel parameter `a = -0.5` and half-pixel
//! center alignment: output pixel `i` samples the input at
//! `(i + 0.5) * (in/out) - 0.5`. When downscaling, the kernel is stretched by
//! the scale ratio (the usual antialiased convention shared by MATLAB's
//! `imresize` and PIL), weights are renormalized to sum to 1, and borders
//! replicate. Kernel overshoot is clipped to the tensor's declared range.

use ndarray::{Array3, ArrayView1, ArrayViewMut1};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic_kernel(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Per-output-pixel tap positions and normalized weights along one axis.
struct AxisWeights {
    /// (first input index, weights) per output index; indices are clamped
    /// into range during application (border replicate).
    taps: Vec<(i64, Vec<f64>)>,
}

fn axis_weights(in_len: usize, out_len: usize) -> AxisWeights {
    let ratio = in_len as f64 / out_len as f64;
    let sratio = ratio.max(1.0); // kernel stretch, downscale only
    let support = 2.0 * sratio;
    let mut taps = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * ratio - 0.5;
        let left = (center - support).floor() as i64;
        let right = (center + support).ceil() as i64;
        let mut w = Vec::with_capacity((right - left + 1) as usize);
        let mut sum = 0.0;
        for j in left..=right {
            let v = cubic_kernel((j as f64 - center) / sratio);
            sum += v;
            w.push(v);
        }
        if sum != 0.0 {
            for v in &mut w {
                *v /= sum;
            }
        }
        taps.push((left, w));
    }
    AxisWeights { taps }
}

fn resample_line(src: ArrayView1<f64>, mut dst: ArrayViewMut1<f64>, w: &AxisWeights) {
    let n = src.len() as i64;
    for (i, (left, weights)) in w.taps.iter().enumerate() {
        let mut acc = 0.0;
        for (k, &wv) in weights.iter().enumerate() {
            let j = (*left + k as i64).clamp(0, n - 1) as usize;
            acc += wv * src[j];
        }
        dst[i] = acc;
    }
}

/// Resize to explicit output dimensions.
pub fn bicubic_resize_to(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!(
            "degenerate bicubic output size {out_h}x{out_w}"
        )));
    }
    let (c, h, w) = img.data().dim();
    let src = img.data().mapv(f64::from);

    // rows
    let wh = axis_weights(h, out_h);
    let mut mid = ndarray::Array3::<f64>::zeros((c, out_h, w));
    for ch in 0..c {
        for x in 0..w {
            resample_line(
                src.slice(ndarray::s![ch, .., x]),
                mid.slice_mut(ndarray::s![ch, .., x]),
                &wh,
            );
        }
    }
    // columns
    let ww = axis_weights(w, out_w);
    let mut out = ndarray::Array3::<f64>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for y in 0..out_h {
            resample_line(
                mid.slice(ndarray::s![ch, y, ..]),
                out.slice_mut(ndarray::s![ch, y, ..]),
                &ww,
            );
        }
    }

    let (lo, hi) = img.range().bounds();
    let data: Array3<f32> = out.mapv(|v| (v as f32).clamp(lo, hi));
    Ok(ImageTensor::from_parts(data, img.range(), img.color()))
}

/// Resize by a scale factor; output dims are `round(dim * scale)`.
pub fn bicubic_resize(img: &ImageTensor, scale: f64) -> Result<ImageTensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::arg(format!("bicubic scale must be positive, got {scale}")));
    }
    let out_h = (img.height() as f64 * scale).round() as usize;
    let out_w = (img.width() as f64 * scale).round() as usize;
    bicubic_resize_to(img, out_h, out_w)
}
