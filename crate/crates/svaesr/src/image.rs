//! Image tensors and 8-bit PNG I/O.
//!
//! An [`ImageTensor`] is a `C x H x W` array of `f32` with a declared value
//! range. Files on disk are always unit-range RGB; the signed range exists
//! only in memory (it is what the networks consume).

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }

    /// Peak-to-peak width, the PSNR peak value.
    pub fn width(self) -> f64 {
        match self {
            ValueRange::Unit => 1.0,
            ValueRange::Signed => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Y,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
    range: ValueRange,
    color: ColorSpace,
}

impl ImageTensor {
    /// Validating constructor: channel count must match the color space and
    /// every entry must lie within the declared range.
    pub fn new(data: Array3<f32>, range: ValueRange, color: ColorSpace) -> Result<Self> {
        let (c, h, w) = data.dim();
        let c_ok = match color {
            ColorSpace::Rgb => c == 3,
            ColorSpace::Y => c == 1,
        };
        if !c_ok || h == 0 || w == 0 {
            return Err(Error::arg(format!(
                "bad image shape {c}x{h}x{w} for {color:?}"
            )));
        }
        let (lo, hi) = range.bounds();
        if data.iter().any(|&v| !(lo..=hi).contains(&v)) {
            return Err(Error::arg(format!(
                "image entries out of declared {range:?} range"
            )));
        }
        Ok(ImageTensor { data, range, color })
    }

    /// Constructor for values already known to be in range (internal hot paths).
    pub(crate) fn from_parts(data: Array3<f32>, range: ValueRange, color: ColorSpace) -> Self {
        debug_assert!(ImageTensor::new(data.clone(), range, color).is_ok());
        ImageTensor { data, range, color }
    }

    pub fn constant(c: usize, h: usize, w: usize, value: f32, range: ValueRange) -> Result<Self> {
        let color = if c == 1 { ColorSpace::Y } else { ColorSpace::Rgb };
        ImageTensor::new(Array3::from_elem((c, h, w), value), range, color)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Convert to the signed range (identity if already signed).
    pub fn to_signed(&self) -> ImageTensor {
        match self.range {
            ValueRange::Signed => self.clone(),
            ValueRange::Unit => ImageTensor {
                data: self.data.mapv(|v| v * 2.0 - 1.0),
                range: ValueRange::Signed,
                color: self.color,
            },
        }
    }

    /// Convert to the unit range (identity if already unit).
    pub fn to_unit(&self) -> ImageTensor {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Signed => ImageTensor {
                data: self.data.mapv(|v| (v + 1.0) * 0.5),
                range: ValueRange::Unit,
                color: self.color,
            },
        }
    }

    /// Crop `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if h == 0 || w == 0 || top + h > self.height() || left + w > self.width() {
            return Err(Error::arg(format!(
                "crop {top},{left} {h}x{w} exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        let data = self
            .data
            .slice(ndarray::s![.., top..top + h, left..left + w])
            .to_owned();
        Ok(ImageTensor {
            data,
            range: self.range,
            color: self.color,
        })
    }

    /// RGB value at a pixel as an array (single-channel images replicate).
    pub fn pixel_rgb(&self, y: usize, x: usize) -> [f32; 3] {
        if self.channels() == 3 {
            [
                self.data[[0, y, x]],
                self.data[[1, y, x]],
                self.data[[2, y, x]],
            ]
        } else {
            let v = self.data[[0, y, x]];
            [v, v, v]
        }
    }
}

/// BT.601 full-swing luma: `Y = 0.299 R + 0.587 G + 0.114 B`.
///
/// The coefficients sum to 1, so the output stays within the input's declared
/// range (no studio-swing offset; PSNR is range-normalized anyway).
pub fn rgb_to_y(img: &ImageTensor) -> Result<ImageTensor> {
    if img.color() != ColorSpace::Rgb {
        return Err(Error::arg("rgb_to_y wants an RGB input"));
    }
    let (_, h, w) = img.data().dim();
    let mut out = Array3::zeros((1, h, w));
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            out[[0, y, x]] =
                0.299 * d[[0, y, x]] + 0.587 * d[[1, y, x]] + 0.114 * d[[2, y, x]];
        }
    }
    Ok(ImageTensor::from_parts(out, img.range(), ColorSpace::Y))
}

/// Load an 8-bit PNG (or other 8-bit image file) as a unit-range RGB tensor.
///
/// Grayscale files are replicated to RGB; alpha is stripped. 16-bit inputs are
/// rejected rather than silently truncated.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    use image::DynamicImage::*;
    let rgb = match dynimg {
        ImageLuma16(_) | ImageLumaA16(_) | ImageRgb16(_) | ImageRgba16(_) | ImageRgb32F(_)
        | ImageRgba32F(_) => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: "unsupported bit depth (only 8-bit images are handled)".into(),
            })
        }
        other => other.to_rgb8(),
    };
    let (w, h) = rgb.dimensions();
    let mut data = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(ImageTensor::from_parts(
        data,
        ValueRange::Unit,
        ColorSpace::Rgb,
    ))
}

/// Quantize a unit-range value to a byte: clamp, then round half away from zero.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save as an 8-bit RGB PNG. Signed-range tensors are converted to unit range
/// first; single-channel tensors are replicated, keeping disk files RGB.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let unit = img.to_unit();
    let (h, w) = (unit.height(), unit.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let rgb = unit.pixel_rgb(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    quantize_u8(rgb[0]),
                    quantize_u8(rgb[1]),
                    quantize_u8(rgb[2]),
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
