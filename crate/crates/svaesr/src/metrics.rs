//! PSNR.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Identical images report this instead of infinity, so evaluation loops
/// never abort on a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Mean squared error after cropping `border_crop` pixels from every edge.
pub fn mse(a: &ImageTensor, b: &ImageTensor, border_crop: usize) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::arg(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    if a.range() != b.range() {
        return Err(Error::arg("psnr value_range mismatch"));
    }
    let (c, h, w) = a.data().dim();
    if 2 * border_crop >= h || 2 * border_crop >= w {
        return Err(Error::arg(format!(
            "border crop {border_crop} leaves no pixels in {h}x{w}"
        )));
    }
    let (y0, y1) = (border_crop, h - border_crop);
    let (x0, x1) = (border_crop, w - border_crop);
    let mut acc = 0.0f64;
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                let d = a.data()[[ch, y, x]] as f64 - b.data()[[ch, y, x]] as f64;
                acc += d * d;
            }
        }
    }
    Ok(acc / (c * (y1 - y0) * (x1 - x0)) as f64)
}

/// Peak signal-to-noise ratio in dB, `10 log10(peak^2 / MSE)` with
/// peak = declared range width, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor, border_crop: usize) -> Result<f64> {
    let e = mse(a, b, border_crop)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let peak = a.range().width();
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{ColorSpace, ValueRange};
    use crate::rngstream::stream;
    use ndarray::Array3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pair(seed: u64) -> (ImageTensor, ImageTensor) {
        let mut rng = stream(seed, &[0x9514]);
        let a = Array3::from_shape_fn((3, 12, 10), |_| rng.random::<f32>());
        let b = Array3::from_shape_fn((3, 12, 10), |_| rng.random::<f32>());
        (
            ImageTensor::new(a, ValueRange::Unit, ColorSpace::Rgb).unwrap(),
            ImageTensor::new(b, ValueRange::Unit, ColorSpace::Rgb).unwrap(),
        )
    }

    #[test]
    fn identical_images_hit_cap() {
        let (a, _) = random_pair(1);
        assert_eq!(psnr(&a, &a, 0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn constant_offset_gives_twenty_db() {
        let a = ImageTensor::constant(3, 8, 8, 0.2, ValueRange::Unit).unwrap();
        let b = ImageTensor::constant(3, 8, 8, 0.3, ValueRange::Unit).unwrap();
        let p = psnr(&a, &b, 0).unwrap();
        assert!((p - 20.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let (a, b) = random_pair(2);
        for crop in [0usize, 1, 2] {
            // direct double-loop oracle, accumulating in a different order
            // (pixel-major over channels) than the implementation
            let (c, h, w) = a.data().dim();
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for y in crop..h - crop {
                for x in crop..w - crop {
                    for ch in 0..c {
                        let d = a.data()[[ch, y, x]] as f64 - b.data()[[ch, y, x]] as f64;
                        acc += d * d;
                        n += 1;
                    }
                }
            }
            let expect = 10.0 * (1.0 / (acc / n as f64)).log10();
            let got = psnr(&a, &b, crop).unwrap();
            assert!((got - expect).abs() < 1e-9, "crop {crop}: {got} vs {expect}");
        }
    }

    #[test]
    fn symmetric_exactly() {
        let (a, b) = random_pair(3);
        assert_eq!(psnr(&a, &b, 1).unwrap(), psnr(&b, &a, 1).unwrap());
    }

    #[test]
    fn monotone_in_noise_amplitude() {
        let base = ImageTensor::constant(3, 16, 16, 0.5, ValueRange::Unit).unwrap();
        let mut rng = stream(4, &[0x9515]);
        let mut prev = f64::INFINITY;
        for sigma in [0.01f64, 0.03, 0.09] {
            let normal = Normal::new(0.0, sigma).unwrap();
            let noisy = base
                .data()
                .mapv(|v| (v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0));
            let noisy = ImageTensor::new(noisy, ValueRange::Unit, ColorSpace::Rgb).unwrap();
            let p = psnr(&base, &noisy, 0).unwrap();
            assert!(p < prev, "psnr should fall as noise grows: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn shape_and_range_mismatch_rejected() {
        let a = ImageTensor::constant(3, 8, 8, 0.2, ValueRange::Unit).unwrap();
        let b = ImageTensor::constant(3, 8, 9, 0.2, ValueRange::Unit).unwrap();
        assert!(psnr(&a, &b, 0).is_err());
        let c = ImageTensor::constant(3, 8, 8, 0.2, ValueRange::Signed).unwrap();
        assert!(psnr(&a, &c, 0).is_err());
        assert!(psnr(&a, &a, 4).is_err()); // crop eats everything
    }
}
