//! Deterministic synthetic test images.
//!
//! Natural-image-like fodder for desk-scale runs where no photo corpus is
//! available: a smooth multi-scale cosine field (roughly 1/f amplitude) with
//! a handful of soft-edged elliptical patches layered on top, so there is
//! both low-frequency structure and genuine edges to super-resolve.

use ndarray::Array3;
use rand::Rng;

use crate::image::{ColorSpace, ImageTensor, ValueRange};
use crate::rngstream::stream;

/// Generate an `h x w` unit-range RGB image, fully determined by `seed`.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = stream(seed, &[0x5e_ed]);
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..24)
        .map(|_| {
            let freq = (rng.random_range(0.5f64.ln()..14.0f64.ln())).exp();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = 1.0 / freq.powf(0.9);
            let mix = [
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
            ];
            (freq, theta, phase, amp, mix)
        })
        .collect();
    let blobs: Vec<([f64; 2], [f64; 2], f64, [f64; 3], f64, f64)> = (0..5)
        .map(|_| {
            let center = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            let radii = [rng.random_range(0.08..0.35), rng.random_range(0.08..0.35)];
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let color = [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ];
            let sharp = rng.random_range(12.0..60.0);
            let opacity = rng.random_range(0.4..0.9);
            (center, radii, angle, color, sharp, opacity)
        })
        .collect();

    let mut data = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        let fy = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64;
            let mut px = [0.5f64; 3];
            for (freq, theta, phase, amp, mix) in &waves {
                let u = fx * theta.cos() + fy * theta.sin();
                let v = (std::f64::consts::TAU * freq * u + phase).cos() * amp * 0.22;
                for c in 0..3 {
                    px[c] += v * mix[c];
                }
            }
            for (center, radii, angle, color, sharp, opacity) in &blobs {
                let (dx, dy) = (fx - center[0], fy - center[1]);
                let (ca, sa) = (angle.cos(), angle.sin());
                let rx = (dx * ca + dy * sa) / radii[0];
                let ry = (-dx * sa + dy * ca) / radii[1];
                let d = (rx * rx + ry * ry).sqrt();
                let m = opacity / (1.0 + (sharp * (d - 1.0)).exp());
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - m) + color[c] * m;
                }
            }
            for c in 0..3 {
                data[[c, y, x]] = (px[c] as f32).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::from_parts(data, ValueRange::Unit, ColorSpace::Rgb)
}

/// Write `count` synthetic PNGs into a directory, named `img_000.png`, ...
pub fn write_synthetic_corpus(
    dir: &std::path::Path,
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> crate::error::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let p = dir.join(format!("img_{i:03}.png"));
        crate::image::save_image(&synthetic_image(h, w, seed.wrapping_add(i as u64)), &p)?;
        paths.push(p);
    }
    Ok(paths)
}
