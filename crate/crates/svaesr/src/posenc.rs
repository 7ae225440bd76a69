//! Sinusoidal positional encoding and its low/high frequency band split.
//!
//! A signal component `o` is lifted to `(sin(2^k pi o), cos(2^k pi o))` for
//! octaves `k = 0 .. L-1`. The code is laid out component-major,
//! octave-minor, sin before cos. The first `L/2` octaves of every component
//! form the low-frequency coding (LFC), the rest the high-frequency coding
//! (HFC); the two drive separate decoder paths.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosEncConfig {
    degree_l: usize,
    input_dim: usize,
}

impl PosEncConfig {
    /// `degree_l` must be even and at least 2 so the band split is balanced.
    pub fn new(degree_l: usize, input_dim: usize) -> Result<Self> {
        if degree_l < 2 || degree_l % 2 != 0 {
            return Err(Error::arg(format!(
                "positional encoding degree must be even and >= 2, got {degree_l}"
            )));
        }
        if input_dim == 0 {
            return Err(Error::arg("positional encoding input_dim must be positive"));
        }
        Ok(PosEncConfig {
            degree_l,
            input_dim,
        })
    }

    /// Degenerate L = 0 configuration for ablation runs: empty codes, raw
    /// coordinates only. Not reachable through config validation.
    pub fn raw_only(input_dim: usize) -> Self {
        PosEncConfig {
            degree_l: 0,
            input_dim,
        }
    }

    pub fn degree_l(&self) -> usize {
        self.degree_l
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Encoded length `2 * L * input_dim`.
    pub fn out_len(&self) -> usize {
        2 * self.degree_l * self.input_dim
    }

    /// Length of each band after the split, `L * input_dim`.
    pub fn band_len(&self) -> usize {
        self.degree_l * self.input_dim
    }
}

fn check_input(o: &[f64], cfg: &PosEncConfig) -> Result<()> {
    if o.len() != cfg.input_dim {
        return Err(Error::arg(format!(
            "encode wants {} components, got {}",
            cfg.input_dim,
            o.len()
        )));
    }
    if o.iter().any(|&v| !(-1.0..=1.0).contains(&v) || v.is_nan()) {
        return Err(Error::arg(
            "encode components must lie in [-1, 1]; normalize coordinates upstream",
        ));
    }
    Ok(())
}

/// Encode one signal: per component, per octave, `(sin, cos)` pairs.
pub fn encode(o: &[f64], cfg: &PosEncConfig) -> Result<Vec<f64>> {
    check_input(o, cfg)?;
    let mut out = Vec::with_capacity(cfg.out_len());
    for &v in o {
        for k in 0..cfg.degree_l {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(out)
}

/// Analytic Jacobian of [`encode`]: `out_len x input_dim`.
pub fn encode_jacobian(o: &[f64], cfg: &PosEncConfig) -> Result<Array2<f64>> {
    check_input(o, cfg)?;
    let mut jac = Array2::zeros((cfg.out_len(), cfg.input_dim));
    for (c, &v) in o.iter().enumerate() {
        for k in 0..cfg.degree_l {
            let omega = (1u64 << k) as f64 * std::f64::consts::PI;
            let arg = omega * v;
            let row = (c * cfg.degree_l + k) * 2;
            jac[[row, c]] = omega * arg.cos();
            jac[[row + 1, c]] = -omega * arg.sin();
        }
    }
    Ok(jac)
}

fn check_code(code: &[f64], cfg: &PosEncConfig) -> Result<()> {
    if code.len() != cfg.out_len() {
        return Err(Error::arg(format!(
            "band split wants a code of length {}, got {}",
            cfg.out_len(),
            code.len()
        )));
    }
    Ok(())
}

/// Split a code into (LFC, HFC): octaves `0..L/2` vs `L/2..L` of every
/// component, preserving relative order. Each half has length
/// `L * input_dim`.
pub fn split_bands(code: &[f64], cfg: &PosEncConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    check_code(code, cfg)?;
    let half = cfg.degree_l / 2;
    let mut lfc = Vec::with_capacity(cfg.band_len());
    let mut hfc = Vec::with_capacity(cfg.band_len());
    for c in 0..cfg.input_dim {
        for k in 0..cfg.degree_l {
            let at = (c * cfg.degree_l + k) * 2;
            let dst = if k < half { &mut lfc } else { &mut hfc };
            dst.push(code[at]);
            dst.push(code[at + 1]);
        }
    }
    Ok((lfc, hfc))
}

/// Inverse of [`split_bands`].
pub fn merge_bands(lfc: &[f64], hfc: &[f64], cfg: &PosEncConfig) -> Result<Vec<f64>> {
    if lfc.len() != cfg.band_len() || hfc.len() != cfg.band_len() {
        return Err(Error::arg("band lengths do not match the configuration"));
    }
    let half = cfg.degree_l / 2;
    let mut code = vec![0.0; cfg.out_len()];
    for c in 0..cfg.input_dim {
        for k in 0..cfg.degree_l {
            let at = (c * cfg.degree_l + k) * 2;
            let (src, idx) = if k < half {
                (lfc, (c * half + k) * 2)
            } else {
                (hfc, (c * half + (k - half)) * 2)
            };
            code[at] = src[idx];
            code[at + 1] = src[idx + 1];
        }
    }
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::stream;
    use rand::Rng;

    #[test]
    fn zero_input_alternates_zero_one() {
        let cfg = PosEncConfig::new(3 * 2, 1).unwrap();
        // L = 6 here; the L = 3 pattern is the prefix
        let code = encode(&[0.0], &cfg).unwrap();
        for (i, v) in code.iter().enumerate() {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(*v, expect, "entry {i}");
        }
    }

    #[test]
    fn half_input_exact_angles() {
        let cfg = PosEncConfig::new(2, 1).unwrap();
        let code = encode(&[0.5], &cfg).unwrap();
        // (sin pi/2, cos pi/2, sin pi, cos pi)
        assert!((code[0] - 1.0).abs() < 1e-15);
        assert!(code[1].abs() < 1e-15);
        assert!(code[2].abs() < 1e-12);
        assert!((code[3] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let cfg = PosEncConfig::new(4, 2).unwrap();
        let o = [0.3, -0.7];
        let code = encode(&o, &cfg).unwrap();
        assert_eq!(code.len(), 16);
        let mut at = 0;
        for &v in &o {
            for k in 0..4 {
                let arg = 2f64.powi(k) * std::f64::consts::PI * v;
                assert_eq!(code[at], arg.sin());
                assert_eq!(code[at + 1], arg.cos());
                at += 2;
            }
        }
    }

    #[test]
    fn outputs_bounded() {
        let cfg = PosEncConfig::new(10, 2).unwrap();
        let mut rng = stream(11, &[0x9e]);
        for _ in 0..200 {
            let o = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            for v in encode(&o, &cfg).unwrap() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let cfg = PosEncConfig::new(4, 1).unwrap();
        assert!(encode(&[1.0001], &cfg).is_err());
        assert!(encode(&[-2.0], &cfg).is_err());
        assert!(encode(&[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn odd_or_tiny_degree_rejected() {
        assert!(PosEncConfig::new(3, 2).is_err());
        assert!(PosEncConfig::new(0, 2).is_err());
        assert!(PosEncConfig::new(1, 2).is_err());
        assert!(PosEncConfig::new(2, 0).is_err());
    }

    #[test]
    fn band_split_is_a_balanced_partition() {
        let cfg = PosEncConfig::new(4, 1).unwrap();
        let o = [0.31];
        let code = encode(&o, &cfg).unwrap();
        let (lfc, hfc) = split_bands(&code, &cfg).unwrap();
        assert_eq!(lfc.len(), 4);
        assert_eq!(hfc.len(), 4);
        // lfc holds octaves 0 and 1 in order
        assert_eq!(&lfc[..], &code[0..4]);
        assert_eq!(&hfc[..], &code[4..8]);

        let cfg = PosEncConfig::new(2, 2).unwrap();
        let code = encode(&[0.2, -0.4], &cfg).unwrap();
        let (lfc, hfc) = split_bands(&code, &cfg).unwrap();
        assert_eq!(lfc.len(), 4);
        assert_eq!(hfc.len(), 4);
    }

    #[test]
    fn split_then_merge_round_trips() {
        let mut rng = stream(12, &[0x9f]);
        for l in [2usize, 4, 6, 10] {
            for d in [1usize, 2] {
                let cfg = PosEncConfig::new(l, d).unwrap();
                let o: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let code = encode(&o, &cfg).unwrap();
                let (lfc, hfc) = split_bands(&code, &cfg).unwrap();
                let merged = merge_bands(&lfc, &hfc, &cfg).unwrap();
                assert_eq!(merged, code);
            }
        }
    }

    #[test]
    fn split_rejects_wrong_length() {
        let cfg = PosEncConfig::new(4, 2).unwrap();
        assert!(split_bands(&[0.0; 15], &cfg).is_err());
    }

    #[test]
    fn raw_only_gives_empty_codes() {
        let cfg = PosEncConfig::raw_only(2);
        assert_eq!(cfg.out_len(), 0);
        let code = encode(&[0.1, 0.2], &cfg).unwrap();
        assert!(code.is_empty());
        let (lfc, hfc) = split_bands(&code, &cfg).unwrap();
        assert!(lfc.is_empty() && hfc.is_empty());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let cfg = PosEncConfig::new(10, 2).unwrap();
        let o = [0.137, -0.618];
        let jac = encode_jacobian(&o, &cfg).unwrap();
        let h = 1e-6;
        for c in 0..2 {
            let mut op = o;
            let mut om = o;
            op[c] += h;
            om[c] -= h;
            let ep = encode(&op, &cfg).unwrap();
            let em = encode(&om, &cfg).unwrap();
            for r in 0..cfg.out_len() {
                let fd = (ep[r] - em[r]) / (2.0 * h);
                let an = jac[[r, c]];
                let rel = (fd - an).abs() / (an.abs() + fd.abs()).max(1.0);
                assert!(rel < 1e-5, "row {r} comp {c}: fd {fd} an {an}");
            }
        }
    }
}
