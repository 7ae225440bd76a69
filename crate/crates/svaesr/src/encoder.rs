//! Conditional encoder over pixel-coordinate tokens; it also serves as the
//! introspective discriminator.
//!
//! An image of any resolution is turned into a bag of tokens by sampling
//! pixels without replacement; each token is the signed RGB value
//! concatenated with the raw coordinate and its positional encoding. Tokens
//! of the image under test pass through self-attention, then cross-attend to
//! reference-image tokens, are mean-pooled, and a linear head emits the
//! diagonal-Gaussian latent (mean, log-variance). No sequence position index
//! is used anywhere, so the output is invariant to token order up to pooling
//! arithmetic.

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::coord::CoordGrid;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{attn_block, bind_attn_block, bind_linear, linear, AttnBlock, AttnBlockNodes, Linear, LinearNodes};
use crate::posenc::{encode, PosEncConfig};

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Diagonal Gaussian over the latent space; `log_var` is clamped to
/// `[-30, 20]` at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution<T: Scalar> {
    mean: Array1<T>,
    log_var: Array1<T>,
}

impl<T: Scalar> LatentDistribution<T> {
    pub fn new(mean: Array1<T>, log_var: Array1<T>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::arg("mean and log_var lengths differ"));
        }
        if mean.iter().any(|v| !v.is_finite()) || log_var.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("latent distribution entries must be finite"));
        }
        let (lo, hi) = (T::from_f64(LOG_VAR_MIN), T::from_f64(LOG_VAR_MAX));
        Ok(LatentDistribution {
            mean,
            log_var: log_var.mapv(|v| v.max(lo).min(hi)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<T> {
        &self.mean
    }

    pub fn log_var(&self) -> &Array1<T> {
        &self.log_var
    }
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderArch {
    pub width: usize,
    pub heads: usize,
    pub self_blocks: usize,
    pub cross_blocks: usize,
    pub d_z: usize,
    pub posenc: PosEncConfig,
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.d_z == 0 {
            return Err(Error::arg("encoder dims must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::arg(format!(
                "encoder width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.self_blocks == 0 || self.cross_blocks == 0 {
            return Err(Error::arg("encoder needs self and cross attention blocks"));
        }
        Ok(())
    }

    /// RGB (3) + raw coordinate (2) + positional encoding.
    pub fn token_dim(&self) -> usize {
        5 + self.posenc.out_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Scalar> {
    pub arch: EncoderArch,
    pub embed: Linear<T>,
    pub self_attn: Vec<AttnBlock<T>>,
    pub cross_attn: Vec<AttnBlock<T>>,
    pub head: Linear<T>,
}

pub struct EncoderNodes {
    pub embed: LinearNodes,
    pub self_attn: Vec<AttnBlockNodes>,
    pub cross_attn: Vec<AttnBlockNodes>,
    pub head: LinearNodes,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(arch: EncoderArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let embed = Linear::init(arch.token_dim(), arch.width, rng);
        let self_attn = (0..arch.self_blocks)
            .map(|_| AttnBlock::init(arch.width, false, rng))
            .collect();
        let cross_attn = (0..arch.cross_blocks)
            .map(|_| AttnBlock::init(arch.width, true, rng))
            .collect();
        let head = Linear::init(arch.width, 2 * arch.d_z, rng);
        Ok(EncoderParams {
            arch,
            embed,
            self_attn,
            cross_attn,
            head,
        })
    }

    fn block_arrays<'a>(b: &'a AttnBlock<T>, out: &mut Vec<&'a ArrayD<T>>) {
        out.extend([&b.ln1_g, &b.ln1_b]);
        out.extend([&b.wq.w, &b.wq.b, &b.wk.w, &b.wk.b, &b.wv.w, &b.wv.b, &b.wo.w, &b.wo.b]);
        if let Some((g, bb)) = &b.kv_norm {
            out.extend([g, bb]);
        }
        out.extend([&b.ln2_g, &b.ln2_b, &b.ff1.w, &b.ff1.b, &b.ff2.w, &b.ff2.b]);
    }

    fn block_arrays_mut<'a>(b: &'a mut AttnBlock<T>, out: &mut Vec<&'a mut ArrayD<T>>) {
        out.extend([&mut b.ln1_g, &mut b.ln1_b]);
        out.extend([
            &mut b.wq.w,
            &mut b.wq.b,
            &mut b.wk.w,
            &mut b.wk.b,
            &mut b.wv.w,
            &mut b.wv.b,
            &mut b.wo.w,
            &mut b.wo.b,
        ]);
        if let Some((g, bb)) = &mut b.kv_norm {
            out.extend([g, bb]);
        }
        out.extend([
            &mut b.ln2_g,
            &mut b.ln2_b,
            &mut b.ff1.w,
            &mut b.ff1.b,
            &mut b.ff2.w,
            &mut b.ff2.b,
        ]);
    }

    fn block_names(b: &AttnBlock<T>, prefix: &str, out: &mut Vec<String>) {
        for part in ["ln1.g", "ln1.b", "wq.w", "wq.b", "wk.w", "wk.b", "wv.w", "wv.b", "wo.w", "wo.b"] {
            out.push(format!("{prefix}.{part}"));
        }
        if b.kv_norm.is_some() {
            out.push(format!("{prefix}.lnkv.g"));
            out.push(format!("{prefix}.lnkv.b"));
        }
        for part in ["ln2.g", "ln2.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b"] {
            out.push(format!("{prefix}.{part}"));
        }
    }

    pub fn arrays(&self) -> Vec<&ArrayD<T>> {
        let mut out = vec![&self.embed.w, &self.embed.b];
        for b in &self.self_attn {
            Self::block_arrays(b, &mut out);
        }
        for b in &self.cross_attn {
            Self::block_arrays(b, &mut out);
        }
        out.extend([&self.head.w, &self.head.b]);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        let mut out: Vec<&mut ArrayD<T>> = vec![&mut self.embed.w, &mut self.embed.b];
        for b in &mut self.self_attn {
            Self::block_arrays_mut(b, &mut out);
        }
        for b in &mut self.cross_attn {
            Self::block_arrays_mut(b, &mut out);
        }
        out.extend([&mut self.head.w, &mut self.head.b]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["embed.w".into(), "embed.b".into()];
        for (i, b) in self.self_attn.iter().enumerate() {
            Self::block_names(b, &format!("self{i}"), &mut out);
        }
        for (i, b) in self.cross_attn.iter().enumerate() {
            Self::block_names(b, &format!("cross{i}"), &mut out);
        }
        out.extend(["head.w".into(), "head.b".into()]);
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> EncoderNodes {
        EncoderNodes {
            embed: bind_linear(g, &self.embed, trainable),
            self_attn: self
                .self_attn
                .iter()
                .map(|b| bind_attn_block(g, b, trainable))
                .collect(),
            cross_attn: self
                .cross_attn
                .iter()
                .map(|b| bind_attn_block(g, b, trainable))
                .collect(),
            head: bind_linear(g, &self.head, trainable),
        }
    }

    pub fn node_ids(nodes: &EncoderNodes) -> Vec<NodeId> {
        fn block_ids(b: &AttnBlockNodes, out: &mut Vec<NodeId>) {
            out.extend([b.ln1_g, b.ln1_b]);
            out.extend([b.wq.w, b.wq.b, b.wk.w, b.wk.b, b.wv.w, b.wv.b, b.wo.w, b.wo.b]);
            if let Some((g, bb)) = b.kv_norm {
                out.extend([g, bb]);
            }
            out.extend([b.ln2_g, b.ln2_b, b.ff1.w, b.ff1.b, b.ff2.w, b.ff2.b]);
        }
        let mut out = vec![nodes.embed.w, nodes.embed.b];
        for b in &nodes.self_attn {
            block_ids(b, &mut out);
        }
        for b in &nodes.cross_attn {
            block_ids(b, &mut out);
        }
        out.extend([nodes.head.w, nodes.head.b]);
        out
    }
}

/// Build tokens from explicit (coordinate, signed RGB) pairs.
pub fn tokens_from_pairs<T: Scalar>(
    coords: &Array2<f64>,
    rgb: &Array2<T>,
    pe: &PosEncConfig,
) -> Result<Array2<T>> {
    if coords.nrows() != rgb.nrows() || coords.ncols() != 2 || rgb.ncols() != 3 {
        return Err(Error::arg("token pairs want Nx2 coords and Nx3 rgb"));
    }
    let n = coords.nrows();
    let dim = 5 + pe.out_len();
    let mut out = Array2::zeros((n, dim));
    for i in 0..n {
        out[[i, 0]] = rgb[[i, 0]];
        out[[i, 1]] = rgb[[i, 1]];
        out[[i, 2]] = rgb[[i, 2]];
        out[[i, 3]] = T::from_f64(coords[[i, 0]]);
        out[[i, 4]] = T::from_f64(coords[[i, 1]]);
        if pe.out_len() > 0 {
            let code = encode(&[coords[[i, 0]], coords[[i, 1]]], pe)?;
            for (k, v) in code.iter().enumerate() {
                out[[i, 5 + k]] = T::from_f64(*v);
            }
        }
    }
    Ok(out)
}

/// Tokens sampled from an image, with the pixel indices that produced them.
#[derive(Debug, Clone)]
pub struct TokenSample<T: Scalar> {
    pub tokens: Array2<T>,
    pub indices: Vec<usize>,
}

/// Draw `n` distinct pixel indices from `0..len` (partial Fisher-Yates).
pub fn sample_indices(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.random_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool
}

/// Sample `n` (coordinate, RGB) tokens from an image uniformly without
/// replacement. The grid must address the image's pixels row-major.
pub fn to_pixel_sampler<T: Scalar>(
    img: &ImageTensor,
    grid: &CoordGrid,
    n: usize,
    rng: &mut ChaCha8Rng,
    pe: &PosEncConfig,
) -> Result<TokenSample<T>> {
    let pixels = img.height() * img.width();
    if grid.len() != pixels {
        return Err(Error::arg(format!(
            "grid length {} does not address a {}x{} image",
            grid.len(),
            img.height(),
            img.width()
        )));
    }
    if n == 0 || n > pixels {
        return Err(Error::arg(format!(
            "cannot sample {n} tokens from {pixels} pixels"
        )));
    }
    let signed = img.to_signed();
    let indices = sample_indices(pixels, n, rng);
    let mut coords = Array2::zeros((n, 2));
    let mut rgb = Array2::zeros((n, 3));
    let w = img.width();
    for (row, &p) in indices.iter().enumerate() {
        let (cr, cc) = grid.coord(p);
        coords[[row, 0]] = cr;
        coords[[row, 1]] = cc;
        let px = signed.pixel_rgb(p / w, p % w);
        for c in 0..3 {
            rgb[[row, c]] = T::from_f64(px[c] as f64);
        }
    }
    Ok(TokenSample {
        tokens: tokens_from_pairs(&coords, &rgb, pe)?,
        indices,
    })
}

/// Graph version: self-attention over `y`, cross-attention against `r`,
/// mean-pool, linear head. Returns `([1, d_z] mean, [1, d_z] log_var)` nodes;
/// log_var is clamped in-graph.
pub fn build_encode_posterior<T: Scalar>(
    g: &mut Graph<T>,
    y_tokens: NodeId,
    r_tokens: NodeId,
    nodes: &EncoderNodes,
    arch: &EncoderArch,
) -> (NodeId, NodeId) {
    let mut y = linear(g, y_tokens, &nodes.embed);
    let r = linear(g, r_tokens, &nodes.embed);
    for b in &nodes.self_attn {
        y = attn_block(g, y, None, b, arch.heads);
    }
    for b in &nodes.cross_attn {
        y = attn_block(g, y, Some(r), b, arch.heads);
    }
    let pooled = g.mean_rows(y);
    let out = linear(g, pooled, &nodes.head);
    let mean = g.slice_cols(out, 0, arch.d_z);
    let log_var_raw = g.slice_cols(out, arch.d_z, 2 * arch.d_z);
    let log_var = g.clamp(
        log_var_raw,
        T::from_f64(LOG_VAR_MIN),
        T::from_f64(LOG_VAR_MAX),
    );
    (mean, log_var)
}

/// Plain forward of [`build_encode_posterior`].
pub fn encode_posterior<T: Scalar>(
    y_tokens: &Array2<T>,
    r_tokens: &Array2<T>,
    params: &EncoderParams<T>,
) -> Result<LatentDistribution<T>> {
    if y_tokens.nrows() == 0 || r_tokens.nrows() == 0 {
        return Err(Error::arg("encoder wants non-empty token sequences"));
    }
    let td = params.arch.token_dim();
    if y_tokens.ncols() != td || r_tokens.ncols() != td {
        return Err(Error::arg(format!(
            "token dim {} expected, got {} / {}",
            td,
            y_tokens.ncols(),
            r_tokens.ncols()
        )));
    }
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let y = g.constant2(y_tokens.clone());
    let r = g.constant2(r_tokens.clone());
    let (mean, log_var) = build_encode_posterior(&mut g, y, r, &nodes, &params.arch);
    let to1 = |id: NodeId, g: &Graph<T>| -> Array1<T> {
        g.value(id)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .row(0)
            .to_owned()
    };
    LatentDistribution::new(to1(mean, &g), to1(log_var, &g))
}

/// Pathwise sample `z = mean + exp(log_var / 2) * eps`, `eps ~ N(0, I)`.
pub fn reparameterize<T: Scalar>(
    dist: &LatentDistribution<T>,
    rng: &mut ChaCha8Rng,
) -> Array1<T> {
    let eps = standard_normal_vec::<T>(dist.dim(), rng);
    let half = T::from_f64(0.5);
    let mut z = Array1::zeros(dist.dim());
    for i in 0..dist.dim() {
        z[i] = dist.mean()[i] + (dist.log_var()[i] * half).exp() * eps[i];
    }
    z
}

/// Graph version of [`reparameterize`] given mean/log_var nodes `[1, d_z]`
/// and a frozen noise draw.
pub fn build_reparameterize<T: Scalar>(
    g: &mut Graph<T>,
    mean: NodeId,
    log_var: NodeId,
    eps: &Array1<T>,
) -> NodeId {
    let half_lv = g.scale(log_var, T::from_f64(0.5));
    let std = g.exp(half_lv);
    let eps_id = g.constant2(eps.clone().insert_axis(ndarray::Axis(0)));
    let noise = g.mul(std, eps_id);
    g.add(mean, noise)
}

/// Standard normal draw of dimension `d_z`.
pub fn sample_prior<T: Scalar>(d_z: usize, rng: &mut ChaCha8Rng) -> Array1<T> {
    standard_normal_vec::<T>(d_z, rng)
}

pub fn standard_normal_vec<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Array1<T> {
    Array1::from_shape_fn(n, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coord::make_coord_grid;
    use crate::image::{ColorSpace, ValueRange};
    use crate::rngstream::stream;
    use ndarray::Array3;

    fn toy_arch() -> EncoderArch {
        EncoderArch {
            width: 32,
            heads: 4,
            self_blocks: 1,
            cross_blocks: 1,
            d_z: 16,
            posenc: PosEncConfig::new(6, 2).unwrap(),
        }
    }

    fn random_unit(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = stream(seed, &[0x61]);
        let data = Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0f32));
        ImageTensor::new(data, ValueRange::Unit, ColorSpace::Rgb).unwrap()
    }

    #[test]
    fn sampler_exhaustive_is_a_permutation() {
        let img = random_unit(6, 7, 1);
        let grid = make_coord_grid(6, 7).unwrap();
        let mut rng = stream(2, &[0x62]);
        let pe = PosEncConfig::new(4, 2).unwrap();
        let ts: TokenSample<f64> = to_pixel_sampler(&img, &grid, 42, &mut rng, &pe).unwrap();
        let mut idx = ts.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..42).collect::<Vec<_>>());
        assert_eq!(ts.tokens.nrows(), 42);
        assert_eq!(ts.tokens.ncols(), 5 + pe.out_len());
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let img = random_unit(8, 8, 3);
        let grid = make_coord_grid(8, 8).unwrap();
        let pe = PosEncConfig::new(4, 2).unwrap();
        let a: TokenSample<f64> =
            to_pixel_sampler(&img, &grid, 16, &mut stream(7, &[1]), &pe).unwrap();
        let b: TokenSample<f64> =
            to_pixel_sampler(&img, &grid, 16, &mut stream(7, &[1]), &pe).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.tokens, b.tokens);
        let c: TokenSample<f64> =
            to_pixel_sampler(&img, &grid, 16, &mut stream(8, &[1]), &pe).unwrap();
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn sampler_rejects_oversampling() {
        let img = random_unit(4, 4, 4);
        let grid = make_coord_grid(4, 4).unwrap();
        let pe = PosEncConfig::new(4, 2).unwrap();
        assert!(to_pixel_sampler::<f64>(&img, &grid, 17, &mut stream(1, &[1]), &pe).is_err());
        assert!(to_pixel_sampler::<f64>(&img, &grid, 0, &mut stream(1, &[1]), &pe).is_err());
    }

    #[test]
    fn token_budget_from_96_squared_image() {
        let img = random_unit(96, 96, 5);
        let grid = make_coord_grid(96, 96).unwrap();
        let pe = PosEncConfig::new(4, 2).unwrap();
        let ts: TokenSample<f32> =
            to_pixel_sampler(&img, &grid, 48 * 48, &mut stream(9, &[2]), &pe).unwrap();
        assert_eq!(ts.tokens.nrows(), 2304);
    }

    #[test]
    fn posterior_shape_and_order_invariance() {
        let mut rng = stream(10, &[0x63]);
        let arch = toy_arch();
        let p = EncoderParams::<f64>::init(arch.clone(), &mut rng).unwrap();
        let td = arch.token_dim();
        let y = Array2::from_shape_fn((12, td), |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((10, td), |_| rng.random_range(-1.0..1.0));
        let d = encode_posterior(&y, &r, &p).unwrap();
        assert_eq!(d.dim(), 16);

        // swap two y tokens and two r tokens
        let swap = |m: &Array2<f64>, a: usize, b: usize| {
            let mut out = m.clone();
            let ra = m.row(a).to_owned();
            let rb = m.row(b).to_owned();
            out.row_mut(a).assign(&rb);
            out.row_mut(b).assign(&ra);
            out
        };
        let d2 = encode_posterior(&swap(&y, 2, 9), &swap(&r, 0, 7), &p).unwrap();
        for i in 0..16 {
            assert!((d.mean()[i] - d2.mean()[i]).abs() < 1e-6);
            assert!((d.log_var()[i] - d2.log_var()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_head_weights_give_bias_output() {
        let mut rng = stream(11, &[0x64]);
        let arch = toy_arch();
        let mut p = EncoderParams::<f64>::init(arch.clone(), &mut rng).unwrap();
        p.head.w.fill(0.0);
        for (i, v) in p.head.b.iter_mut().enumerate() {
            *v = i as f64 * 0.01 - 0.1;
        }
        let td = arch.token_dim();
        let y = Array2::from_shape_fn((5, td), |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((5, td), |_| rng.random_range(-1.0..1.0));
        let d = encode_posterior(&y, &r, &p).unwrap();
        for i in 0..16 {
            assert!((d.mean()[i] - (i as f64 * 0.01 - 0.1)).abs() < 1e-12);
            assert!((d.log_var()[i] - ((16 + i) as f64 * 0.01 - 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_var_clamped_at_construction() {
        let d = LatentDistribution::new(
            Array1::zeros(2),
            ndarray::array![-100.0f64, 50.0],
        )
        .unwrap();
        assert_eq!(d.log_var()[0], -30.0);
        assert_eq!(d.log_var()[1], 20.0);
    }

    #[test]
    fn reparameterize_at_clamp_floor_is_mean() {
        let d = LatentDistribution::new(
            ndarray::array![0.7f64, -0.3],
            ndarray::array![-100.0, -100.0],
        )
        .unwrap();
        let z = reparameterize(&d, &mut stream(12, &[3]));
        assert!((z[0] - 0.7).abs() < 1e-6);
        assert!((z[1] + 0.3).abs() < 1e-6);
    }

    #[test]
    fn reparameterize_deterministic_and_unbiased() {
        let d = LatentDistribution::new(
            ndarray::array![1.5f64, -2.0, 0.25],
            ndarray::array![0.4, -0.8, 0.0],
        )
        .unwrap();
        let a = reparameterize(&d, &mut stream(13, &[4]));
        let b = reparameterize(&d, &mut stream(13, &[4]));
        assert_eq!(a, b);

        // Monte Carlo mean within 4 standard errors
        let n = 1_000_000usize;
        let mut rng = stream(14, &[5]);
        let mut acc = Array1::<f64>::zeros(3);
        for _ in 0..n {
            acc = acc + reparameterize(&d, &mut rng);
        }
        acc.mapv_inplace(|v| v / n as f64);
        for i in 0..3 {
            let se = (d.log_var()[i].exp()).sqrt() / (n as f64).sqrt();
            assert!(
                (acc[i] - d.mean()[i]).abs() < 4.0 * se,
                "dim {i}: {} vs {}",
                acc[i],
                d.mean()[i]
            );
        }
    }

    #[test]
    fn reparameterize_grad_wrt_mean_is_identity() {
        let mut g = Graph::<f64>::new();
        let mean = g.param(ndarray::array![[0.3, -0.2, 0.9]].into_dyn());
        let log_var = g.constant(ndarray::array![[0.1, -0.4, 0.0]].into_dyn());
        let eps = ndarray::array![0.7, -1.2, 0.4];
        let z = build_reparameterize(&mut g, mean, log_var, &eps);
        let loss = g.sum_all(z);
        g.backward(loss);
        let grad = g.grad(mean).unwrap();
        for &v in grad.iter() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn prior_samples_have_identity_covariance() {
        let d_z = 8;
        let n = 100_000usize;
        let mut rng = stream(15, &[6]);
        let mut sum = Array1::<f64>::zeros(d_z);
        let mut cov = Array2::<f64>::zeros((d_z, d_z));
        for _ in 0..n {
            let z = sample_prior::<f64>(d_z, &mut rng);
            sum = sum + &z;
            for i in 0..d_z {
                for j in 0..d_z {
                    cov[[i, j]] += z[i] * z[j];
                }
            }
        }
        let mean = sum.mapv(|v| v / n as f64);
        for i in 0..d_z {
            assert!(mean[i].abs() < 0.02, "mean[{i}] = {}", mean[i]);
            for j in 0..d_z {
                let c = cov[[i, j]] / n as f64 - mean[i] * mean[j];
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (c - expect).abs() < 0.05,
                    "cov[{i},{j}] = {c} vs {expect}"
                );
            }
        }
        let z = sample_prior::<f64>(5, &mut stream(1, &[7]));
        assert_eq!(z.len(), 5);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        // toy dims, frozen token sample, double precision
        let mut rng = stream(16, &[0x65]);
        let arch = EncoderArch {
            width: 8,
            heads: 2,
            self_blocks: 1,
            cross_blocks: 1,
            d_z: 3,
            posenc: PosEncConfig::new(2, 2).unwrap(),
        };
        let params = EncoderParams::<f64>::init(arch.clone(), &mut rng).unwrap();
        let td = arch.token_dim();
        let y = Array2::from_shape_fn((6, td), |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((5, td), |_| rng.random_range(-1.0..1.0));

        let eval = |p: &EncoderParams<f64>| -> f64 {
            let d = encode_posterior(&y, &r, p).unwrap();
            d.mean().sum() + d.log_var().iter().map(|v| v * 0.3).sum::<f64>()
        };

        let mut g = Graph::new();
        let nodes = params.bind(&mut g, true);
        let yi = g.constant2(y.clone());
        let ri = g.constant2(r.clone());
        let (mean, log_var) = build_encode_posterior(&mut g, yi, ri, &nodes, &arch);
        let ms = g.sum_all(mean);
        let ls = g.sum_all(log_var);
        let ls = g.scale(ls, 0.3);
        let loss = g.add(ms, ls);
        g.backward(loss);

        let ids = EncoderParams::<f64>::node_ids(&nodes);
        let names = params.names();
        let h = 1e-6;
        let mut pick = stream(17, &[0x66]);
        for (pi, id) in ids.iter().enumerate() {
            let grad = g
                .grad(*id)
                .unwrap_or_else(|| panic!("no grad for {}", names[pi]))
                .as_standard_layout()
                .into_owned();
            let len = grad.len();
            for _ in 0..4.min(len) {
                let k = pick.random_range(0..len);
                let mut pp = params.clone();
                let mut pm = params.clone();
                pp.arrays_mut()[pi].as_slice_mut().unwrap()[k] += h;
                pm.arrays_mut()[pi].as_slice_mut().unwrap()[k] -= h;
                let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
                let an = grad.as_slice().unwrap()[k];
                let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1.0);
                assert!(rel < 1e-3, "{} coord {k}: fd {fd} an {an}", names[pi]);
            }
        }
    }
}
