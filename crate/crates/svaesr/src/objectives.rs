//! Training objectives.
//!
//! The ELBO here is the discrimination statistic of the introspective setup:
//! `elbo = -recon_scale * meanL1(reconstruction, target) - KL(posterior || prior)`,
//! a Laplace likelihood with per-pixel mean reduction so magnitudes are
//! resolution-independent.
//!
//! Both adversarial losses are written in minimization form. The encoder
//! drives real ELBOs up and soft-exponentially represses fake ELBOs; the
//! decoder drives both up (weighting fakes by `gamma`):
//!
//! ```text
//! enc_loss = -elbo_real + mean_f (1/alpha) exp(alpha * elbo_fake_f)
//! dec_loss = -elbo_real - gamma * mean_f elbo_fake_f
//! ```
//!
//! The exp argument is clamped at 20 before exponentiation; healthy training
//! never reaches it, and a process-wide counter records any activation so
//! tests and the trainer can assert on it.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::coord::make_coord_grid;
use crate::encoder::{
    encode_posterior, reparameterize, to_pixel_sampler, EncoderParams, LatentDistribution,
    TokenSample,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::liif::{extract_features, query_rgb, DecoderParams};
use crate::nn::{bind_linear, linear};

/// Argument ceiling for the soft-exponential.
pub const EXP_CLAMP: f64 = 20.0;

static EXP_CLAMP_HITS: AtomicU64 = AtomicU64::new(0);

/// Times the soft-exponential clamp has bound since process start (or the
/// last reset). Monitored, not silently swallowed.
pub fn exp_clamp_hits() -> u64 {
    EXP_CLAMP_HITS.load(Ordering::Relaxed)
}

pub fn reset_exp_clamp_hits() {
    EXP_CLAMP_HITS.store(0, Ordering::Relaxed);
}

fn note_exp_arg(arg: f64) -> f64 {
    if arg > EXP_CLAMP {
        EXP_CLAMP_HITS.fetch_add(1, Ordering::Relaxed);
        EXP_CLAMP
    } else {
        arg
    }
}

/// Scalar weights of the training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Soft-exponential temperature.
    pub alpha: f64,
    /// Decoder-side weight on fake ELBOs.
    pub gamma: f64,
    /// Extra L1 weight in the composite loss.
    pub lambda_rec: f64,
    /// KL weight in the composite loss.
    pub beta_kl: f64,
    /// Reconstruction-term weight inside the ELBO.
    pub recon_scale: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 2.0,
            gamma: 0.5,
            lambda_rec: 1.0,
            beta_kl: 0.01,
            recon_scale: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.gamma,
            self.lambda_rec,
            self.beta_kl,
            self.recon_scale,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("objective weights must be finite"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::arg("alpha must be positive"));
        }
        if self.recon_scale <= 0.0 {
            return Err(Error::arg("recon_scale must be positive"));
        }
        if self.gamma < 0.0 || self.lambda_rec < 0.0 || self.beta_kl < 0.0 {
            return Err(Error::arg("objective weights must be non-negative"));
        }
        Ok(())
    }
}

/// Closed-form KL of a diagonal Gaussian to the standard normal:
/// `0.5 * sum(mean^2 + exp(log_var) - 1 - log_var)`.
pub fn kl_divergence<T: Scalar>(dist: &LatentDistribution<T>) -> f64 {
    let mut acc = 0.0;
    for i in 0..dist.dim() {
        let m = dist.mean()[i].to_f64();
        let lv = dist.log_var()[i].to_f64();
        acc += m * m + lv.exp() - 1.0 - lv;
    }
    0.5 * acc
}

/// Graph version over `[1, d_z]` mean / log_var nodes; returns a scalar node.
pub fn build_kl<T: Scalar>(g: &mut Graph<T>, mean: NodeId, log_var: NodeId) -> NodeId {
    let m2 = g.square(mean);
    let ev = g.exp(log_var);
    let s = g.add(m2, ev);
    let s = g.add_scalar(s, T::from_f64(-1.0));
    let s = g.sub(s, log_var);
    let total = g.sum_all(s);
    g.scale(total, T::from_f64(0.5))
}

/// `elbo = -recon_scale * recon - kl`; factored out so every caller (plain
/// op, training graphs, metrics) assembles it identically.
pub fn elbo_from_parts(recon: f64, kl: f64, cfg: &ObjectiveConfig) -> f64 {
    -cfg.recon_scale * recon - kl
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    /// Mean absolute reconstruction error over pixels and channels.
    pub recon: f64,
    pub kl: f64,
}

/// Conditional ELBO of `target` given `reference`, reconstructing through the
/// decoder conditioned on `lr_context`'s features. Tokenizes both images at
/// their native resolution (up to `token_budget` pixels each), encodes,
/// draws one latent sample, and scores the reconstruction at the target's
/// full grid.
#[allow(clippy::too_many_arguments)]
pub fn elbo<T: Scalar>(
    target: &ImageTensor,
    reference: &ImageTensor,
    enc: &EncoderParams<T>,
    dec: &DecoderParams<T>,
    lr_context: &ImageTensor,
    rng: &mut ChaCha8Rng,
    cfg: &ObjectiveConfig,
    token_budget: usize,
) -> Result<(f64, ElboParts)> {
    cfg.validate()?;
    let t_grid = make_coord_grid(target.height(), target.width())?;
    let r_grid = make_coord_grid(reference.height(), reference.width())?;
    let n_y = token_budget.min(t_grid.len());
    let n_r = token_budget.min(r_grid.len());
    let y_tok: TokenSample<T> = to_pixel_sampler(target, &t_grid, n_y, rng, &enc.arch.posenc)?;
    let r_tok: TokenSample<T> = to_pixel_sampler(reference, &r_grid, n_r, rng, &enc.arch.posenc)?;
    let dist = encode_posterior(&y_tok.tokens, &r_tok.tokens, enc)?;
    let z = reparameterize(&dist, rng);

    let feats = extract_features(&lr_context.to_signed(), dec)?;
    let hf_row = {
        let mut g = Graph::new();
        let zn = g.constant2(z.insert_axis(ndarray::Axis(0)));
        let hp = bind_linear(&mut g, &dec.hf_proj, false);
        let r = linear(&mut g, zn, &hp);
        g.value(r)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    let mut hf = Array2::zeros((t_grid.len(), dec.arch.hf_dim));
    for mut row in hf.rows_mut() {
        row.assign(&hf_row.row(0));
    }
    let pred = query_rgb(&feats, &t_grid, &hf, dec)?;

    let signed = target.to_signed();
    let (tw, d) = (target.width(), signed.data());
    let mut acc = 0.0f64;
    for q in 0..t_grid.len() {
        let (y, x) = (q / tw, q % tw);
        for c in 0..3 {
            acc += (pred[[q, c]].to_f64() - d[[c, y, x]] as f64).abs();
        }
    }
    let recon = acc / (t_grid.len() * 3) as f64;
    let kl = kl_divergence(&dist);
    Ok((elbo_from_parts(recon, kl, cfg), ElboParts { recon, kl }))
}

/// Soft-exponential of one fake ELBO, `(1/alpha) exp(alpha * e)`.
pub fn soft_exp(e: f64, alpha: f64) -> f64 {
    (note_exp_arg(alpha * e)).exp() / alpha
}

/// Encoder (discriminator) objective in minimization form.
pub fn encoder_loss(real_elbo: f64, fake_elbos: &[f64], cfg: &ObjectiveConfig) -> f64 {
    assert!(!fake_elbos.is_empty(), "encoder_loss wants at least one fake");
    let fake: f64 =
        fake_elbos.iter().map(|&e| soft_exp(e, cfg.alpha)).sum::<f64>() / fake_elbos.len() as f64;
    -real_elbo + fake
}

/// Decoder (generator) objective in minimization form.
pub fn decoder_loss(real_elbo: f64, fake_elbos: &[f64], cfg: &ObjectiveConfig) -> f64 {
    assert!(!fake_elbos.is_empty(), "decoder_loss wants at least one fake");
    let fake: f64 = fake_elbos.iter().sum::<f64>() / fake_elbos.len() as f64;
    -real_elbo - cfg.gamma * fake
}

/// Graph version of [`encoder_loss`] over scalar ELBO nodes.
pub fn build_encoder_loss<T: Scalar>(
    g: &mut Graph<T>,
    real_elbo: NodeId,
    fake_elbos: &[NodeId],
    cfg: &ObjectiveConfig,
) -> NodeId {
    assert!(!fake_elbos.is_empty());
    let alpha = T::from_f64(cfg.alpha);
    let mut terms = Vec::with_capacity(fake_elbos.len());
    for &f in fake_elbos {
        let a = g.scale(f, alpha);
        note_exp_arg(g.scalar_value(a).to_f64());
        let a = g.clamp(a, T::neg_infinity(), T::from_f64(EXP_CLAMP));
        let e = g.exp(a);
        terms.push(g.scale(e, T::one() / alpha));
    }
    let fake_sum = g.add_n(&terms);
    let fake_mean = g.scale(fake_sum, T::from_f64(1.0 / fake_elbos.len() as f64));
    let neg_real = g.neg(real_elbo);
    g.add(neg_real, fake_mean)
}

/// Graph version of [`decoder_loss`].
pub fn build_decoder_loss<T: Scalar>(
    g: &mut Graph<T>,
    real_elbo: NodeId,
    fake_elbos: &[NodeId],
    cfg: &ObjectiveConfig,
) -> NodeId {
    assert!(!fake_elbos.is_empty());
    let fake_sum = g.add_n(fake_elbos);
    let fake_mean = g.scale(
        fake_sum,
        T::from_f64(cfg.gamma / fake_elbos.len() as f64),
    );
    let neg_real = g.neg(real_elbo);
    g.sub(neg_real, fake_mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLossParts {
    pub l1: f64,
    pub weighted_l1: f64,
    pub kl_term: f64,
}

/// Composite training metric: `L1 + lambda_rec * L1 + beta_kl * KL`. The two
/// L1 terms are kept literal (they collapse to `(1 + lambda_rec) * L1`).
pub fn total_loss<T: Scalar>(
    sr: &ImageTensor,
    hr: &ImageTensor,
    dist: &LatentDistribution<T>,
    cfg: &ObjectiveConfig,
) -> Result<(f64, TotalLossParts)> {
    if sr.data().dim() != hr.data().dim() {
        return Err(Error::arg(format!(
            "total_loss shape mismatch: {:?} vs {:?}",
            sr.data().dim(),
            hr.data().dim()
        )));
    }
    if sr.range() != hr.range() {
        return Err(Error::arg("total_loss value_range mismatch"));
    }
    let n = sr.data().len();
    let l1 = sr
        .data()
        .iter()
        .zip(hr.data().iter())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / n as f64;
    let parts = TotalLossParts {
        l1,
        weighted_l1: cfg.lambda_rec * l1,
        kl_term: cfg.beta_kl * kl_divergence(dist),
    };
    Ok((parts.l1 + parts.weighted_l1 + parts.kl_term, parts))
}
