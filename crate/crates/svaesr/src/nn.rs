//! Layers, initialization, and the Adam optimizer.
//!
//! Parameters are plain `ArrayD` fields in small structs; a layer is used by
//! binding its arrays into a [`Graph`] (trainable or constant) and calling
//! the matching build function with the returned node ids.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Scalar};

/// `U(-k, k)` with `k = 1/sqrt(fan_in)`, PyTorch-style.
pub fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let k = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::from_f64(rng.random_range(-k..k)))
}

/// Dense layer, `y = x W + b`, with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar> {
    pub w: ArrayD<T>,
    pub b: ArrayD<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: uniform_init(&[fan_in, fan_out], fan_in, rng),
            b: uniform_init(&[fan_out], fan_in, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

pub fn bind_linear<T: Scalar>(g: &mut Graph<T>, l: &Linear<T>, trainable: bool) -> LinearNodes {
    LinearNodes {
        w: bind(g, &l.w, trainable),
        b: bind(g, &l.b, trainable),
    }
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, n: &LinearNodes) -> NodeId {
    let y = g.matmul(x, n.w);
    g.add_bias(y, n.b)
}

/// 3x3 same-size convolution, weight stored `[out, in*9]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T: Scalar> {
    pub w: ArrayD<T>,
    pub b: ArrayD<T>,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn init(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv3x3 {
            w: uniform_init(&[c_out, c_in * 9], c_in * 9, rng),
            b: uniform_init(&[c_out], c_in * 9, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvNodes {
    pub w: NodeId,
    pub b: NodeId,
}

pub fn bind_conv<T: Scalar>(g: &mut Graph<T>, c: &Conv3x3<T>, trainable: bool) -> ConvNodes {
    ConvNodes {
        w: bind(g, &c.w, trainable),
        b: bind(g, &c.b, trainable),
    }
}

pub fn conv3x3<T: Scalar>(g: &mut Graph<T>, x: NodeId, n: &ConvNodes) -> NodeId {
    g.conv3x3(x, n.w, n.b)
}

fn bind<T: Scalar>(g: &mut Graph<T>, a: &ArrayD<T>, trainable: bool) -> NodeId {
    if trainable {
        g.param(a.clone())
    } else {
        g.constant(a.clone())
    }
}

/// Pre-norm transformer block: attention (self or cross) plus a 2x-wide
/// feed-forward, both residual. Cross blocks carry their own key/value norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlock<T: Scalar> {
    pub ln1_g: ArrayD<T>,
    pub ln1_b: ArrayD<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub kv_norm: Option<(ArrayD<T>, ArrayD<T>)>,
    pub ln2_g: ArrayD<T>,
    pub ln2_b: ArrayD<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

impl<T: Scalar> AttnBlock<T> {
    pub fn init(width: usize, cross: bool, rng: &mut ChaCha8Rng) -> Self {
        let ones = ArrayD::from_elem(IxDyn(&[width]), T::one());
        let zeros = ArrayD::zeros(IxDyn(&[width]));
        AttnBlock {
            ln1_g: ones.clone(),
            ln1_b: zeros.clone(),
            wq: Linear::init(width, width, rng),
            wk: Linear::init(width, width, rng),
            wv: Linear::init(width, width, rng),
            wo: Linear::init(width, width, rng),
            kv_norm: cross.then(|| (ones.clone(), zeros.clone())),
            ln2_g: ones,
            ln2_b: zeros,
            ff1: Linear::init(width, 2 * width, rng),
            ff2: Linear::init(2 * width, width, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnBlockNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: LinearNodes,
    pub wk: LinearNodes,
    pub wv: LinearNodes,
    pub wo: LinearNodes,
    pub kv_norm: Option<(NodeId, NodeId)>,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub ff1: LinearNodes,
    pub ff2: LinearNodes,
}

pub fn bind_attn_block<T: Scalar>(
    g: &mut Graph<T>,
    blk: &AttnBlock<T>,
    trainable: bool,
) -> AttnBlockNodes {
    AttnBlockNodes {
        ln1_g: bind(g, &blk.ln1_g, trainable),
        ln1_b: bind(g, &blk.ln1_b, trainable),
        wq: bind_linear(g, &blk.wq, trainable),
        wk: bind_linear(g, &blk.wk, trainable),
        wv: bind_linear(g, &blk.wv, trainable),
        wo: bind_linear(g, &blk.wo, trainable),
        kv_norm: blk
            .kv_norm
            .as_ref()
            .map(|(gn, bn)| (bind(g, gn, trainable), bind(g, bn, trainable))),
        ln2_g: bind(g, &blk.ln2_g, trainable),
        ln2_b: bind(g, &blk.ln2_b, trainable),
        ff1: bind_linear(g, &blk.ff1, trainable),
        ff2: bind_linear(g, &blk.ff2, trainable),
    }
}

/// Multi-head scaled dot-product attention over already-normalized inputs.
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    x_ln: NodeId,
    ctx_ln: NodeId,
    n: &AttnBlockNodes,
    heads: usize,
) -> NodeId {
    let q = linear(g, x_ln, &n.wq);
    let k = linear(g, ctx_ln, &n.wk);
    let v = linear(g, ctx_ln, &n.wv);
    let width = g.value(q).shape()[1];
    assert!(width % heads == 0, "width {width} not divisible by heads");
    let dh = width / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, a, b);
        let kh = g.slice_cols(k, a, b);
        let vh = g.slice_cols(v, a, b);
        let kt = g.transpose(kh);
        let sc = g.matmul(qh, kt);
        let sc = g.scale(sc, scale);
        let at = g.softmax_rows(sc);
        outs.push(g.matmul(at, vh));
    }
    let cat = g.concat_cols(&outs);
    linear(g, cat, &n.wo)
}

/// One block: `ctx = None` for self-attention, `Some(tokens)` for cross.
pub fn attn_block<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    ctx: Option<NodeId>,
    n: &AttnBlockNodes,
    heads: usize,
) -> NodeId {
    let h = g.layer_norm_rows(x, n.ln1_g, n.ln1_b, 1e-5);
    let ctx_ln = match ctx {
        Some(c) => {
            let (gn, bn) = n.kv_norm.expect("cross block without kv norm");
            g.layer_norm_rows(c, gn, bn, 1e-5)
        }
        None => h,
    };
    let a = attention(g, h, ctx_ln, n, heads);
    let x = g.add(x, a);
    let h2 = g.layer_norm_rows(x, n.ln2_g, n.ln2_b, 1e-5);
    let f = linear(g, h2, &n.ff1);
    let f = g.relu(f);
    let f = linear(g, f, &n.ff2);
    g.add(x, f)
}

/// Adam with bias correction; one instance per optimized parameter group so
/// alternating phases keep independent moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, shapes: &[&ArrayD<T>]) -> Self {
        Adam {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            t: 0,
            m: shapes.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
            v: shapes.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
        }
    }

    /// Apply one update. `grads[i] = None` is treated as a zero gradient.
    pub fn step(&mut self, params: Vec<&mut ArrayD<T>>, grads: &[Option<&ArrayD<T>>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1c = T::one() - self.beta1.powi(self.t as i32);
        let b2c = T::one() - self.beta2.powi(self.t as i32);
        let one = T::one();
        for (i, p) in params.into_iter().enumerate() {
            let zero_g;
            let grad = match grads[i] {
                Some(gr) => gr,
                None => {
                    zero_g = ArrayD::zeros(p.raw_dim());
                    &zero_g
                }
            };
            assert_eq!(grad.shape(), p.shape(), "grad shape for param {i}");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &gr| {
                    *m = self.beta1 * *m + (one - self.beta1) * gr;
                    *v = self.beta2 * *v + (one - self.beta2) * gr * gr;
                    let mh = *m / b1c;
                    let vh = *v / b2c;
                    *p = *p - self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::stream;

    #[test]
    fn linear_shapes_and_forward() {
        let mut rng = stream(1, &[0x11]);
        let l = Linear::<f64>::init(3, 4, &mut rng);
        assert_eq!(l.in_dim(), 3);
        assert_eq!(l.out_dim(), 4);
        let mut g = Graph::new();
        let x = g.constant(ArrayD::ones(IxDyn(&[2, 3])));
        let n = bind_linear(&mut g, &l, false);
        let y = linear(&mut g, x, &n);
        assert_eq!(g.value(y).shape(), &[2, 4]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize |p - 3|^2 elementwise
        let mut p = ArrayD::<f64>::zeros(IxDyn(&[4]));
        let mut opt = Adam::new(0.1, &[&p]);
        for _ in 0..300 {
            let grad = p.mapv(|v| 2.0 * (v - 3.0));
            opt.step(vec![&mut p], &[Some(&grad)]);
        }
        for &v in p.iter() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn adam_none_grad_keeps_param() {
        let mut p = ArrayD::<f64>::ones(IxDyn(&[2]));
        let mut opt = Adam::new(0.1, &[&p]);
        opt.step(vec![&mut p], &[None]);
        for &v in p.iter() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn attention_is_token_order_equivariant() {
        let mut rng = stream(2, &[0x12]);
        let blk = AttnBlock::<f64>::init(8, false, &mut rng);
        let x = ndarray::Array2::from_shape_fn((5, 8), |_| rng.random_range(-1.0..1.0));
        let run = |tokens: ndarray::Array2<f64>| {
            let mut g = Graph::new();
            let xi = g.constant(tokens.into_dyn());
            let n = bind_attn_block(&mut g, &blk, false);
            let y = attn_block(&mut g, xi, None, &n, 2);
            g.value(y).clone()
        };
        let base = run(x.clone());
        // swap tokens 1 and 3
        let mut perm = x.clone();
        let r1 = x.row(1).to_owned();
        let r3 = x.row(3).to_owned();
        perm.row_mut(1).assign(&r3);
        perm.row_mut(3).assign(&r1);
        let swapped = run(perm);
        for j in 0..8 {
            assert!((base[[1, j].as_ref()] - swapped[[3, j].as_ref()]).abs() < 1e-12);
            assert!((base[[0, j].as_ref()] - swapped[[0, j].as_ref()]).abs() < 1e-12);
        }
    }
}
