//! Minimal reverse-mode autodiff on ndarray.
//!
//! A [`Graph`] is an append-only tape of eagerly evaluated nodes. Values are
//! dynamic-dim arrays; the op set is exactly what the encoder/decoder stacks
//! need (dense layers, 3x3 convolution, attention pieces, gather/scatter for
//! the implicit decoder, and scalar reductions for the losses). Generic over
//! `f32`/`f64`: training runs in `f32`, gradient checks in `f64`.
//!
//! Shape mismatches are programmer errors and panic; argument validation
//! happens in the public model APIs before a graph is built.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3};

/// Element type for graphs: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Clamp(NodeId, T, T),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Arc<Array2<T>>,
        inv_std: Arc<Array1<T>>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Arc<Vec<usize>>),
    TileRows(NodeId, usize),
    BroadcastRow(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    AddN(Vec<NodeId>),
    EnsembleMix {
        preds: NodeId,
        weights: Arc<Array2<T>>,
    },
    Conv3x3 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        col: Arc<Array2<T>>,
    },
    Unfold3x3(NodeId),
    FlattenSpatial(NodeId),
}

pub struct Graph<T: Scalar> {
    values: Vec<ArrayD<T>>,
    grads: Vec<Option<ArrayD<T>>>,
    needs: Vec<bool>,
    ops: Vec<Op<T>>,
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("2D node")
}

fn as1<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView1<'_, T> {
    a.view().into_dimensionality::<Ix1>().expect("1D node")
}

fn as3<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView3<'_, T> {
    a.view().into_dimensionality::<Ix3>().expect("3D node")
}

/// im2col for a 3x3 kernel with zero padding 1: `[C*9, H*W]`,
/// row = `c*9 + ky*3 + kx`.
fn im2col3x3<T: Scalar>(x: &ndarray::ArrayView3<'_, T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * 9, h * w));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ch * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as i64 + ky as i64 - 1;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as i64 + kx as i64 - 1;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        col[[row, y * w + xx]] = x[[ch, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    col
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    /// Gradient accumulated for `id` by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        let v = &self.values[id.0];
        assert_eq!(v.len(), 1, "scalar node expected");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, needs: bool, op: Op<T>) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.needs[i.0])
    }

    /// Leaf a gradient will be requested for.
    pub fn param(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn constant2(&mut self, value: Array2<T>) -> NodeId {
        self.constant(value.into_dyn())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] + &self.values[b.0];
        let n = self.needs(&[a, b]);
        self.push(v, n, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] - &self.values[b.0];
        let n = self.needs(&[a, b]);
        self.push(v, n, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] * &self.values[b.0];
        let n = self.needs(&[a, b]);
        self.push(v, n, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.values[a.0].mapv(|x| x * c);
        let n = self.needs[a.0];
        self.push(v, n, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.values[a.0].mapv(|x| x + c);
        let n = self.needs[a.0];
        self.push(v, n, Op::AddScalar(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, T::from_f64(-1.0))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.values[a.0]);
        let bv = as2(&self.values[b.0]);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        let n = self.needs(&[a, b]);
        self.push(v, n, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = as2(&self.values[a.0]).t().to_owned().into_dyn();
        let n = self.needs[a.0];
        self.push(v, n, Op::Transpose(a))
    }

    /// `[n, m] + [m]` broadcast.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.values[x.0]);
        let bv = as1(&self.values[b.0]);
        assert_eq!(xv.ncols(), bv.len(), "bias length");
        let v = (&xv + &bv).into_dyn();
        let n = self.needs(&[x, b]);
        self.push(v, n, Op::AddBias(x, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let z = T::zero();
        let v = self.values[a.0].mapv(|x| if x > z { x } else { z });
        let n = self.needs[a.0];
        self.push(v, n, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(|x| x.exp());
        let n = self.needs[a.0];
        self.push(v, n, Op::Exp(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(|x| x.abs());
        let n = self.needs[a.0];
        self.push(v, n, Op::Abs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(|x| x * x);
        let n = self.needs[a.0];
        self.push(v, n, Op::Square(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.values[a.0].mapv(|x| x.max(lo).min(hi));
        let n = self.needs[a.0];
        self.push(v, n, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = as2(&self.values[a.0]);
        let mut v = x.to_owned();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let n = self.needs[a.0];
        self.push(v.into_dyn(), n, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = as2(&self.values[x.0]);
        let g = as1(&self.values[gain.0]);
        let b = as1(&self.values[bias.0]);
        let (n, m) = xv.dim();
        assert_eq!(g.len(), m);
        assert_eq!(b.len(), m);
        let eps = T::from_f64(eps);
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = Array1::zeros(n);
        let mf = T::from_f64(m as f64);
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.sum() / mf;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                xhat[[i, j]] = (row[j] - mu) * is;
            }
        }
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                out[[i, j]] = xhat[[i, j]] * g[j] + b[j];
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        self.push(
            out.into_dyn(),
            needs,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(&self.values[p.0])).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        let n = self.needs(parts);
        self.push(v.into_dyn(), n, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(&self.values[p.0])).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        let n = self.needs(parts);
        self.push(v.into_dyn(), n, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = as2(&self.values[a.0])
            .slice(ndarray::s![.., start..end])
            .to_owned()
            .into_dyn();
        let n = self.needs[a.0];
        self.push(v, n, Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let av = as2(&self.values[a.0]);
        let mut v = Array2::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&av.row(i));
        }
        let n = self.needs[a.0];
        self.push(v.into_dyn(), n, Op::GatherRows(a, idx))
    }

    /// Stack `times` copies of the rows: output row `t*n + i` = input row `i`.
    pub fn tile_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let av = as2(&self.values[a.0]);
        let (n, m) = av.dim();
        let mut v = Array2::zeros((times * n, m));
        for t in 0..times {
            v.slice_mut(ndarray::s![t * n..(t + 1) * n, ..]).assign(&av);
        }
        let needs = self.needs[a.0];
        self.push(v.into_dyn(), needs, Op::TileRows(a, times))
    }

    /// `[1, m]` repeated to `[n, m]`.
    pub fn broadcast_row(&mut self, a: NodeId, n: usize) -> NodeId {
        let av = as2(&self.values[a.0]);
        assert_eq!(av.nrows(), 1, "broadcast_row wants [1, m]");
        let mut v = Array2::zeros((n, av.ncols()));
        for mut row in v.rows_mut() {
            row.assign(&av.row(0));
        }
        let needs = self.needs[a.0];
        self.push(v.into_dyn(), needs, Op::BroadcastRow(a))
    }

    /// `[n, m] -> [1, m]` mean over rows.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = as2(&self.values[a.0]);
        let n = av.nrows();
        let v = (av.sum_axis(Axis(0)) / T::from_f64(n as f64))
            .insert_axis(Axis(0))
            .into_dyn();
        let needs = self.needs[a.0];
        self.push(v, needs, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ndarray::arr1(&[self.values[a.0].sum()]).into_dyn();
        let n = self.needs[a.0];
        self.push(v, n, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let len = self.values[a.0].len();
        let v = ndarray::arr1(&[self.values[a.0].sum() / T::from_f64(len as f64)]).into_dyn();
        let n = self.needs[a.0];
        self.push(v, n, Op::MeanAll(a))
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.values[parts[0].0].clone();
        for &p in &parts[1..] {
            v = &v + &self.values[p.0];
        }
        let n = self.needs(parts);
        self.push(v, n, Op::AddN(parts.to_vec()))
    }

    /// Combine `M` stacked member predictions `[M*N, C]` with constant
    /// per-query weights `[N, M]`: `out[i] = sum_m w[i,m] * preds[m*N + i]`.
    pub fn ensemble_mix(&mut self, preds: NodeId, weights: Arc<Array2<T>>) -> NodeId {
        let pv = as2(&self.values[preds.0]);
        let (nq, m) = weights.dim();
        assert_eq!(pv.nrows(), nq * m, "ensemble preds rows");
        let c = pv.ncols();
        let mut v = Array2::zeros((nq, c));
        for i in 0..nq {
            for mem in 0..m {
                let w = weights[[i, mem]];
                let src = pv.row(mem * nq + i);
                for k in 0..c {
                    v[[i, k]] = v[[i, k]] + w * src[k];
                }
            }
        }
        let n = self.needs[preds.0];
        self.push(v.into_dyn(), n, Op::EnsembleMix { preds, weights })
    }

    /// 3x3 same-size convolution: `x [Cin,H,W]`, `w [Cout, Cin*9]`, `b [Cout]`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as3(&self.values[x.0]);
        let wv = as2(&self.values[w.0]);
        let bv = as1(&self.values[b.0]);
        let (cin, h, wd) = xv.dim();
        assert_eq!(wv.ncols(), cin * 9, "conv weight cols");
        assert_eq!(bv.len(), wv.nrows(), "conv bias");
        let col = im2col3x3(&xv);
        let mut y2 = wv.dot(&col);
        for (mut row, &bias) in y2.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let cout = wv.nrows();
        let v = y2
            .into_shape_with_order((cout, h, wd))
            .expect("conv reshape")
            .into_dyn();
        let n = self.needs(&[x, w, b]);
        self.push(
            v,
            n,
            Op::Conv3x3 {
                x,
                w,
                b,
                col: Arc::new(col),
            },
        )
    }

    /// Feature unfolding: `[C,H,W] -> [H*W, 9C]` with zero padding,
    /// column = `c*9 + ky*3 + kx`.
    pub fn unfold3x3(&mut self, x: NodeId) -> NodeId {
        let xv = as3(&self.values[x.0]);
        let col = im2col3x3(&xv);
        let v = col.t().to_owned().into_dyn();
        let n = self.needs[x.0];
        self.push(v, n, Op::Unfold3x3(x))
    }

    /// `[C,H,W] -> [H*W, C]`.
    pub fn flatten_spatial(&mut self, x: NodeId) -> NodeId {
        let xv = as3(&self.values[x.0]);
        let (c, h, w) = xv.dim();
        let mut v = Array2::zeros((h * w, c));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    v[[y * w + xx, ch]] = xv[[ch, y, xx]];
                }
            }
        }
        let n = self.needs[x.0];
        self.push(v.into_dyn(), n, Op::FlattenSpatial(x))
    }

    fn acc(&mut self, id: NodeId, delta: ArrayD<T>) {
        if !self.needs[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => *g = &*g + &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar node; afterwards leaf gradients are
    /// available through [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.values[loss.0].len(), 1, "backward wants a scalar");
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(ArrayD::ones(self.values[loss.0].raw_dim()));
        for i in (0..self.ops.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            // moved ops back in after the match below
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(*a, gout.clone());
                    self.acc(*b, gout.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(*a, gout.clone());
                    self.acc(*b, gout.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = &gout * &self.values[b.0];
                    let db = &gout * &self.values[a.0];
                    self.acc(*a, da);
                    self.acc(*b, db);
                }
                Op::Scale(a, c) => self.acc(*a, gout.mapv(|v| v * *c)),
                Op::AddScalar(a, _) => self.acc(*a, gout.clone()),
                Op::Matmul(a, b) => {
                    let g2 = as2(&gout);
                    let av = as2(&self.values[a.0]);
                    let bv = as2(&self.values[b.0]);
                    let da = g2.dot(&bv.t()).into_dyn();
                    let db = av.t().dot(&g2).into_dyn();
                    self.acc(*a, da);
                    self.acc(*b, db);
                }
                Op::Transpose(a) => {
                    let d = as2(&gout).t().as_standard_layout().into_owned();
                    self.acc(*a, d.into_dyn());
                }
                Op::AddBias(x, b) => {
                    let g2 = as2(&gout);
                    let db = g2.sum_axis(Axis(0)).into_dyn();
                    self.acc(*x, gout.clone());
                    self.acc(*b, db);
                }
                Op::Relu(a) => {
                    let z = T::zero();
                    let mask = self.values[a.0].mapv(|v| if v > z { T::one() } else { z });
                    self.acc(*a, &gout * &mask);
                }
                Op::Exp(a) => {
                    // value of this node is exp(x)
                    let d = &gout * &self.values[i];
                    self.acc(*a, d);
                }
                Op::Abs(a) => {
                    let z = T::zero();
                    let sign = self.values[a.0].mapv(|v| {
                        if v > z {
                            T::one()
                        } else if v < z {
                            -T::one()
                        } else {
                            z
                        }
                    });
                    self.acc(*a, &gout * &sign);
                }
                Op::Square(a) => {
                    let two = T::from_f64(2.0);
                    let d = &gout * &self.values[a.0].mapv(|v| two * v);
                    self.acc(*a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self.values[a.0].mapv(|v| {
                        if v > *lo && v < *hi {
                            T::one()
                        } else {
                            T::zero()
                        }
                    });
                    self.acc(*a, &gout * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = as2(&self.values[i]);
                    let g2 = as2(&gout);
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = g2
                            .row(r)
                            .iter()
                            .zip(y.row(r).iter())
                            .fold(T::zero(), |acc, (&g, &v)| acc + g * v);
                        for c in 0..y.ncols() {
                            dx[[r, c]] = y[[r, c]] * (g2[[r, c]] - dot);
                        }
                    }
                    self.acc(*a, dx.into_dyn());
                }
                Op::LayerNormRows {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g2 = as2(&gout);
                    let gvec = as1(&self.values[gain.0]);
                    let (n, m) = g2.dim();
                    let mf = T::from_f64(m as f64);
                    let mut dgain = Array1::zeros(m);
                    let mut dbias = Array1::zeros(m);
                    let mut dx = Array2::zeros((n, m));
                    for r in 0..n {
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for c in 0..m {
                            let dy = g2[[r, c]];
                            dgain[c] = dgain[c] + dy * xhat[[r, c]];
                            dbias[c] = dbias[c] + dy;
                            let dxh = dy * gvec[c];
                            mean_dxhat = mean_dxhat + dxh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[[r, c]];
                        }
                        mean_dxhat = mean_dxhat / mf;
                        mean_dxhat_xhat = mean_dxhat_xhat / mf;
                        for c in 0..m {
                            let dxh = g2[[r, c]] * gvec[c];
                            dx[[r, c]] = inv_std[r]
                                * (dxh - mean_dxhat - xhat[[r, c]] * mean_dxhat_xhat);
                        }
                    }
                    self.acc(*x, dx.into_dyn());
                    self.acc(*gain, dgain.into_dyn());
                    self.acc(*bias, dbias.into_dyn());
                }
                Op::ConcatCols(parts) => {
                    let g2 = as2(&gout);
                    let mut at = 0;
                    for &p in parts {
                        let w = as2(&self.values[p.0]).ncols();
                        let d = g2.slice(ndarray::s![.., at..at + w]).to_owned().into_dyn();
                        self.acc(p, d);
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let g2 = as2(&gout);
                    let mut at = 0;
                    for &p in parts {
                        let h = as2(&self.values[p.0]).nrows();
                        let d = g2.slice(ndarray::s![at..at + h, ..]).to_owned().into_dyn();
                        self.acc(p, d);
                        at += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let av = as2(&self.values[a.0]);
                    let mut d = Array2::zeros(av.dim());
                    d.slice_mut(ndarray::s![.., *start..*end]).assign(&as2(&gout));
                    self.acc(*a, d.into_dyn());
                }
                Op::GatherRows(a, idx) => {
                    let av = as2(&self.values[a.0]);
                    let g2 = as2(&gout);
                    let mut d = Array2::zeros(av.dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = d.row_mut(i);
                        let src = g2.row(r);
                        for c in 0..dst.len() {
                            dst[c] = dst[c] + src[c];
                        }
                    }
                    self.acc(*a, d.into_dyn());
                }
                Op::TileRows(a, times) => {
                    let av = as2(&self.values[a.0]);
                    let (n, m) = av.dim();
                    let g2 = as2(&gout);
                    let mut d = Array2::zeros((n, m));
                    for t in 0..*times {
                        d = d + g2.slice(ndarray::s![t * n..(t + 1) * n, ..]);
                    }
                    self.acc(*a, d.into_dyn());
                }
                Op::BroadcastRow(a) => {
                    let g2 = as2(&gout);
                    let d = g2.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                    self.acc(*a, d);
                }
                Op::MeanRows(a) => {
                    let av = as2(&self.values[a.0]);
                    let (n, m) = av.dim();
                    let g2 = as2(&gout);
                    let inv = T::one() / T::from_f64(n as f64);
                    let mut d = Array2::zeros((n, m));
                    for r in 0..n {
                        for c in 0..m {
                            d[[r, c]] = g2[[0, c]] * inv;
                        }
                    }
                    self.acc(*a, d.into_dyn());
                }
                Op::SumAll(a) => {
                    let g = gout.iter().next().copied().unwrap();
                    let d = ArrayD::from_elem(self.values[a.0].raw_dim(), g);
                    self.acc(*a, d);
                }
                Op::MeanAll(a) => {
                    let g = gout.iter().next().copied().unwrap();
                    let len = self.values[a.0].len();
                    let d = ArrayD::from_elem(
                        self.values[a.0].raw_dim(),
                        g / T::from_f64(len as f64),
                    );
                    self.acc(*a, d);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        self.acc(p, gout.clone());
                    }
                }
                Op::EnsembleMix { preds, weights } => {
                    let g2 = as2(&gout);
                    let (nq, m) = weights.dim();
                    let c = g2.ncols();
                    let mut d = Array2::zeros((nq * m, c));
                    for i in 0..nq {
                        for mem in 0..m {
                            let w = weights[[i, mem]];
                            for k in 0..c {
                                d[[mem * nq + i, k]] = w * g2[[i, k]];
                            }
                        }
                    }
                    self.acc(*preds, d.into_dyn());
                }
                Op::Conv3x3 { x, w, b, col } => {
                    let (cout, h, wd) = as3(&self.values[i]).dim();
                    let g2 = gout
                        .view()
                        .into_shape_with_order((cout, h * wd))
                        .expect("conv grad reshape")
                        .to_owned();
                    let wv = as2(&self.values[w.0]);
                    let dw = g2.dot(&col.t()).into_dyn();
                    let db = g2.sum_axis(Axis(1)).into_dyn();
                    let dcol = wv.t().dot(&g2);
                    // col2im: scatter back through the zero-padded unfolding
                    let xv = as3(&self.values[x.0]);
                    let (cin, xh, xw) = xv.dim();
                    let mut dx = Array3::zeros((cin, xh, xw));
                    for ch in 0..cin {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let row = ch * 9 + ky * 3 + kx;
                                for y in 0..xh {
                                    let sy = y as i64 + ky as i64 - 1;
                                    if sy < 0 || sy >= xh as i64 {
                                        continue;
                                    }
                                    for xx in 0..xw {
                                        let sx = xx as i64 + kx as i64 - 1;
                                        if sx < 0 || sx >= xw as i64 {
                                            continue;
                                        }
                                        dx[[ch, sy as usize, sx as usize]] = dx
                                            [[ch, sy as usize, sx as usize]]
                                            + dcol[[row, y * xw + xx]];
                                    }
                                }
                            }
                        }
                    }
                    self.acc(*x, dx.into_dyn());
                    self.acc(*w, dw);
                    self.acc(*b, db);
                }
                Op::Unfold3x3(x) => {
                    let xv = as3(&self.values[x.0]);
                    let (c, h, w) = xv.dim();
                    let g2 = as2(&gout);
                    let mut dx = Array3::zeros((c, h, w));
                    for ch in 0..c {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let colidx = ch * 9 + ky * 3 + kx;
                                for y in 0..h {
                                    let sy = y as i64 + ky as i64 - 1;
                                    if sy < 0 || sy >= h as i64 {
                                        continue;
                                    }
                                    for xx in 0..w {
                                        let sx = xx as i64 + kx as i64 - 1;
                                        if sx < 0 || sx >= w as i64 {
                                            continue;
                                        }
                                        dx[[ch, sy as usize, sx as usize]] = dx
                                            [[ch, sy as usize, sx as usize]]
                                            + g2[[y * w + xx, colidx]];
                                    }
                                }
                            }
                        }
                    }
                    self.acc(*x, dx.into_dyn());
                }
                Op::FlattenSpatial(x) => {
                    let xv = as3(&self.values[x.0]);
                    let (c, h, w) = xv.dim();
                    let g2 = as2(&gout);
                    let mut dx = Array3::zeros((c, h, w));
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[[ch, y, xx]] = g2[[y * w + xx, ch]];
                            }
                        }
                    }
                    self.acc(*x, dx.into_dyn());
                }
            }
            self.ops[i] = op;
            self.grads[i] = Some(gout);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::stream;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn randa(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Finite-difference check of `build` (params -> scalar loss) against the
    /// graph's backward pass, over every coordinate of every param.
    fn check_grads(
        shapes: &[&[usize]],
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = stream(seed, &[0xad]);
        let params: Vec<ArrayD<f64>> = shapes.iter().map(|s| randa(s, &mut rng)).collect();

        let eval = |params: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
            let loss = build(&mut g, &ids);
            g.scalar_value(loss)
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss);

        let h = 1e-6;
        for (pi, shape) in shapes.iter().enumerate() {
            let grad = g
                .grad(ids[pi])
                .unwrap_or_else(|| panic!("no grad for param {pi}"))
                .as_standard_layout()
                .into_owned();
            let len: usize = shape.iter().product();
            for k in 0..len {
                let mut pp = params.clone();
                let mut pm = params.clone();
                pp[pi].as_slice_mut().unwrap()[k] += h;
                pm[pi].as_slice_mut().unwrap()[k] -= h;
                let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
                let an = grad.as_slice().unwrap()[k];
                let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1.0);
                assert!(
                    rel < tol,
                    "param {pi} coord {k}: fd {fd} vs analytic {an} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn grad_dense_chain() {
        // relu(x W + b) V summed, exercising matmul/bias/relu/reductions
        check_grads(
            &[&[4, 3], &[3, 5], &[5], &[5, 2]],
            |g, p| {
                let h = g.matmul(p[0], p[1]);
                let h = g.add_bias(h, p[2]);
                let h = g.relu(h);
                let y = g.matmul(h, p[3]);
                g.sum_all(y)
            },
            1,
            1e-6,
        );
    }

    #[test]
    fn grad_elementwise_ops() {
        check_grads(
            &[&[3, 4], &[3, 4]],
            |g, p| {
                let s = g.sub(p[0], p[1]);
                let a = g.abs(s);
                let m = g.mul(a, p[0]);
                let e = g.exp(p[1]);
                let q = g.square(e);
                let c = g.clamp(q, 0.2, 2.0);
                let sum = g.add(m, c);
                let sc = g.scale(sum, 0.7);
                let sc = g.add_scalar(sc, 0.1);
                g.mean_all(sc)
            },
            2,
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_attention_piece() {
        check_grads(
            &[&[4, 6], &[6, 6], &[6, 6], &[6, 6]],
            |g, p| {
                let q = g.matmul(p[0], p[1]);
                let k = g.matmul(p[0], p[2]);
                let v = g.matmul(p[0], p[3]);
                let kt = g.transpose(k);
                let scores = g.matmul(q, kt);
                let scores = g.scale(scores, 1.0 / (6f64).sqrt());
                let att = g.softmax_rows(scores);
                let out = g.matmul(att, v);
                g.mean_all(out)
            },
            3,
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        check_grads(
            &[&[5, 7], &[7], &[7]],
            |g, p| {
                let y = g.layer_norm_rows(p[0], p[1], p[2], 1e-5);
                let y = g.square(y);
                g.mean_all(y)
            },
            4,
            1e-5,
        );
    }

    #[test]
    fn grad_concat_slice_gather() {
        check_grads(
            &[&[3, 2], &[3, 4], &[2, 6]],
            |g, p| {
                let cat = g.concat_cols(&[p[0], p[1]]);
                let rows = g.concat_rows(&[cat, p[2]]);
                let sl = g.slice_cols(rows, 1, 5);
                let gathered = g.gather_rows(sl, Arc::new(vec![0, 4, 4, 2]));
                let t = g.tile_rows(gathered, 2);
                g.mean_all(t)
            },
            5,
            1e-6,
        );
    }

    #[test]
    fn grad_broadcast_mean_rows() {
        check_grads(
            &[&[1, 5], &[4, 5]],
            |g, p| {
                let b = g.broadcast_row(p[0], 4);
                let m = g.mul(b, p[1]);
                let mr = g.mean_rows(m);
                let s = g.square(mr);
                g.sum_all(s)
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn grad_ensemble_mix() {
        let mut rng = stream(7, &[0xae]);
        let w = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.0..1.0));
        check_grads(
            &[&[12, 2]],
            move |g, p| {
                let mixed = g.ensemble_mix(p[0], Arc::new(w.clone()));
                g.mean_all(mixed)
            },
            7,
            1e-6,
        );
    }

    #[test]
    fn grad_conv_and_unfold() {
        check_grads(
            &[&[2, 4, 5], &[3, 18], &[3], &[3, 27], &[3]],
            |g, p| {
                let y = g.conv3x3(p[0], p[1], p[2]);
                let y = g.relu(y);
                let y2 = g.conv3x3(y, p[3], p[4]);
                let table = g.unfold3x3(y2);
                let flat = g.flatten_spatial(y2);
                let t = g.mean_all(table);
                let f = g.mean_all(flat);
                g.add(t, f)
            },
            8,
            1e-5,
        );
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = stream(9, &[0xaf]);
        let x = Array3::from_shape_fn((2, 5, 6), |_| rng.random_range(-1.0..1.0f64));
        let w = Array2::from_shape_fn((3, 18), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));

        let mut g = Graph::new();
        let xi = g.constant(x.clone().into_dyn());
        let wi = g.constant(w.clone().into_dyn());
        let bi = g.constant(b.clone().into_dyn());
        let y = g.conv3x3(xi, wi, bi);
        let yv = g.value(y).clone();

        for o in 0..3 {
            for yy in 0..5i64 {
                for xx in 0..6i64 {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for ky in -1..=1i64 {
                            for kx in -1..=1i64 {
                                let (sy, sx) = (yy + ky, xx + kx);
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 6 {
                                    continue;
                                }
                                let wi = c * 9 + ((ky + 1) * 3 + (kx + 1)) as usize;
                                acc += w[[o, wi]] * x[[c, sy as usize, sx as usize]];
                            }
                        }
                    }
                    let got = yv[[o, yy as usize, xx as usize].as_ref()];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn constants_do_not_collect_grads() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(ArrayD::zeros(ndarray::IxDyn(&[2, 2])));
        let p = g.param(ArrayD::ones(ndarray::IxDyn(&[2, 2])));
        let y = g.add(c, p);
        let l = g.sum_all(y);
        g.backward(l);
        assert!(g.grad(c).is_none());
        assert!(g.grad(p).is_some());
    }
}
