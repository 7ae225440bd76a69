//! Local implicit image function decoder and its convolutional feature
//! extractor.
//!
//! The extractor is a small EDSR-style residual stack that keeps spatial
//! dims, producing one latent code per LR pixel. To render an RGB value at a
//! normalized query coordinate, the decoder takes the four nearest codes
//! (local ensemble), unfolds each with its 3x3 neighborhood, and feeds the
//! render MLP with the code, the query's relative offset to the code center
//! (raw plus its low-frequency positional encoding), and the query cell size;
//! the high-frequency encoding and the latent `z` signal join at the MLP's
//! second stage. Member predictions are blended with bilinear area weights.
//!
//! Relative offsets are scaled by half the feature resolution so one code
//! cell spans `[-1, 1]`; the copy fed to the positional encoding is clamped
//! to that interval (border-clamped ensemble members can reach 1.5 cells
//! out), while the raw offset is passed through unclamped alongside. Cell
//! sizes are scaled the same way. Ties in nearest-code selection resolve to
//! the lower (row-major) index so rendering is bit-reproducible.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::coord::{make_coord_grid, pixel_center, CoordGrid};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageTensor, ValueRange};
use crate::nn::{
    bind_conv, bind_linear, conv3x3, linear, Conv3x3, ConvNodes, Linear, LinearNodes,
};
use crate::posenc::{encode, split_bands, PosEncConfig};

/// Latent code grid produced by the extractor: `[F, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    codes: Array3<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(codes: Array3<T>) -> Result<Self> {
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("feature map entries must be finite"));
        }
        let (_, h, w) = codes.dim();
        if h == 0 || w == 0 {
            return Err(Error::arg("feature map needs positive spatial dims"));
        }
        Ok(FeatureMap { codes })
    }

    pub fn codes(&self) -> &Array3<T> {
        &self.codes
    }

    pub fn channels(&self) -> usize {
        self.codes.dim().0
    }

    /// `(h, w)` of the source image / code grid.
    pub fn source_dims(&self) -> (usize, usize) {
        let (_, h, w) = self.codes.dim();
        (h, w)
    }
}

/// Decoder hyperparameters (serialized with checkpoints through the run
/// config; this struct is the resolved in-memory form).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderArch {
    pub n_feats: usize,
    pub n_blocks: usize,
    pub mlp_width: usize,
    pub mlp_layers: usize,
    pub hf_dim: usize,
    pub d_z: usize,
    pub posenc: PosEncConfig,
    pub feat_unfold: bool,
    pub local_ensemble: bool,
    pub cell_decode: bool,
}

impl DecoderArch {
    pub fn validate(&self) -> Result<()> {
        if self.n_feats == 0 || self.n_blocks == 0 || self.mlp_width == 0 || self.hf_dim == 0 {
            return Err(Error::arg("decoder widths/depths must be positive"));
        }
        if self.mlp_layers < 2 {
            return Err(Error::arg(
                "render MLP needs at least 2 layers (stage 1 + output)",
            ));
        }
        if self.d_z == 0 {
            return Err(Error::arg("latent dimension must be positive"));
        }
        Ok(())
    }

    /// Columns of the per-code table fed to the MLP's first stage.
    pub fn table_cols(&self) -> usize {
        if self.feat_unfold {
            9 * self.n_feats
        } else {
            self.n_feats
        }
    }

    fn stage1_in(&self) -> usize {
        let mut d = self.table_cols() + 2 + self.posenc.band_len();
        if self.cell_decode {
            d += 2;
        }
        d
    }

    fn stage2_extra(&self) -> usize {
        self.posenc.band_len() + self.hf_dim
    }

    fn mlp_dims(&self) -> Vec<(usize, usize)> {
        let l = self.mlp_layers;
        let w = self.mlp_width;
        (0..l)
            .map(|i| {
                let fan_in = if i == 0 {
                    self.stage1_in()
                } else if i == 1 {
                    w + self.stage2_extra()
                } else {
                    w
                };
                let fan_out = if i == l - 1 { 3 } else { w };
                (fan_in, fan_out)
            })
            .collect()
    }
}

/// Extractor + render MLP + latent fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T: Scalar> {
    pub arch: DecoderArch,
    pub head: Conv3x3<T>,
    pub blocks: Vec<(Conv3x3<T>, Conv3x3<T>)>,
    pub body_end: Conv3x3<T>,
    pub mlp: Vec<Linear<T>>,
    pub hf_proj: Linear<T>,
}

pub struct DecoderNodes {
    pub head: ConvNodes,
    pub blocks: Vec<(ConvNodes, ConvNodes)>,
    pub body_end: ConvNodes,
    pub mlp: Vec<LinearNodes>,
    pub hf_proj: LinearNodes,
}

impl<T: Scalar> DecoderParams<T> {
    pub fn init(arch: DecoderArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let f = arch.n_feats;
        let head = Conv3x3::init(3, f, rng);
        let blocks = (0..arch.n_blocks)
            .map(|_| (Conv3x3::init(f, f, rng), Conv3x3::init(f, f, rng)))
            .collect();
        let body_end = Conv3x3::init(f, f, rng);
        let mlp = arch
            .mlp_dims()
            .into_iter()
            .map(|(i, o)| Linear::init(i, o, rng))
            .collect();
        let hf_proj = Linear::init(arch.d_z, arch.hf_dim, rng);
        Ok(DecoderParams {
            arch,
            head,
            blocks,
            body_end,
            mlp,
            hf_proj,
        })
    }

    /// Parameter arrays in a fixed order (matches `names` and `bind`).
    pub fn arrays(&self) -> Vec<&ArrayD<T>> {
        let mut out = vec![&self.head.w, &self.head.b];
        for (c1, c2) in &self.blocks {
            out.extend([&c1.w, &c1.b, &c2.w, &c2.b]);
        }
        out.extend([&self.body_end.w, &self.body_end.b]);
        for l in &self.mlp {
            out.extend([&l.w, &l.b]);
        }
        out.extend([&self.hf_proj.w, &self.hf_proj.b]);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        let mut out: Vec<&mut ArrayD<T>> = vec![&mut self.head.w, &mut self.head.b];
        for (c1, c2) in &mut self.blocks {
            out.extend([&mut c1.w, &mut c1.b, &mut c2.w, &mut c2.b]);
        }
        out.extend([&mut self.body_end.w, &mut self.body_end.b]);
        for l in &mut self.mlp {
            out.extend([&mut l.w, &mut l.b]);
        }
        out.extend([&mut self.hf_proj.w, &mut self.hf_proj.b]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["head.w".into(), "head.b".into()];
        for i in 0..self.blocks.len() {
            for part in ["c1.w", "c1.b", "c2.w", "c2.b"] {
                out.push(format!("block{i}.{part}"));
            }
        }
        out.extend(["body.w".into(), "body.b".into()]);
        for i in 0..self.mlp.len() {
            out.push(format!("mlp{i}.w"));
            out.push(format!("mlp{i}.b"));
        }
        out.extend(["hf.w".into(), "hf.b".into()]);
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> DecoderNodes {
        DecoderNodes {
            head: bind_conv(g, &self.head, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|(c1, c2)| (bind_conv(g, c1, trainable), bind_conv(g, c2, trainable)))
                .collect(),
            body_end: bind_conv(g, &self.body_end, trainable),
            mlp: self.mlp.iter().map(|l| bind_linear(g, l, trainable)).collect(),
            hf_proj: bind_linear(g, &self.hf_proj, trainable),
        }
    }

    /// Ordered node ids, aligned with `arrays()`.
    pub fn node_ids(nodes: &DecoderNodes) -> Vec<NodeId> {
        let mut out = vec![nodes.head.w, nodes.head.b];
        for (c1, c2) in &nodes.blocks {
            out.extend([c1.w, c1.b, c2.w, c2.b]);
        }
        out.extend([nodes.body_end.w, nodes.body_end.b]);
        for l in &nodes.mlp {
            out.extend([l.w, l.b]);
        }
        out.extend([nodes.hf_proj.w, nodes.hf_proj.b]);
        out
    }
}

/// Residual conv stack with a global skip; spatial dims preserved.
pub fn build_extractor<T: Scalar>(g: &mut Graph<T>, x: NodeId, nodes: &DecoderNodes) -> NodeId {
    let h0 = conv3x3(g, x, &nodes.head);
    let mut h = h0;
    for (c1, c2) in &nodes.blocks {
        let y = conv3x3(g, h, c1);
        let y = g.relu(y);
        let y = conv3x3(g, y, c2);
        h = g.add(h, y);
    }
    let tail = conv3x3(g, h, &nodes.body_end);
    g.add(h0, tail)
}

/// Run the extractor over a signed-range RGB image.
pub fn extract_features<T: Scalar>(
    lr: &ImageTensor,
    params: &DecoderParams<T>,
) -> Result<FeatureMap<T>> {
    if lr.range() != ValueRange::Signed || lr.color() != ColorSpace::Rgb {
        return Err(Error::arg("extract_features wants a signed-range RGB image"));
    }
    let mut g = Graph::new();
    let x = g.constant(lr.data().mapv(|v| T::from_f64(v as f64)).into_dyn());
    let nodes = params.bind(&mut g, false);
    let f = build_extractor(&mut g, x, &nodes);
    let codes = g
        .value(f)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("extractor output is 3D");
    FeatureMap::new(codes)
}

/// Per-query decoding geometry: selected code per ensemble member, relative
/// offsets (scaled to cell units), and normalized area weights.
pub(crate) struct QueryPlan {
    pub member_idx: Vec<Vec<usize>>,
    pub member_rel: Vec<Vec<(f64, f64)>>,
    pub weights: Array2<f64>,
}

impl QueryPlan {
    pub fn members(&self) -> usize {
        self.member_idx.len()
    }
}

/// Containing cell and the adjacent cell toward the query's in-cell offset,
/// both clamped into range (they coincide at borders). The containing cell is
/// always first, so degenerate center-aligned queries keep their co-located
/// code as a member regardless of floating-point noise; boundary ties resolve
/// through `floor`, i.e. toward the lower index.
fn cell_pair(coord: f64, n: usize) -> (usize, usize) {
    let u = (coord + 1.0) * n as f64 / 2.0;
    let cell = (u.floor() as i64).clamp(0, n as i64 - 1);
    let frac = u - cell as f64 - 0.5;
    let other = if frac < 0.0 { cell - 1 } else { cell + 1 };
    (
        cell as usize,
        other.clamp(0, n as i64 - 1) as usize,
    )
}

pub(crate) fn plan_queries(
    grid: &CoordGrid,
    h: usize,
    w: usize,
    local_ensemble: bool,
) -> QueryPlan {
    let n = grid.len();
    let m = if local_ensemble { 4 } else { 1 };
    let mut member_idx = vec![vec![0usize; n]; m];
    let mut member_rel = vec![vec![(0.0, 0.0); n]; m];
    let mut areas = Array2::zeros((n, m));
    for q in 0..n {
        let (r, c) = grid.coord(q);
        let (i0, i1) = cell_pair(r, h);
        let (j0, j1) = cell_pair(c, w);
        let members: &[(usize, usize)] = if local_ensemble {
            &[(i0, j0), (i0, j1), (i1, j0), (i1, j1)]
        } else {
            &[(i0, j0)]
        };
        for (mi, &(i, j)) in members.iter().enumerate() {
            let dr = (r - pixel_center(i, h)) * h as f64 / 2.0;
            let dc = (c - pixel_center(j, w)) * w as f64 / 2.0;
            member_idx[mi][q] = i * w + j;
            member_rel[mi][q] = (dr, dc);
            areas[[q, mi]] = dr.abs() * dc.abs() + 1e-9;
        }
    }
    let mut weights = Array2::zeros((n, m));
    if m == 4 {
        // each member weighted by the area spanned toward its diagonal opposite
        for q in 0..n {
            let total: f64 = areas.row(q).sum();
            weights[[q, 0]] = areas[[q, 3]] / total;
            weights[[q, 1]] = areas[[q, 2]] / total;
            weights[[q, 2]] = areas[[q, 1]] / total;
            weights[[q, 3]] = areas[[q, 0]] / total;
        }
    } else {
        weights.fill(1.0);
    }
    QueryPlan {
        member_idx,
        member_rel,
        weights,
    }
}

/// Normalized local-ensemble weights for a query grid against an `h x w`
/// code grid (exposed for property checks; non-negative, rows sum to 1).
pub fn ensemble_weights(grid: &CoordGrid, h: usize, w: usize) -> Array2<f64> {
    plan_queries(grid, h, w, true).weights
}

/// Where the per-code table comes from when building the decode graph.
pub enum TableSource<'a, T: Scalar> {
    /// Graph node `[h*w, table_cols]` (training: gradients flow through it).
    Node(NodeId),
    /// Plain feature map; rows are gathered outside the graph (inference).
    Plain(&'a FeatureMap<T>),
}

/// Gather unfolded (or raw) code rows straight from a feature map.
fn gather_table_rows<T: Scalar>(
    feat: &FeatureMap<T>,
    idx: &[usize],
    unfold: bool,
) -> Array2<T> {
    let (f, h, w) = feat.codes().dim();
    let cols = if unfold { 9 * f } else { f };
    let mut out = Array2::zeros((idx.len(), cols));
    for (row, &p) in idx.iter().enumerate() {
        let (y, x) = (p / w, p % w);
        if unfold {
            for c in 0..f {
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let (sy, sx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                        if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                            continue; // zero padding
                        }
                        out[[row, c * 9 + ky * 3 + kx]] =
                            feat.codes()[[c, sy as usize, sx as usize]];
                    }
                }
            }
        } else {
            for c in 0..f {
                out[[row, c]] = feat.codes()[[c, y, x]];
            }
        }
    }
    out
}

/// Build the decode graph for a set of queries. `hf` is a `[N, hf_dim]` node
/// (zeros when no latent signal is used). Returns a `[N, 3]` node of
/// signed-range RGB (unclamped).
pub fn build_query_rgb<T: Scalar>(
    g: &mut Graph<T>,
    table: TableSource<'_, T>,
    feat_dims: (usize, usize),
    grid: &CoordGrid,
    hf: NodeId,
    mlp: &[LinearNodes],
    arch: &DecoderArch,
) -> NodeId {
    let (h, w) = feat_dims;
    let plan = plan_queries(grid, h, w, arch.local_ensemble);
    let m = plan.members();
    let n = grid.len();

    let rows = match table {
        TableSource::Node(t) => {
            let gathered: Vec<NodeId> = (0..m)
                .map(|mi| g.gather_rows(t, Arc::new(plan.member_idx[mi].clone())))
                .collect();
            if m == 1 {
                gathered[0]
            } else {
                g.concat_rows(&gathered)
            }
        }
        TableSource::Plain(feat) => {
            let mut all = Vec::with_capacity(m * n);
            for mi in 0..m {
                all.extend_from_slice(&plan.member_idx[mi]);
            }
            let rows = gather_table_rows(feat, &all, arch.feat_unfold);
            g.constant2(rows)
        }
    };

    // constant coordinate features, member-major to match the gathered rows
    let pe = &arch.posenc;
    let band = pe.band_len();
    let mut raw = Array2::zeros((m * n, 2));
    let mut lfc = Array2::zeros((m * n, band));
    let mut hfc = Array2::zeros((m * n, band));
    for mi in 0..m {
        for q in 0..n {
            let (dr, dc) = plan.member_rel[mi][q];
            let row = mi * n + q;
            raw[[row, 0]] = T::from_f64(dr);
            raw[[row, 1]] = T::from_f64(dc);
            if pe.degree_l() > 0 {
                let code = encode(&[dr.clamp(-1.0, 1.0), dc.clamp(-1.0, 1.0)], pe)
                    .expect("clamped rel coord encodes");
                let (lo, hi) = split_bands(&code, pe).expect("code length matches");
                for (k, v) in lo.iter().enumerate() {
                    lfc[[row, k]] = T::from_f64(*v);
                }
                for (k, v) in hi.iter().enumerate() {
                    hfc[[row, k]] = T::from_f64(*v);
                }
            }
        }
    }

    let mut stage1 = vec![rows, g.constant2(raw)];
    if band > 0 {
        stage1.push(g.constant2(lfc));
    }
    if arch.cell_decode {
        let mut cell = Array2::zeros((m * n, 2));
        for mi in 0..m {
            for q in 0..n {
                let (ch, cw) = grid.cell(q);
                cell[[mi * n + q, 0]] = T::from_f64(ch * h as f64 / 2.0);
                cell[[mi * n + q, 1]] = T::from_f64(cw * w as f64 / 2.0);
            }
        }
        stage1.push(g.constant2(cell));
    }
    let x0 = g.concat_cols(&stage1);
    let mut x = linear(g, x0, &mlp[0]);
    x = g.relu(x);

    // stage 2: high-frequency encoding and the latent signal join here
    let mut stage2 = vec![x];
    if band > 0 {
        stage2.push(g.constant2(hfc));
    }
    let hf_t = if m == 1 { hf } else { g.tile_rows(hf, m) };
    stage2.push(hf_t);
    x = g.concat_cols(&stage2);
    for (i, layer) in mlp.iter().enumerate().skip(1) {
        x = linear(g, x, layer);
        if i < mlp.len() - 1 {
            x = g.relu(x);
        }
    }

    if m == 1 {
        x
    } else {
        let wts = plan.weights.mapv(T::from_f64);
        g.ensemble_mix(x, Arc::new(wts))
    }
}

/// Project a latent vector into the per-query high-frequency signal.
pub fn build_hf_from_z<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    hf_proj: &LinearNodes,
    n_queries: usize,
) -> NodeId {
    let row = linear(g, z, hf_proj);
    g.broadcast_row(row, n_queries)
}

/// Decode RGB at arbitrary queries from a feature map. `hf_signal` must have
/// one row per query (pass zeros for "no latent signal"). Output is
/// signed-range RGB, unclamped, `N x 3`.
pub fn query_rgb<T: Scalar>(
    feat: &FeatureMap<T>,
    grid: &CoordGrid,
    hf_signal: &Array2<T>,
    params: &DecoderParams<T>,
) -> Result<Array2<T>> {
    if grid.is_empty() {
        return Ok(Array2::zeros((0, 3)));
    }
    if hf_signal.nrows() != grid.len() || hf_signal.ncols() != params.arch.hf_dim {
        return Err(Error::arg(format!(
            "hf_signal shape {:?} does not match {} queries x hf_dim {}",
            hf_signal.dim(),
            grid.len(),
            params.arch.hf_dim
        )));
    }
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let hf = g.constant2(hf_signal.clone());
    let out = build_query_rgb(
        &mut g,
        TableSource::Plain(feat),
        feat.source_dims(),
        grid,
        hf,
        &nodes.mlp,
        &params.arch,
    );
    Ok(g.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("query output is 2D"))
}

/// Full arbitrary-scale render: build the target grid, expand `z` through the
/// fusion head (zero signal if absent), decode in chunks, assemble, clamp.
pub fn super_resolve<T: Scalar>(
    lr: &ImageTensor,
    scale: f64,
    z: Option<&Array1<T>>,
    params: &DecoderParams<T>,
    chunk: usize,
) -> Result<ImageTensor> {
    if chunk == 0 {
        return Err(Error::arg("chunk size must be positive"));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::arg(format!("scale must be positive, got {scale}")));
    }
    let out_h = (lr.height() as f64 * scale).round() as usize;
    let out_w = (lr.width() as f64 * scale).round() as usize;
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("degenerate super_resolve output size"));
    }
    if let Some(z) = z {
        if z.len() != params.arch.d_z {
            return Err(Error::arg(format!(
                "latent length {} does not match d_z {}",
                z.len(),
                params.arch.d_z
            )));
        }
    }
    let feat = extract_features(&lr.to_signed(), params)?;
    let grid = make_coord_grid(out_h, out_w)?;

    // one hf row, shared by every query
    let hf_row: Array2<T> = match z {
        Some(z) => {
            let mut g = Graph::new();
            let zn = g.constant2(z.clone().insert_axis(ndarray::Axis(0)));
            let hp = bind_linear(&mut g, &params.hf_proj, false);
            let r = linear(&mut g, zn, &hp);
            g.value(r)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        }
        None => Array2::zeros((1, params.arch.hf_dim)),
    };

    let n = grid.len();
    let mut out = Array3::<f32>::zeros((3, out_h, out_w));
    let mut at = 0;
    while at < n {
        let end = (at + chunk).min(n);
        let sub = grid.slice(at, end);
        let mut hf = Array2::zeros((sub.len(), params.arch.hf_dim));
        for mut row in hf.rows_mut() {
            row.assign(&hf_row.row(0));
        }
        let rgb = query_rgb(&feat, &sub, &hf, params)?;
        for (k, q) in (at..end).enumerate() {
            let (y, x) = (q / out_w, q % out_w);
            for c in 0..3 {
                out[[c, y, x]] = (rgb[[k, c]].to_f64() as f32).clamp(-1.0, 1.0);
            }
        }
        at = end;
    }
    Ok(ImageTensor::from_parts(
        out,
        ValueRange::Signed,
        ColorSpace::Rgb,
    ))
}
