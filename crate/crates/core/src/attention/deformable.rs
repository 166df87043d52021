//! Cross-deformable attention: queries from one modality attend to keys and
//! values bilinearly sampled from the other modality at reference points
//! displaced by a learned, tanh-bounded offset field.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{self, Activation};
use crate::params::{Init, ParamStore};
use crate::tensor::{FeatureMap, Matrix};

/// Hyperparameters and parameter keys for one update direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CDAConfig {
    pub prefix: String,
    pub channels: usize,
    /// Reference-grid stride; also the offset-net depthwise stride.
    pub stride: usize,
    /// Maximum offset magnitude in normalized coordinates.
    pub offset_scale: f64,
    /// Offset-net depthwise kernel side; odd and larger than `stride`.
    pub offset_kernel: usize,
    pub ln_eps: f64,
}

impl CDAConfig {
    pub fn new(prefix: &str, channels: usize, stride: usize, offset_scale: f64, offset_kernel: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::pre("CDAConfig", "stride must be >= 1"));
        }
        if !(offset_scale > 0.0) {
            return Err(Error::pre("CDAConfig", format!("offset scale {offset_scale} must be > 0")));
        }
        if offset_kernel.is_multiple_of(2) || offset_kernel <= stride {
            return Err(Error::pre(
                "CDAConfig",
                format!("offset kernel {offset_kernel} must be odd and > stride {stride}"),
            ));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            stride,
            offset_scale,
            offset_kernel,
            ln_eps: 1e-5,
        })
    }

    pub fn key(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    /// Registers every parameter of this direction. The final offset conv
    /// starts at zero so sampling begins on the undeformed grid.
    pub fn init_params(&self, store: &mut ParamStore) -> Result<()> {
        let d = self.channels;
        let kk = self.offset_kernel * self.offset_kernel;
        let xavier = |i, o| Init::XavierUniform { fan_in: i, fan_out: o };
        for name in ["wu", "wq", "wk", "wv"] {
            store.init(&self.key(name), &[d, d], xavier(d, d))?;
        }
        store.init(&self.key("dw"), &[d, kk], xavier(kk, kk))?;
        store.init(&self.key("dw_b"), &[d], Init::Zeros)?;
        store.init(&self.key("ln_g"), &[d], Init::Constant(1.0))?;
        store.init(&self.key("ln_b"), &[d], Init::Zeros)?;
        store.init(&self.key("off_w"), &[2, d], Init::Zeros)?;
        store.init(&self.key("off_b"), &[2], Init::Zeros)?;
        store.init(&self.key("ffn1_w"), &[2 * d, d], xavier(d, 2 * d))?;
        store.init(&self.key("ffn1_b"), &[2 * d], Init::Zeros)?;
        store.init(&self.key("ffn2_w"), &[d, 2 * d], xavier(2 * d, d))?;
        store.init(&self.key("ffn2_b"), &[d], Init::Zeros)?;
        Ok(())
    }
}

/// Uniform lattice of sampling points at the cell centres of an
/// `H/r × W/r` partition, in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    pub rows: usize,
    pub cols: usize,
    /// `[2, rows·cols]`: row 0 holds x, row 1 holds y; points in row-major
    /// lattice order.
    pub points: Matrix,
}

impl ReferenceGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel-space `(row, col)` of lattice point `n`.
    pub fn pixel(&self, n: usize, h: usize, w: usize) -> (f64, f64) {
        (
            ops::denormalize(self.points.at(1, n), h),
            ops::denormalize(self.points.at(0, n), w),
        )
    }
}

pub fn reference_grid(h: usize, w: usize, stride: usize) -> Result<ReferenceGrid> {
    if stride == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(Error::pre(
            "reference_grid",
            format!("map {h}x{w} not divisible by stride {stride}"),
        ));
    }
    let (rows, cols) = (h / stride, w / stride);
    let center = |a: usize| (a as f64 + 0.5) * stride as f64 - 0.5;
    let mut points = Matrix::zeros(2, rows * cols);
    for a in 0..rows {
        for b in 0..cols {
            let n = a * cols + b;
            points.set(0, n, ops::normalize(center(b), w));
            points.set(1, n, ops::normalize(center(a), h));
        }
    }
    Ok(ReferenceGrid { rows, cols, points })
}

/// Offset field `Δp = s·tanh(θ(W_u·F))` as a `[2, H_G·W_G]` node.
pub fn offset_net_graph(g: &mut Graph, f_src: NodeId, cfg: &CDAConfig, store: &ParamStore) -> Result<NodeId> {
    let wu = g.param(store, &cfg.key("wu"))?;
    let dw = g.param(store, &cfg.key("dw"))?;
    let dw_b = g.param(store, &cfg.key("dw_b"))?;
    let ln_g = g.param(store, &cfg.key("ln_g"))?;
    let ln_b = g.param(store, &cfg.key("ln_b"))?;
    let off_w = g.param(store, &cfg.key("off_w"))?;
    let off_b = g.param(store, &cfg.key("off_b"))?;

    let u = g.conv1x1(f_src, wu, None)?;
    let down = g.depthwise_conv(u, dw, Some(dw_b), cfg.offset_kernel, cfg.stride)?;
    let normed = g.layer_norm(down, ln_g, ln_b, cfg.ln_eps)?;
    let act = g.act(normed, Activation::Gelu);
    let raw = g.conv1x1(act, off_w, Some(off_b))?;
    let bounded = g.act(raw, Activation::Tanh);
    let scaled = g.scale(bounded, cfg.offset_scale);
    let (_, hg, wg) = match g.shape(scaled) {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("offset_net", s, "rank 3")),
    };
    g.reshape(scaled, &[2, hg * wg])
}

/// Offsets predicted from `f_src`.
pub fn offset_net(f_src: &FeatureMap, cfg: &CDAConfig, store: &ParamStore) -> Result<Matrix> {
    let mut g = Graph::new();
    let x = g.input(f_src.clone());
    let dp = offset_net_graph(&mut g, x, cfg, store)?;
    g.matrix(dp)
}

/// Intermediate nodes of one cross-deformable update.
#[derive(Debug, Clone, Copy)]
pub struct CdaNodes {
    pub output: NodeId,
    pub offsets: NodeId,
    pub coords: NodeId,
    /// `[H·W, H_G·W_G]` attention weights.
    pub attention: NodeId,
}

/// `F_res + ConvFFN(F_query + A·ṽ)` with keys/values sampled from `f_kv`.
pub fn cda_forward_graph(
    g: &mut Graph,
    f_res: NodeId,
    f_query: NodeId,
    f_kv: NodeId,
    cfg: &CDAConfig,
    store: &ParamStore,
) -> Result<CdaNodes> {
    let shape = g.shape(f_query).to_vec();
    if g.shape(f_res) != shape.as_slice() || g.shape(f_kv) != shape.as_slice() {
        return Err(Error::shape("cda_forward", g.shape(f_res), g.shape(f_kv)));
    }
    let [d, h, w] = shape[..] else {
        return Err(Error::shape("cda_forward", &shape, "rank 3"));
    };
    if d != cfg.channels {
        return Err(Error::shape("cda_forward", &shape, cfg.channels));
    }
    let grid = reference_grid(h, w, cfg.stride)?;

    let offsets = offset_net_graph(g, f_kv, cfg, store)?;
    let p = g.input(grid.points.clone());
    let coords = g.add(p, offsets)?;
    let sampled = g.bilinear_sample(f_kv, coords)?;

    let wk = g.param(store, &cfg.key("wk"))?;
    let wv = g.param(store, &cfg.key("wv"))?;
    let wq = g.param(store, &cfg.key("wq"))?;
    let keys = g.matmul(wk, sampled)?;
    let values = g.matmul(wv, sampled)?;

    let q_map = g.conv1x1(f_query, wq, None)?;
    let q_flat = g.reshape(q_map, &[d, h * w])?;
    let q = g.transpose(q_flat)?;
    let logits = g.matmul(q, keys)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attention = g.softmax_rows(logits)?;
    let values_t = g.transpose(values)?;
    let attended = g.matmul(attention, values_t)?;
    let attended = g.transpose(attended)?;
    let attended = g.reshape(attended, &[d, h, w])?;

    let pre_ffn = g.add(f_query, attended)?;
    let w1 = g.param(store, &cfg.key("ffn1_w"))?;
    let b1 = g.param(store, &cfg.key("ffn1_b"))?;
    let w2 = g.param(store, &cfg.key("ffn2_w"))?;
    let b2 = g.param(store, &cfg.key("ffn2_b"))?;
    let hidden = g.conv1x1(pre_ffn, w1, Some(b1))?;
    let hidden = g.relu(hidden);
    let refined = g.conv1x1(hidden, w2, Some(b2))?;
    let output = g.add(f_res, refined)?;
    Ok(CdaNodes {
        output,
        offsets,
        coords,
        attention,
    })
}

/// One cross-deformable update; see [`cda_forward_graph`].
pub fn cda_forward(
    f_res: &FeatureMap,
    f_query: &FeatureMap,
    f_kv: &FeatureMap,
    cfg: &CDAConfig,
    store: &ParamStore,
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let r = g.input(f_res.clone());
    let q = g.input(f_query.clone());
    let kv = g.input(f_kv.clone());
    let nodes = cda_forward_graph(&mut g, r, q, kv, cfg, store)?;
    g.map(nodes.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, d: usize, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(d, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn grid_corners_under_align_corners() {
        let g = reference_grid(2, 2, 1).unwrap();
        let mut pts: Vec<(f64, f64)> = (0..4).map(|n| (g.points.at(1, n), g.points.at(0, n))).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(pts, vec![(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]);
    }

    #[test]
    fn grid_single_centre_point() {
        let g = reference_grid(4, 4, 4).unwrap();
        assert_eq!(g.points.data(), &[0.0, 0.0]);
    }

    #[test]
    fn grid_cell_centres_in_pixels() {
        let g = reference_grid(4, 4, 2).unwrap();
        let px: Vec<(f64, f64)> = (0..4).map(|n| g.pixel(n, 4, 4)).collect();
        let expect = [(0.5, 0.5), (0.5, 2.5), (2.5, 0.5), (2.5, 2.5)];
        for (a, b) in px.iter().zip(expect) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12, "{a:?} vs {b:?}");
        }
        assert_eq!(reference_grid(4, 4, 2).unwrap(), g);
        assert!(reference_grid(5, 4, 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CDAConfig::new("c", 4, 2, 0.5, 3).is_ok());
        assert!(CDAConfig::new("c", 4, 2, 0.5, 1).is_err());
        assert!(CDAConfig::new("c", 4, 2, 0.5, 4).is_err());
        assert!(CDAConfig::new("c", 4, 2, 0.0, 5).is_err());
    }

    #[test]
    fn zero_offset_weights_give_zero_offsets() {
        let cfg = CDAConfig::new("c", 3, 2, 0.5, 3).unwrap();
        let mut store = ParamStore::new(1);
        cfg.init_params(&mut store).unwrap();
        let dp = offset_net(&random_map(2, 3, 4, 6), &cfg, &store).unwrap();
        assert_eq!(dp.shape(), (2, 6));
        assert!(dp.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_ffn_is_pure_residual() {
        let cfg = CDAConfig::new("c", 3, 2, 0.5, 3).unwrap();
        let mut store = ParamStore::new(3);
        cfg.init_params(&mut store).unwrap();
        store.fill_prefix("c.ffn2", 0.0);
        let (r, q, kv) = (random_map(4, 3, 4, 4), random_map(5, 3, 4, 4), random_map(6, 3, 4, 4));
        assert_eq!(cda_forward(&r, &q, &kv, &cfg, &store).unwrap(), r);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let cfg = CDAConfig::new("c", 3, 2, 0.5, 3).unwrap();
        let mut store = ParamStore::new(3);
        cfg.init_params(&mut store).unwrap();
        let a = random_map(1, 3, 4, 4);
        let b = random_map(1, 3, 4, 6);
        assert!(cda_forward(&a, &a, &b, &cfg, &store).is_err());
    }
}
