//! Single-head neighborhood attention with border-clamped `k×k` windows.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamStore};
use crate::tensor::FeatureMap;

/// Window geometry and parameter keys of one neighborhood-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct NAConfig {
    pub window: usize,
    pub channels: usize,
    pub prefix: String,
}

impl NAConfig {
    pub fn new(prefix: &str, channels: usize, window: usize) -> Result<Self> {
        if window.is_multiple_of(2) {
            return Err(Error::pre("NAConfig", format!("window {window} must be odd")));
        }
        Ok(Self {
            window,
            channels,
            prefix: prefix.to_string(),
        })
    }

    pub fn key(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init_params(&self, store: &mut ParamStore) -> Result<()> {
        let d = self.channels;
        for name in ["wq", "wk", "wv"] {
            store.init(&self.key(name), &[d, d], Init::XavierUniform { fan_in: d, fan_out: d })?;
        }
        Ok(())
    }
}

/// The `k×k` window around `(i, j)`, shifted to stay inside an `H×W` map.
/// Always `k²` cells in row-major order.
pub fn neighborhood(i: usize, j: usize, h: usize, w: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k.is_multiple_of(2) {
        return Err(Error::pre("neighborhood", format!("window {k} must be odd")));
    }
    if k > h.min(w) {
        return Err(Error::pre("neighborhood", format!("window {k} exceeds map {h}x{w}")));
    }
    if i >= h || j >= w {
        return Err(Error::pre("neighborhood", format!("({i},{j}) outside {h}x{w}")));
    }
    let start = |c: usize, n: usize| c.saturating_sub(k / 2).min(n - k);
    let (r0, c0) = (start(i, h), start(j, w));
    Ok((r0..r0 + k).flat_map(|r| (c0..c0 + k).map(move |c| (r, c))).collect())
}

/// Flat neighbor indices for every pixel of an `H×W` map.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    kk: usize,
    table: Vec<usize>,
}

impl NeighborTable {
    pub fn new(h: usize, w: usize, k: usize) -> Result<Self> {
        let mut table = Vec::with_capacity(h * w * k * k);
        for i in 0..h {
            for j in 0..w {
                table.extend(neighborhood(i, j, h, w, k)?.into_iter().map(|(r, c)| r * w + c));
            }
        }
        Ok(Self { kk: k * k, table })
    }

    #[inline]
    pub fn neighbors(&self, p: usize) -> &[usize] {
        &self.table[p * self.kk..(p + 1) * self.kk]
    }
}

/// Neighborhood attention on the tape. Returns the output map node and the
/// attention-weight node (`[H·W, k²]`).
pub fn na_forward_graph(g: &mut Graph, x: NodeId, cfg: &NAConfig, store: &ParamStore) -> Result<(NodeId, NodeId)> {
    let d = g.shape(x)[0];
    if d != cfg.channels {
        return Err(Error::shape("na_forward", g.shape(x), cfg.channels));
    }
    let wq = g.param(store, &cfg.key("wq"))?;
    let wk = g.param(store, &cfg.key("wk"))?;
    let wv = g.param(store, &cfg.key("wv"))?;
    let q = g.conv1x1(x, wq, None)?;
    let k = g.conv1x1(x, wk, None)?;
    let v = g.conv1x1(x, wv, None)?;
    let scores = g.na_scores(q, k, cfg.window, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax_rows(scores)?;
    let out = g.na_apply(attn, v, cfg.window)?;
    Ok((out, attn))
}

/// Neighborhood attention over `x`; output has the input's shape.
pub fn na_forward(x: &FeatureMap, cfg: &NAConfig, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let (out, _) = na_forward_graph(&mut g, xi, cfg, store)?;
    g.map(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Matrix;

    #[test]
    fn interior_and_corner_windows() {
        let n = neighborhood(2, 2, 5, 5, 3).unwrap();
        let expect: Vec<_> = (1..4).flat_map(|r| (1..4).map(move |c| (r, c))).collect();
        assert_eq!(n, expect);
        let n = neighborhood(0, 0, 5, 5, 3).unwrap();
        let expect: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        assert_eq!(n, expect);
        let n = neighborhood(4, 4, 5, 5, 3).unwrap();
        assert_eq!(n[0], (2, 2));
        assert_eq!(n.len(), 9);
    }

    #[test]
    fn singleton_window() {
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(neighborhood(i, j, 3, 4, 1).unwrap(), vec![(i, j)]);
            }
        }
    }

    #[test]
    fn oversized_window_rejected() {
        assert!(matches!(neighborhood(0, 0, 3, 5, 5), Err(Error::Precondition { .. })));
    }

    fn store_for(cfg: &NAConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new(seed);
        cfg.init_params(&mut s).unwrap();
        s
    }

    #[test]
    fn window_one_is_value_projection() {
        let cfg = NAConfig::new("na", 3, 1).unwrap();
        let store = store_for(&cfg, 5);
        let x = FeatureMap::from_fn(3, 4, 4, |c, i, j| ((c * 16 + i * 4 + j) as f64).sin());
        let y = na_forward(&x, &cfg, &store).unwrap();
        let v = ops::conv1x1(&x, &store.matrix("na.wv").unwrap(), &[0.0; 3]).unwrap();
        assert_eq!(y, v);
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let cfg = NAConfig::new("na", 2, 3).unwrap();
        let store = store_for(&cfg, 6);
        let x = FeatureMap::from_fn(2, 5, 5, |c, _, _| [0.3, -0.7][c]);
        let y = na_forward(&x, &cfg, &store).unwrap();
        for c in 0..2 {
            let first = y.at(c, 0, 0);
            for i in 0..5 {
                for j in 0..5 {
                    assert!((y.at(c, i, j) - first).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = NAConfig::new("na", 4, 3).unwrap();
        let store = store_for(&cfg, 7);
        let x = FeatureMap::from_fn(4, 5, 6, |c, i, j| ((c * 31 + i * 7 + j * 3) as f64 * 0.77).cos() * 2.0);
        let mut g = Graph::new();
        let xi = g.input(x);
        let (_, attn) = na_forward_graph(&mut g, xi, &cfg, &store).unwrap();
        let a: Matrix = g.matrix(attn).unwrap();
        for r in 0..a.rows() {
            assert!(a.row(r).iter().all(|&v| v >= 0.0));
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
