//! Minimal reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every node is pushed after its
//! parents, so reverse index order is a valid topological order and backward
//! visits each node exactly once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, DepthwiseGeom};
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Matrix, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1x1 {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Depthwise {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        geom: DepthwiseGeom,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    SoftmaxRows {
        x: NodeId,
    },
    Bilinear {
        map: NodeId,
        coords: Option<NodeId>,
        px: Vec<f64>,
        py: Vec<f64>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        s: f64,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Sum {
        a: NodeId,
    },
    MeanCols {
        a: NodeId,
    },
    NaScores {
        q: NodeId,
        k: NodeId,
        window: usize,
        scale: f64,
    },
    NaApply {
        attn: NodeId,
        v: NodeId,
        window: usize,
    },
    RowNormalize {
        a: NodeId,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
    Abs {
        a: NodeId,
    },
    Gather {
        a: NodeId,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, NodeId)>,
}

impl Gradients {
    /// Gradient of `id`, or `None` if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, zero-filled when unused.
    pub fn get_or_zero(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[d, h, w] => Ok((d, h, w)),
        s => Err(Error::shape(op, s, "rank-3 map")),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(op, s, "rank-2 matrix")),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn map(&self, id: NodeId) -> Result<FeatureMap> {
        self.value(id).to_map()
    }

    pub fn matrix(&self, id: NodeId) -> Result<Matrix> {
        self.value(id).to_matrix()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    /// Constant input; gradients flowing here are computed but unused.
    pub fn input(&mut self, value: impl Into<Tensor>) -> NodeId {
        self.push(value.into(), Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated calls with the same key
    /// return the same node, so its gradient accumulates every use.
    pub fn param(&mut self, store: &ParamStore, key: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_index.get(key) {
            return Ok(id);
        }
        let id = self.push(store.tensor(key)?, Op::Leaf);
        self.params.push((key.to_string(), id));
        self.param_index.insert(key.to_string(), id);
        Ok(id)
    }

    // -----------------------------------------------------------------------
    // operations

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (d_in, h, wd) = dims3("conv1x1", self.value(x))?;
        let (d_out, wc) = dims2("conv1x1", self.value(w))?;
        let bias_ok = b.is_none_or(|b| self.value(b).len() == d_out);
        if wc != d_in || !bias_ok {
            return Err(Error::shape("conv1x1", self.shape(x), self.shape(w)));
        }
        let out = ops::conv1x1_kernel(
            self.value(x).data(),
            d_in,
            h * wd,
            self.value(w).data(),
            d_out,
            b.map(|b| self.value(b).data()),
        );
        Ok(self.push(Tensor::new(vec![d_out, h, wd], out)?, Op::Conv1x1 { x, w, b }))
    }

    pub fn depthwise_conv(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>, side: usize, stride: usize) -> Result<NodeId> {
        let (d, h, w) = dims3("depthwise_conv", self.value(x))?;
        let geom = DepthwiseGeom::new(d, h, w, side, stride)?;
        if self.value(k).len() != d * side * side || b.is_some_and(|b| self.value(b).len() != d) {
            return Err(Error::shape("depthwise_conv", self.shape(x), self.shape(k)));
        }
        let out = ops::depthwise_kernel(&geom, self.value(x).data(), self.value(k).data(), b.map(|b| self.value(b).data()));
        let t = Tensor::new(vec![d, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(t, Op::Depthwise { x, k, b, geom }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (d, h, w) = dims3("layer_norm", self.value(x))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (out, xhat, inv_std) = ops::layer_norm_kernel(
            self.value(x).data(),
            d,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let t = Tensor::new(vec![d, h, w], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn act(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| kind.apply(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.act(x, Activation::Relu)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = dims2("softmax_rows", self.value(x))?;
        let out = ops::softmax_rows_kernel(self.value(x).data(), r, c);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows { x }))
    }

    /// Bilinear sampling at differentiable normalized coordinates `[2, N]`
    /// (row 0 = x, row 1 = y). Output `[D, N]`.
    pub fn bilinear_sample(&mut self, map: NodeId, coords: NodeId) -> Result<NodeId> {
        let (d, h, w) = dims3("bilinear_sample", self.value(map))?;
        let (two, n) = dims2("bilinear_sample", self.value(coords))?;
        if two != 2 {
            return Err(Error::shape("bilinear_sample", self.shape(map), self.shape(coords)));
        }
        let c = self.value(coords).data();
        let px: Vec<f64> = c[..n].iter().map(|&v| ops::denormalize(v, w)).collect();
        let py: Vec<f64> = c[n..].iter().map(|&v| ops::denormalize(v, h)).collect();
        let out = ops::bilinear_px_kernel(self.value(map).data(), d, h, w, &px, &py);
        Ok(self.push(
            Tensor::new(vec![d, n], out)?,
            Op::Bilinear {
                map,
                coords: Some(coords),
                px,
                py,
            },
        ))
    }

    /// Bilinear sampling at fixed pixel-space points. Output `[D, N]`.
    pub fn sample_pixels(&mut self, map: NodeId, px: Vec<f64>, py: Vec<f64>) -> Result<NodeId> {
        let (d, h, w) = dims3("sample_pixels", self.value(map))?;
        if px.len() != py.len() {
            return Err(Error::shape("sample_pixels", px.len(), py.len()));
        }
        let out = ops::bilinear_px_kernel(self.value(map).data(), d, h, w, &px, &py);
        let n = px.len();
        Ok(self.push(
            Tensor::new(vec![d, n], out)?,
            Op::Bilinear {
                map,
                coords: None,
                px,
                py,
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = ops::matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let out = ops::transpose_kernel(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same(op, self.value(a), self.value(b))?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect()).expect("same shape");
        self.push(t, Op::Scale { a, s })
    }

    /// Row-wise dense layer: `x[N, Din] · wᵀ + b` with `w: [Dout, Din]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, d_in) = dims2("linear", self.value(x))?;
        let (d_out, wc) = dims2("linear", self.value(w))?;
        if wc != d_in || b.is_some_and(|b| self.value(b).len() != d_out) {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        let wt = ops::transpose_kernel(self.value(w).data(), d_out, d_in);
        let mut out = ops::matmul_kernel(self.value(x).data(), &wt, n, d_in, d_out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        Ok(self.push(Tensor::new(vec![n, d_out], out)?, Op::Linear { x, w, b }))
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::pre("concat", "no inputs"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let shape = v.shape();
            if shape.is_empty() || shape[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), shape));
            }
            lead += shape[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over columns of `[R, C]`, giving a length-`R` vector.
    pub fn mean_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = dims2("mean_cols", self.value(a))?;
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        Ok(self.push(Tensor::new(vec![r], data)?, Op::MeanCols { a }))
    }

    /// Neighborhood attention logits: for each pixel `p` and each of the
    /// `window²` cells of its clamped window, `q_p · k_u · scale`.
    /// Output `[H·W, window²]`.
    pub fn na_scores(&mut self, q: NodeId, k: NodeId, window: usize, scale: f64) -> Result<NodeId> {
        let (d, h, w) = dims3("na_scores", self.value(q))?;
        check_same("na_scores", self.value(q), self.value(k))?;
        let nb = crate::attention::neighborhood::NeighborTable::new(h, w, window)?;
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let hw = h * w;
        let kk = window * window;
        let mut out = vec![0.0; hw * kk];
        for p in 0..hw {
            for (s, &u) in nb.neighbors(p).iter().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += qv[c * hw + p] * kv[c * hw + u];
                }
                out[p * kk + s] = dot * scale;
            }
        }
        Ok(self.push(
            Tensor::new(vec![hw, kk], out)?,
            Op::NaScores { q, k, window, scale },
        ))
    }

    /// Neighborhood aggregation: `out[:, p] = Σ_s attn[p, s] · v[:, nb(p, s)]`.
    pub fn na_apply(&mut self, attn: NodeId, v: NodeId, window: usize) -> Result<NodeId> {
        let (d, h, w) = dims3("na_apply", self.value(v))?;
        let hw = h * w;
        let kk = window * window;
        if self.shape(attn) != [hw, kk] {
            return Err(Error::shape("na_apply", self.shape(attn), self.shape(v)));
        }
        let nb = crate::attention::neighborhood::NeighborTable::new(h, w, window)?;
        let (av, vv) = (self.value(attn).data(), self.value(v).data());
        let mut out = vec![0.0; d * hw];
        for p in 0..hw {
            for (s, &u) in nb.neighbors(p).iter().enumerate() {
                let a = av[p * kk + s];
                for c in 0..d {
                    out[c * hw + p] += a * vv[c * hw + u];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![d, h, w], out)?, Op::NaApply { attn, v, window }))
    }

    /// Divides each row of a matrix by its L2 norm. Zero rows are rejected.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = dims2("row_normalize", self.value(a))?;
        let v = self.value(a).data();
        let norms: Vec<f64> = v.chunks(c).map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
            return Err(Error::Numeric(format!("row {i} has zero or non-finite norm")));
        }
        let data = v.chunks(c).zip(&norms).flat_map(|(row, n)| row.iter().map(move |x| x / n)).collect();
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::RowNormalize { a, norms }))
    }

    /// Mean softmax cross-entropy of `logits[N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = dims2("cross_entropy", self.value(logits))?;
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", self.shape(logits), labels));
        }
        let v = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &v[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = if n == 0 { 0.0 } else { loss / n as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy with logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let v = self.value(logits).data();
        if v.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), targets.len()));
        }
        let loss = v
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / v.len().max(1) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.abs()).collect()).expect("same shape");
        self.push(t, Op::Abs { a })
    }

    /// Picks flat entries of `a` into a vector.
    pub fn gather(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(a).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape("gather", self.shape(a), bad));
        }
        let data = idx.iter().map(|&i| v[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::Gather { a, idx: idx.to_vec() }))
    }

    // -----------------------------------------------------------------------
    // backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    /// Runs [`Graph::backward`] and writes every parameter's gradient into
    /// `store` (zero for parameters the loss does not reach).
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.zero_grads();
        for (key, id) in &grads.params {
            if let Some(g) = grads.get(*id) {
                store.set_grad(key, g.to_vec())?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1x1 { x, w, b } => {
                let (d_in, h, wd) = dims3("conv1x1", self.value(*x))?;
                let d_out = self.shape(*w)[0];
                let (dx, dw, db) = ops::conv1x1_backward(g, val(*x), d_in, h * wd, val(*w), d_out);
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[w.0], dw);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Depthwise { x, k, b, geom } => {
                let (dx, dk, db) = ops::depthwise_backward(geom, g, val(*x), val(*k));
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[k.0], dk);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (d, h, w) = dims3("layer_norm", self.value(*x))?;
                let (dx, dg, db) = ops::layer_norm_backward(g, xhat, inv_std, d, h * w, val(*gamma));
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[gamma.0], dg);
                accumulate(&mut grads[beta.0], db);
            }
            Op::Act { x, kind } => {
                let dx = val(*x)
                    .iter()
                    .zip(node.value.data())
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = dims2("softmax_rows", &node.value)?;
                accumulate(&mut grads[x.0], ops::softmax_rows_backward(g, node.value.data(), r, c));
            }
            Op::Bilinear { map, coords, px, py } => {
                let (d, h, w) = dims3("bilinear_sample", self.value(*map))?;
                let (dx, dpx, dpy) = ops::bilinear_px_backward(g, val(*map), d, h, w, px, py);
                accumulate(&mut grads[map.0], dx);
                if let Some(c) = coords {
                    // d(pixel)/d(normalized) = (size - 1) / 2
                    let sx = 0.5 * (w as f64 - 1.0);
                    let sy = 0.5 * (h as f64 - 1.0);
                    let mut dc: Vec<f64> = dpx.iter().map(|v| v * sx).collect();
                    dc.extend(dpy.iter().map(|v| v * sy));
                    accumulate(&mut grads[c.0], dc);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = dims2("matmul", self.value(*a))?;
                let n = self.shape(*b)[1];
                let bt = ops::transpose_kernel(val(*b), k, n);
                let da = ops::matmul_kernel(g, &bt, m, n, k);
                let at = ops::transpose_kernel(val(*a), m, k);
                let db = ops::matmul_kernel(&at, g, k, m, n);
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Transpose { a } => {
                let (r, c) = dims2("transpose", &node.value)?;
                accumulate(&mut grads[a.0], ops::transpose_kernel(g, r, c));
            }
            Op::Reshape { a } => accumulate(&mut grads[a.0], g.to_vec()),
            Op::Add { a, b } => {
                accumulate(&mut grads[a.0], g.to_vec());
                accumulate(&mut grads[b.0], g.to_vec());
            }
            Op::Sub { a, b } => {
                accumulate(&mut grads[a.0], g.to_vec());
                accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let da = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Scale { a, s } => accumulate(&mut grads[a.0], g.iter().map(|v| v * s).collect()),
            Op::Linear { x, w, b } => {
                let (n, d_in) = dims2("linear", self.value(*x))?;
                let d_out = self.shape(*w)[0];
                // dx = g · w ; dw = gᵀ · x
                let dx = ops::matmul_kernel(g, val(*w), n, d_out, d_in);
                let gt = ops::transpose_kernel(g, n, d_out);
                let dw = ops::matmul_kernel(&gt, val(*x), d_out, n, d_in);
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[w.0], dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; d_out];
                    for row in g.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    accumulate(&mut grads[p.0], g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::MeanCols { a } => {
                let (_, c) = dims2("mean_cols", self.value(*a))?;
                let da = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / c as f64, c)).collect();
                accumulate(&mut grads[a.0], da);
            }
            Op::NaScores { q, k, window, scale } => {
                let (d, h, w) = dims3("na_scores", self.value(*q))?;
                let nb = crate::attention::neighborhood::NeighborTable::new(h, w, *window)?;
                let hw = h * w;
                let kk = window * window;
                let (qv, kv) = (val(*q), val(*k));
                let mut dq = vec![0.0; d * hw];
                let mut dk = vec![0.0; d * hw];
                for p in 0..hw {
                    for (s, &u) in nb.neighbors(p).iter().enumerate() {
                        let gs = g[p * kk + s] * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            dq[c * hw + p] += gs * kv[c * hw + u];
                            dk[c * hw + u] += gs * qv[c * hw + p];
                        }
                    }
                }
                accumulate(&mut grads[q.0], dq);
                accumulate(&mut grads[k.0], dk);
            }
            Op::NaApply { attn, v, window } => {
                let (d, h, w) = dims3("na_apply", self.value(*v))?;
                let nb = crate::attention::neighborhood::NeighborTable::new(h, w, *window)?;
                let hw = h * w;
                let kk = window * window;
                let (av, vv) = (val(*attn), val(*v));
                let mut da = vec![0.0; hw * kk];
                let mut dv = vec![0.0; d * hw];
                for p in 0..hw {
                    for (s, &u) in nb.neighbors(p).iter().enumerate() {
                        let a = av[p * kk + s];
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += g[c * hw + p] * vv[c * hw + u];
                            dv[c * hw + u] += a * g[c * hw + p];
                        }
                        da[p * kk + s] = acc;
                    }
                }
                accumulate(&mut grads[attn.0], da);
                accumulate(&mut grads[v.0], dv);
            }
            Op::RowNormalize { a, norms } => {
                let (_, c) = dims2("row_normalize", &node.value)?;
                let y = node.value.data();
                let mut da = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let span = r * c..(r + 1) * c;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        da[i] = (g[i] - y[i] * dot) / n;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, c) = dims2("cross_entropy", self.value(*logits))?;
                let scale = if n == 0 { 0.0 } else { g[0] / n as f64 };
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * c + l] -= scale;
                }
                accumulate(&mut grads[logits.0], dl);
            }
            Op::BceLogits { logits, targets } => {
                let n = targets.len().max(1) as f64;
                let dl = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| g[0] * (ops::sigmoid(x) - t) / n)
                    .collect();
                accumulate(&mut grads[logits.0], dl);
            }
            Op::Abs { a } => {
                let da = val(*a).iter().zip(g).map(|(&x, &gv)| gv * x.signum() * (x != 0.0) as u8 as f64).collect();
                accumulate(&mut grads[a.0], da);
            }
            Op::Gather { a, idx } => {
                let mut da = vec![0.0; self.value(*a).len()];
                for (gv, &i) in g.iter().zip(idx) {
                    da[i] += gv;
                }
                accumulate(&mut grads[a.0], da);
            }
        }
        Ok(())
    }
}
