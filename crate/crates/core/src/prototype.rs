//! Support prototypes (RoIAlign + average pooling), fixed task encodings,
//! correlational aggregation of prototypes into query features, and the
//! cosine-similarity classification loss.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fmp;
use crate::graph::{Graph, NodeId};
use crate::ops::{self, Activation};
use crate::params::{Init, ParamStore};
use crate::tensor::{FeatureMap, Matrix};

/// Default RoIAlign output side.
pub const ROI_OUT: usize = 7;
/// Default bilinear samples per bin axis.
pub const ROI_SAMPLES: usize = 2;
/// Default cosine-logit scale.
pub const COSINE_SCALE: f64 = 20.0;

/// Annotated support box in feature-map pixel units; pixel `(i, j)` covers
/// `[j, j+1] × [i, i+1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class: u32,
}

impl SupportBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class: u32) -> Self {
        Self { x1, y1, x2, y2, class }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let ok = self.x1 < self.x2
            && self.y1 < self.y2
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= w as f64
            && self.y2 <= h as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::pre("roi_align", format!("degenerate or out-of-map box {self:?} on {h}x{w}")))
        }
    }
}

/// Pixel-index sample coordinates `(px, py)` for RoIAlign, ordered by bin
/// (row-major) then by sample within the bin (row-major).
pub fn roi_sample_points(b: &SupportBox, out: usize, samples: usize) -> (Vec<f64>, Vec<f64>) {
    let bw = (b.x2 - b.x1) / out as f64;
    let bh = (b.y2 - b.y1) / out as f64;
    let mut px = Vec::with_capacity(out * out * samples * samples);
    let mut py = Vec::with_capacity(px.capacity());
    for bi in 0..out {
        for bj in 0..out {
            for si in 0..samples {
                for sj in 0..samples {
                    let y = b.y1 + (bi as f64 + (si as f64 + 0.5) / samples as f64) * bh;
                    let x = b.x1 + (bj as f64 + (sj as f64 + 0.5) / samples as f64) * bw;
                    // continuous coords → pixel-index coords (centres at integers)
                    px.push(x - 0.5);
                    py.push(y - 0.5);
                }
            }
        }
    }
    (px, py)
}

/// RoIAlign: `out × out` bins, each the mean of `samples²` bilinear samples.
pub fn roi_align(f: &FeatureMap, b: &SupportBox, out: usize, samples: usize) -> Result<FeatureMap> {
    let (d, h, w) = f.shape();
    b.validate(h, w)?;
    if out == 0 || samples == 0 {
        return Err(Error::pre("roi_align", "output side and sample count must be >= 1"));
    }
    let (px, py) = roi_sample_points(b, out, samples);
    let s = ops::bilinear_sample_px(f, &px, &py)?;
    let per_bin = samples * samples;
    Ok(FeatureMap::from_fn(d, out, out, |c, i, j| {
        let bin = i * out + j;
        (0..per_bin).map(|k| s.at(c, bin * per_bin + k)).sum::<f64>() / per_bin as f64
    }))
}

/// Pooled RoI feature `[D]` of `b` on the tape.
pub fn roi_vector_graph(g: &mut Graph, map: NodeId, b: &SupportBox, out: usize, samples: usize) -> Result<NodeId> {
    let &[_, h, w] = g.shape(map) else {
        return Err(Error::shape("roi_align", g.shape(map), "rank 3"));
    };
    b.validate(h, w)?;
    let (px, py) = roi_sample_points(b, out, samples);
    let s = g.sample_pixels(map, px, py)?;
    g.mean_cols(s)
}

/// Deterministic sinusoidal encodings of slot indices, `[C, D]`.
pub fn task_encodings(c: usize, d: usize) -> Result<Matrix> {
    if !d.is_multiple_of(2) {
        return Err(Error::pre("task_encodings", format!("D={d} must be even")));
    }
    Ok(Matrix::from_fn(c, d, |slot, k| {
        let m = (k / 2) as f64;
        let angle = slot as f64 / 10000f64.powf(2.0 * m / d as f64);
        if k % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Class prototypes `S`, task encodings `T` and the class bound to each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Matrix,
    pub encodings: Matrix,
    pub class_ids: Vec<u32>,
}

impl PrototypeSet {
    pub fn new(prototypes: Matrix, class_ids: Vec<u32>) -> Result<Self> {
        if prototypes.rows() != class_ids.len() {
            return Err(Error::shape("PrototypeSet", prototypes.shape(), class_ids.len()));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::pre("PrototypeSet", format!("duplicate class ids {class_ids:?}")));
        }
        if !prototypes.is_finite() {
            return Err(Error::Numeric("non-finite prototype".into()));
        }
        let encodings = task_encodings(prototypes.rows(), prototypes.cols())?;
        Ok(Self {
            prototypes,
            encodings,
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Writes `S` as FMP1 (`1 × C × D`) and class ids to `<path>.classes`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (c, d) = self.prototypes.shape();
        let map = FeatureMap::new(1, c, d, self.prototypes.data().to_vec())?;
        fmp::write(path, &map)?;
        let ids: Vec<String> = self.class_ids.iter().map(u32::to_string).collect();
        std::fs::write(sidecar(path), ids.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map = fmp::read(path)?;
        let (one, c, d) = map.shape();
        if one != 1 {
            return Err(Error::Format(format!("prototype file has D_chan={one}, expected 1")));
        }
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side)?;
        let ids = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.parse::<u32>().map_err(|e| Error::Parse {
                    path: side.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PrototypeSet::new(Matrix::new(c, d, map.into_data())?, ids)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".classes");
    PathBuf::from(s)
}

/// Support feature maps with their annotated boxes.
pub type SupportImage = (FeatureMap, Vec<SupportBox>);

/// Stacks per-class mean RoI vectors into `[C, D]` on the tape. `entries`
/// pairs fused support-map nodes with their boxes.
pub fn prototype_rows_graph(
    g: &mut Graph,
    entries: &[(NodeId, SupportBox)],
    classes: &[u32],
    out: usize,
    samples: usize,
) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(classes.len());
    for &class in classes {
        let mut vecs = Vec::new();
        for (map, b) in entries.iter().filter(|(_, b)| b.class == class) {
            vecs.push(roi_vector_graph(g, *map, b, out, samples)?);
        }
        if vecs.is_empty() {
            return Err(Error::MissingSupport { class });
        }
        let n = vecs.len();
        let mut acc = vecs[0];
        for v in &vecs[1..] {
            acc = g.add(acc, *v)?;
        }
        let mean = g.scale(acc, 1.0 / n as f64);
        rows.push(mean);
    }
    let flat = g.concat(&rows)?;
    let d = g.shape(flat)[0] / classes.len().max(1);
    g.reshape(flat, &[classes.len(), d])
}

/// Per-class prototypes from annotated support maps; row order follows `classes`.
pub fn extract_prototypes(supports: &[SupportImage], classes: &[u32], out: usize, samples: usize) -> Result<PrototypeSet> {
    let mut g = Graph::new();
    let mut entries = Vec::new();
    for (map, boxes) in supports {
        let id = g.input(map.clone());
        entries.extend(boxes.iter().map(|b| (id, *b)));
    }
    let s = prototype_rows_graph(&mut g, &entries, classes, out, samples)?;
    PrototypeSet::new(g.matrix(s)?, classes.to_vec())
}

/// Elementwise mean of `S` across per-seed prototype sets.
pub fn average_prototypes(sets: &[PrototypeSet]) -> Result<PrototypeSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::pre("average_prototypes", "no prototype sets"))?;
    let mut acc = vec![0.0; first.prototypes.data().len()];
    for s in sets {
        if s.class_ids != first.class_ids || s.prototypes.shape() != first.prototypes.shape() {
            return Err(Error::pre(
                "average_prototypes",
                format!("class ids {:?} vs {:?}", s.class_ids, first.class_ids),
            ));
        }
        acc.iter_mut().zip(s.prototypes.data()).for_each(|(a, v)| *a += v);
    }
    let n = sets.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let (c, d) = first.prototypes.shape();
    PrototypeSet::new(Matrix::new(c, d, acc)?, first.class_ids.clone())
}

/// How attention-matched prototypes enter the query branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// `Q_F = F_q ⊙ (A·σ(S))`: prototypes gate the query features.
    #[default]
    FilterQuery,
    /// `Q_F = A·σ(S)`: attention-weighted gated prototypes alone.
    AttentionOnly,
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" => Ok(GateMode::FilterQuery),
            "attention" => Ok(GateMode::AttentionOnly),
            other => Err(Error::Config(format!("unknown gate mode {other:?} (filter or attention)"))),
        }
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::FilterQuery => "filter",
            GateMode::AttentionOnly => "attention",
        })
    }
}

/// Parameter keys and sizes of the correlational aggregation module.
#[derive(Debug, Clone, PartialEq)]
pub struct CamConfig {
    pub channels: usize,
    pub gate: GateMode,
}

impl CamConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gate: GateMode::FilterQuery,
        }
    }

    pub fn init_params(&self, store: &mut ParamStore) -> Result<()> {
        let d = self.channels;
        store.init("cam.w", &[d, d], Init::XavierUniform { fan_in: d, fan_out: d })?;
        store.init(
            "cam.ffn1_w",
            &[2 * d, d],
            Init::XavierUniform {
                fan_in: d,
                fan_out: 2 * d,
            },
        )?;
        store.init("cam.ffn1_b", &[2 * d], Init::Zeros)?;
        store.init(
            "cam.ffn2_w",
            &[d, 2 * d],
            Init::XavierUniform {
                fan_in: 2 * d,
                fan_out: d,
            },
        )?;
        store.init("cam.ffn2_b", &[d], Init::Zeros)
    }
}

/// Output nodes of [`cam_forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct CamNodes {
    /// Aggregated features `[D, H, W]`.
    pub output: NodeId,
    /// Query-to-slot attention `[H·W, C]`.
    pub attention: NodeId,
}

/// Aggregates prototypes `s` (`[C, D]`) and encodings `t` into the query map.
pub fn cam_forward_graph(
    g: &mut Graph,
    f_q: NodeId,
    s: NodeId,
    t: NodeId,
    cfg: &CamConfig,
    store: &ParamStore,
) -> Result<CamNodes> {
    let &[d, h, w] = g.shape(f_q) else {
        return Err(Error::shape("cam_forward", g.shape(f_q), "rank 3"));
    };
    let &[c, ds] = g.shape(s) else {
        return Err(Error::shape("cam_forward", g.shape(s), "rank 2"));
    };
    if ds != d || g.shape(t) != [c, d] || d != cfg.channels {
        return Err(Error::shape("cam_forward", g.shape(f_q), g.shape(s)));
    }
    let proj = g.param(store, "cam.w")?;
    let flat = g.reshape(f_q, &[d, h * w])?;
    let x = g.transpose(flat)?;
    let xq = g.matmul(x, proj)?;
    let sk = g.matmul(s, proj)?;
    let sk_t = g.transpose(sk)?;
    let logits = g.matmul(xq, sk_t)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attention = g.softmax_rows(logits)?;

    let gated = g.act(s, Activation::Sigmoid);
    let matched = g.matmul(attention, gated)?;
    let q_f = match cfg.gate {
        GateMode::FilterQuery => g.mul(x, matched)?,
        GateMode::AttentionOnly => matched,
    };
    let q_e = g.matmul(attention, t)?;
    let combined = g.add(q_f, q_e)?;

    let w1 = g.param(store, "cam.ffn1_w")?;
    let b1 = g.param(store, "cam.ffn1_b")?;
    let w2 = g.param(store, "cam.ffn2_w")?;
    let b2 = g.param(store, "cam.ffn2_b")?;
    let hidden = g.linear(combined, w1, Some(b1))?;
    let hidden = g.relu(hidden);
    let out = g.linear(hidden, w2, Some(b2))?;
    let out_t = g.transpose(out)?;
    let output = g.reshape(out_t, &[d, h, w])?;
    Ok(CamNodes { output, attention })
}

/// Value-level [`cam_forward_graph`].
pub fn cam_forward(f_q: &FeatureMap, protos: &PrototypeSet, cfg: &CamConfig, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let q = g.input(f_q.clone());
    let s = g.input(protos.prototypes.clone());
    let t = g.input(protos.encodings.clone());
    let nodes = cam_forward_graph(&mut g, q, s, t, cfg, store)?;
    g.map(nodes.output)
}

/// Mean cross-entropy of `α·cos(S_i, W_j)` logits against `labels`
/// (indices into the rows of `class_weights`).
pub fn cosine_ce_loss_graph(g: &mut Graph, s: NodeId, class_weights: NodeId, labels: &[usize], alpha: f64) -> Result<NodeId> {
    let sn = g.row_normalize(s)?;
    let wn = g.row_normalize(class_weights)?;
    let wt = g.transpose(wn)?;
    let cos = g.matmul(sn, wt)?;
    let logits = g.scale(cos, alpha);
    g.cross_entropy(logits, labels)
}

pub fn cosine_ce_loss(s: &Matrix, class_weights: &Matrix, labels: &[usize], alpha: f64) -> Result<f64> {
    let mut g = Graph::new();
    let si = g.input(s.clone());
    let wi = g.input(class_weights.clone());
    let l = cosine_ce_loss_graph(&mut g, si, wi, labels, alpha)?;
    Ok(g.scalar(l))
}
