//! The full detector: fusion, prototype aggregation and a small per-location
//! head, with the episodic training loss and prototype-based inference.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eval::{iou, Box2, Detection};
use crate::fusion::{fuse_modalities, FusionConfig, FusionMode};
use crate::graph::{Graph, NodeId};
use crate::harness::data::MapStore;
use crate::harness::episode::{Episode, SupportSet};
use crate::ops;
use crate::params::{Init, ParamStore};
use crate::prototype::{
    average_prototypes, cam_forward_graph, cosine_ce_loss_graph, prototype_rows_graph, task_encodings, CamConfig,
    PrototypeSet, SupportBox, COSINE_SCALE, ROI_OUT, ROI_SAMPLES,
};
use crate::tensor::{FeatureMap, Matrix, Tensor};

/// IoU above which a lower-scored same-class box is suppressed.
pub const NMS_IOU: f64 = 0.5;

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub meta: f64,
    pub cls: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            meta: 1.0,
            cls: 1.0,
            bbox: 1.0,
        }
    }
}

/// Architecture and head settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub cam: CamConfig,
    /// Rows of the meta-classifier weights; class ids must be below this.
    pub num_classes: usize,
    pub alpha: f64,
    pub weights: LossWeights,
    pub score_thr: f64,
    pub t_max: usize,
    pub roi_out: usize,
    pub roi_samples: usize,
}

impl ModelConfig {
    pub fn new(fusion: FusionConfig, num_classes: usize) -> Self {
        let d = fusion.channels;
        Self {
            fusion,
            cam: CamConfig::new(d),
            num_classes,
            alpha: COSINE_SCALE,
            weights: LossWeights::default(),
            score_thr: 0.05,
            t_max: 4,
            roi_out: ROI_OUT,
            roi_samples: ROI_SAMPLES,
        }
    }

    pub fn channels(&self) -> usize {
        self.fusion.channels
    }
}

/// Head weights: objectness `D→1` and box regression `D→4`, both 1×1 convs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyHeadParams {
    pub obj_w: Matrix,
    pub obj_b: f64,
    pub box_w: Matrix,
    pub box_b: [f64; 4],
}

impl ToyHeadParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let obj_w = store.matrix("head.obj_w")?;
        let box_w = store.matrix("head.box_w")?;
        if obj_w.rows() != 1 || box_w.rows() != 4 || obj_w.cols() != box_w.cols() {
            return Err(Error::shape("toy_head", obj_w.shape(), box_w.shape()));
        }
        let bb = store.value("head.box_b")?;
        Ok(Self {
            obj_w,
            obj_b: store.value("head.obj_b")?[0],
            box_w,
            box_b: [bb[0], bb[1], bb[2], bb[3]],
        })
    }
}

/// Registers every parameter of the model.
pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore) -> Result<()> {
    let d = cfg.channels();
    cfg.fusion.init_params(store)?;
    cfg.cam.init_params(store)?;
    store.init("head.obj_w", &[1, d], Init::XavierUniform { fan_in: d, fan_out: 1 })?;
    store.init("head.obj_b", &[1], Init::Zeros)?;
    store.init("head.box_w", &[4, d], Init::XavierUniform { fan_in: d, fan_out: 4 })?;
    store.init("head.box_b", &[4], Init::Zeros)?;
    store.init(
        "meta.class_weights",
        &[cfg.num_classes, d],
        Init::XavierUniform {
            fan_in: d,
            fan_out: cfg.num_classes,
        },
    )
}

/// Fresh parameters for `cfg` drawn from `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new(seed);
    init_params(cfg, &mut store)?;
    Ok(store)
}

fn maps_of(maps: &MapStore, image_id: u32) -> Result<&(FeatureMap, FeatureMap)> {
    maps.get(&image_id)
        .ok_or_else(|| Error::pre("maps", format!("image {image_id} not loaded")))
}

fn fused_node(g: &mut Graph, maps: &MapStore, image_id: u32, cfg: &ModelConfig, store: &ParamStore) -> Result<NodeId> {
    let (rgb, ir) = maps_of(maps, image_id)?;
    let r = g.input(rgb.clone());
    let i = g.input(ir.clone());
    fuse_modalities(g, r, i, &cfg.fusion, store)
}

/// Loss terms of one episode.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub meta: NodeId,
    pub objectness: NodeId,
    pub slot: NodeId,
    pub bbox: NodeId,
}

/// Pixel cell holding the centre of a box.
fn centre_cell(b: &Box2, h: usize, w: usize) -> (usize, usize) {
    let (cx, cy) = b.center();
    ((cy.floor() as usize).min(h - 1), (cx.floor() as usize).min(w - 1))
}

/// Mean BCE over positive cells plus mean BCE over negative cells, so the
/// handful of object centres is not swamped by background. Cells with a
/// negative target are skipped.
fn balanced_bce(g: &mut Graph, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..targets.len()).filter(|&i| targets[i] >= 0.0).partition(|&i| targets[i] > 0.5);
    let mut terms = Vec::with_capacity(2);
    for (idx, t) in [(pos, 1.0), (neg, 0.0)] {
        if !idx.is_empty() {
            let sel = g.gather(logits, &idx)?;
            terms.push(g.bce_with_logits(sel, &vec![t; idx.len()])?);
        }
    }
    match terms[..] {
        [a] => Ok(a),
        [a, b] => g.add(a, b),
        _ => Err(Error::pre("objectness", "empty map")),
    }
}

/// Episode loss on the tape.
///
/// `meta`: cosine cross-entropy of the support prototypes against the
/// meta-classifier rows of their classes. `objectness`: per-location binary
/// cross-entropy with GT-centre cells positive, centres of ignored boxes
/// skipped and every other cell background, positives and background
/// averaged separately. `slot`: cross-entropy of `α·cos(F_cam, T)` at GT centres
/// against the object's slot. `bbox`: mean L1 of the regressed edge offsets
/// at GT centres; exactly 0 without ground truth.
pub fn train_loss_graph(
    g: &mut Graph,
    episode: &Episode,
    maps: &MapStore,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<LossNodes> {
    let d = cfg.channels();
    if episode.slots.is_empty() || episode.slots.len() > cfg.t_max {
        return Err(Error::pre(
            "train_loss",
            format!("{} slots with t_max {}", episode.slots.len(), cfg.t_max),
        ));
    }
    if let Some(&c) = episode.slots.iter().find(|&&c| c as usize >= cfg.num_classes) {
        return Err(Error::pre("train_loss", format!("class {c} outside {} classes", cfg.num_classes)));
    }
    let mut fused: BTreeMap<u32, NodeId> = BTreeMap::new();
    for img in episode.support_images() {
        let node = fused_node(g, maps, img, cfg, store)?;
        fused.insert(img, node);
    }
    let entries: Vec<(NodeId, SupportBox)> = episode.support.iter().map(|(img, b)| (fused[img], *b)).collect();
    let s = prototype_rows_graph(g, &entries, &episode.slots, cfg.roi_out, cfg.roi_samples)?;

    let class_w = g.param(store, "meta.class_weights")?;
    let labels: Vec<usize> = episode.slots.iter().map(|&c| c as usize).collect();
    let meta = cosine_ce_loss_graph(g, s, class_w, &labels, cfg.alpha)?;

    let q = fused_node(g, maps, episode.query, cfg, store)?;
    let &[_, h, w] = g.shape(q) else {
        return Err(Error::shape("train_loss", g.shape(q), "rank 3"));
    };
    let t_mat = task_encodings(episode.slots.len(), d)?;
    let t = g.input(t_mat);
    let cam = cam_forward_graph(g, q, s, t, &cfg.cam, store)?;

    let obj_w = g.param(store, "head.obj_w")?;
    let obj_b = g.param(store, "head.obj_b")?;
    let logits = g.conv1x1(cam.output, obj_w, Some(obj_b))?;
    let mut targets = vec![0.0; h * w];
    for b in &episode.ignore {
        let (i, j) = centre_cell(b, h, w);
        targets[i * w + j] = -1.0;
    }
    let mut positives = Vec::with_capacity(episode.query_gt.len());
    for gt in &episode.query_gt {
        let (i, j) = centre_cell(&gt.bbox, h, w);
        targets[i * w + j] = 1.0;
        positives.push((i * w + j, gt));
    }
    let objectness = balanced_bce(g, logits, &targets)?;

    let (slot, bbox) = if positives.is_empty() {
        let zero = g.input(Tensor::scalar(0.0));
        (zero, zero)
    } else {
        // per-positive feature rows [P, D]
        let flat = g.reshape(cam.output, &[d, h * w])?;
        let cols = g.transpose(flat)?;
        let idx: Vec<usize> = positives.iter().flat_map(|&(p, _)| (0..d).map(move |c| p * d + c)).collect();
        let rows = g.gather(cols, &idx)?;
        let rows = g.reshape(rows, &[positives.len(), d])?;
        let rn = g.row_normalize(rows)?;
        let tn = g.row_normalize(t)?;
        let tt = g.transpose(tn)?;
        let cos = g.matmul(rn, tt)?;
        let slot_logits = g.scale(cos, cfg.alpha);
        let slot_labels: Vec<usize> = positives
            .iter()
            .map(|(_, gt)| episode.slot_of(gt.class_id).expect("gt restricted to slots"))
            .collect();
        let slot = g.cross_entropy(slot_logits, &slot_labels)?;

        let box_w = g.param(store, "head.box_w")?;
        let box_b = g.param(store, "head.box_b")?;
        let reg = g.conv1x1(cam.output, box_w, Some(box_b))?;
        let ridx: Vec<usize> = positives
            .iter()
            .flat_map(|&(p, _)| (0..4).map(move |k| k * h * w + p))
            .collect();
        let pred = g.gather(reg, &ridx)?;
        let tgt: Vec<f64> = positives
            .iter()
            .flat_map(|&(p, gt)| {
                let (cx, cy) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
                [gt.bbox.x1 - cx, gt.bbox.y1 - cy, gt.bbox.x2 - cx, gt.bbox.y2 - cy]
            })
            .collect();
        let tgt = g.input(Tensor::vector(tgt));
        let diff = g.sub(pred, tgt)?;
        let ad = g.abs(diff);
        (slot, g.mean(ad))
    };

    let wm = g.scale(meta, cfg.weights.meta);
    let wo = g.scale(objectness, cfg.weights.cls);
    let ws = g.scale(slot, cfg.weights.cls);
    let wb = g.scale(bbox, cfg.weights.bbox);
    let a = g.add(wm, wo)?;
    let b = g.add(ws, wb)?;
    let total = g.add(a, b)?;
    Ok(LossNodes {
        total,
        meta,
        objectness,
        slot,
        bbox,
    })
}

/// Scalar episode loss.
pub fn train_loss(episode: &Episode, maps: &MapStore, cfg: &ModelConfig, store: &ParamStore) -> Result<f64> {
    let mut g = Graph::new();
    let l = train_loss_graph(&mut g, episode, maps, cfg, store)?;
    Ok(g.scalar(l.total))
}

/// Per-location detections from aggregated features. Class ids are slot
/// indices into `protos`; image ids are 0.
pub fn toy_head(f_cam: &FeatureMap, protos: &PrototypeSet, head: &ToyHeadParams, score_thr: f64, alpha: f64) -> Result<Vec<Detection>> {
    let (d, h, w) = f_cam.shape();
    let c = protos.len();
    if head.obj_w.cols() != d || protos.dim() != d {
        return Err(Error::shape("toy_head", f_cam.shape(), head.obj_w.shape()));
    }
    let tn: Vec<Vec<f64>> = (0..c)
        .map(|r| {
            let row = protos.encodings.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut dets = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let x = f_cam.pixel(i, j);
            let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let obj = ops::sigmoid(head.obj_b + x.iter().zip(head.obj_w.row(0)).map(|(a, b)| a * b).sum::<f64>());
            let logits: Vec<f64> = tn
                .iter()
                .map(|t| if xn > 0.0 { alpha * x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / xn } else { 0.0 })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
            let r: Vec<f64> = (0..4)
                .map(|k| head.box_b[k] + x.iter().zip(head.box_w.row(k)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let bbox = Box2 {
                x1: (cx + r[0]).clamp(0.0, w as f64),
                y1: (cy + r[1]).clamp(0.0, h as f64),
                x2: (cx + r[2]).clamp(0.0, w as f64),
                y2: (cy + r[3]).clamp(0.0, h as f64),
            };
            if !bbox.is_valid() {
                continue;
            }
            for (slot, l) in logits.iter().enumerate() {
                let score = obj * (l - m).exp() / z;
                if score > score_thr {
                    dets.push(Detection {
                        image_id: 0,
                        class_id: slot as u32,
                        score,
                        bbox,
                    });
                }
            }
        }
    }
    Ok(nms(dets, NMS_IOU))
}

/// Greedy per-class non-maximum suppression; survivors in descending score
/// order (ties by class, then input order).
pub fn nms(mut dets: Vec<Detection>, thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if !keep.iter().any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > thr) {
            keep.push(d);
        }
    }
    keep
}

/// Fused map of one image pair under the model's fusion mode.
pub fn fuse_pair(rgb: &FeatureMap, ir: &FeatureMap, cfg: &ModelConfig, store: &ParamStore) -> Result<FeatureMap> {
    crate::fusion::fuse_pair(rgb, ir, &cfg.fusion, store)
}

/// Prototypes of `classes` from one support set, using all of its instances.
pub fn support_prototypes(
    set: &SupportSet,
    classes: &[u32],
    maps: &MapStore,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<PrototypeSet> {
    let mut g = Graph::new();
    let mut fused: BTreeMap<u32, NodeId> = BTreeMap::new();
    let mut entries = Vec::new();
    for &class in classes {
        let inst = set.per_class.get(&class).ok_or(Error::MissingSupport { class })?;
        for i in inst {
            let node = match fused.get(&i.image_id) {
                Some(&n) => n,
                None => {
                    let n = fused_node(&mut g, maps, i.image_id, cfg, store)?;
                    fused.insert(i.image_id, n);
                    n
                }
            };
            entries.push((node, i.support_box(class)));
        }
    }
    let s = prototype_rows_graph(&mut g, &entries, classes, cfg.roi_out, cfg.roi_samples)?;
    PrototypeSet::new(g.matrix(s)?, classes.to_vec())
}

/// Prototypes averaged over every support seed; computed once before
/// inference.
pub fn precompute_prototypes(
    sets: &[SupportSet],
    classes: &[u32],
    maps: &MapStore,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<PrototypeSet> {
    let per_seed = sets
        .iter()
        .map(|s| support_prototypes(s, classes, maps, cfg, store))
        .collect::<Result<Vec<_>>>()?;
    average_prototypes(&per_seed)
}

/// Detections for one query pair with precomputed prototypes; class ids are
/// dataset ids.
pub fn infer(
    image_id: u32,
    rgb: &FeatureMap,
    ir: &FeatureMap,
    protos: &PrototypeSet,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<Vec<Detection>> {
    if protos.dim() != cfg.channels() || protos.is_empty() || protos.len() > cfg.t_max {
        return Err(Error::pre(
            "infer",
            format!(
                "{} prototypes of dim {} do not fit {} slots of dim {}",
                protos.len(),
                protos.dim(),
                cfg.t_max,
                cfg.channels()
            ),
        ));
    }
    let mut g = Graph::new();
    let r = g.input(rgb.clone());
    let i = g.input(ir.clone());
    let fq = fuse_modalities(&mut g, r, i, &cfg.fusion, store)?;
    let s = g.input(protos.prototypes.clone());
    let t = g.input(protos.encodings.clone());
    let cam = cam_forward_graph(&mut g, fq, s, t, &cfg.cam, store)?;
    let f_cam = g.map(cam.output)?;
    let head = ToyHeadParams::from_store(store)?;
    Ok(toy_head(&f_cam, protos, &head, cfg.score_thr, cfg.alpha)?
        .into_iter()
        .map(|d| Detection {
            image_id,
            class_id: protos.class_ids[d.class_id as usize],
            ..d
        })
        .collect())
}

/// Convenience constructor for the default fused configuration.
pub fn default_fusion(channels: usize, mode: FusionMode) -> Result<FusionConfig> {
    FusionConfig::new(channels, mode, 3, 2, 0.5, 5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(d: usize, obj_b: f64) -> ToyHeadParams {
        ToyHeadParams {
            obj_w: Matrix::zeros(1, d),
            obj_b,
            box_w: Matrix::zeros(4, d),
            box_b: [-1.5, -1.5, 1.5, 1.5],
        }
    }

    fn protos(c: usize, d: usize) -> PrototypeSet {
        PrototypeSet::new(Matrix::from_fn(c, d, |r, k| (r + k) as f64), (0..c as u32).collect()).unwrap()
    }

    #[test]
    fn strongly_negative_objectness_gives_nothing() {
        let f = FeatureMap::from_fn(4, 5, 5, |c, i, j| (c + i + j) as f64);
        assert!(toy_head(&f, &protos(2, 4), &head(4, -1e3), 0.05, 20.0).unwrap().is_empty());
    }

    #[test]
    fn dominant_alignment_picks_slot() {
        let p = protos(3, 4);
        let mut f = FeatureMap::filled(4, 5, 5, 0.0);
        for c in 0..4 {
            f.set(c, 2, 2, p.encodings.at(0, c) * 3.0);
        }
        let dets = toy_head(&f, &p, &head(4, 5.0), 0.05, 20.0).unwrap();
        assert_eq!(dets[0].class_id, 0);
        assert_eq!(dets[0].bbox, Box2::new(1.0, 1.0, 4.0, 4.0).unwrap());
    }

    #[test]
    fn nms_keeps_higher_of_identical_boxes() {
        let b = Box2::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let d = |score, class_id| Detection {
            image_id: 0,
            class_id,
            score,
            bbox: b,
        };
        let kept = nms(vec![d(0.8, 0), d(0.9, 0), d(0.7, 1)], 0.5);
        assert_eq!(kept, vec![d(0.9, 0), d(0.7, 1)]);
    }
}
