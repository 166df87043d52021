//! Seeded gradient audits of the differentiable pipeline: neighborhood
//! attention, full fusion with deformed sampling, aggregation with the cosine
//! loss, and the episode training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::neighborhood::na_forward_graph;
use crate::attention::NAConfig;
use crate::error::Result;
use crate::fusion::{fusion_forward_graph, FusionConfig, FusionMode};
use crate::gradcheck::{GradCheck, GradCheckReport, DEFAULT_EPS};
use crate::harness::data::{synthesize, SynthConfig};
use crate::harness::episode::Episode;
use crate::harness::model::{default_fusion, init_model, train_loss_graph, ModelConfig};
use crate::harness::MapStore;
use crate::prototype::{cam_forward_graph, cosine_ce_loss_graph, task_encodings, CamConfig, SupportBox};
use crate::{FeatureMap, Graph, NodeId, ParamStore, Tensor};

/// Disagreements below this many loss-rounding floors are attributed to the
/// finite difference rather than the gradient.
pub const NOISE_FLOORS: f64 = 8.0;

/// Relative-error tolerance of every audit.
pub const TOLERANCE: f64 = 1e-6;

/// Smaller steps tried for entries that disagree at the default step.
pub const REFINE_LEVELS: u32 = 2;

fn checker() -> GradCheck<'static> {
    GradCheck::new(DEFAULT_EPS).refine(REFINE_LEVELS, TOLERANCE)
}

pub const AUDITS: [&str; 4] = ["na_forward", "fusion_forward", "cam_cosine", "train_loss"];

#[derive(Debug, Clone)]
pub struct AuditResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl AuditResult {
    /// Worst relative error over every checked entry.
    pub fn strict(&self) -> f64 {
        self.report.max_rel_error
    }

    /// Worst relative error after step refinement, with disagreements inside
    /// the rounding floor counted as exact.
    pub fn resolved(&self) -> f64 {
        self.report.max_rel_error_resolved(NOISE_FLOORS)
    }

    pub fn passed(&self) -> bool {
        self.resolved() <= TOLERANCE
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} seed {} entries {} refined {} strict {:.3e} resolved {:.3e} noise {:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.seed,
            self.report.entries_checked,
            self.report.refined_count(),
            self.strict(),
            self.resolved(),
            self.report.noise_floor()
        )
    }
}

fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(d, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// `Σ w·out²` with fixed weights in `[0.5, 1.5]`. Every output entry carries
/// gradient and the terms never cancel, so `|loss|` measures the magnitude
/// the rounding floor is computed from.
fn probe(g: &mut Graph, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let shape = g.shape(out).to_vec();
    let n = shape.iter().product();
    let w = g.input(Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?);
    let sq = g.mul(out, out)?;
    let m = g.mul(sq, w)?;
    Ok(g.sum(m))
}

pub fn na(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NAConfig::new("na", 3, 3)?;
    let mut store = ParamStore::new(seed);
    cfg.init_params(&mut store)?;
    let x = random_map(&mut rng, 3, 5, 4);
    checker().run(&store, |g, s| {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
        let xi = g.input(x.clone());
        let (out, _) = na_forward_graph(g, xi, &cfg, s)?;
        probe(g, out, &mut r)
    })
}

/// Offset conv weights are randomised so sampling happens at deformed points.
pub fn fusion(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let d = 4;
    let cfg = FusionConfig::new(d, FusionMode::Cda, 3, 2, 0.5, 3)?;
    let mut store = ParamStore::new(seed);
    cfg.init_params(&mut store)?;
    for k in ["cda.rgb.off_w", "cda.ir.off_w", "cda.rgb.off_b", "cda.ir.off_b"] {
        store.value_mut(k)?.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let rgb = random_map(&mut rng, d, 4, 6);
    let ir = random_map(&mut rng, d, 4, 6);
    checker().run(&store, |g, s| {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xb6);
        let a = g.input(rgb.clone());
        let b = g.input(ir.clone());
        let nodes = fusion_forward_graph(g, a, b, &cfg, s)?;
        probe(g, nodes.fused, &mut r)
    })
}

pub fn cam_cosine(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let d = 4;
    let cfg = CamConfig::new(d);
    let mut store = ParamStore::new(seed);
    cfg.init_params(&mut store)?;
    store.insert("proto", Tensor::new(vec![3, d], (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect())?);
    store.insert("class_w", Tensor::new(vec![5, d], (0..5 * d).map(|_| rng.random_range(-1.0..1.0)).collect())?);
    let f = random_map(&mut rng, d, 3, 4);
    let t = task_encodings(3, d)?;
    checker().run(&store, |g, s| {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xc7);
        let q = g.input(f.clone());
        let p = g.param(s, "proto")?;
        let ti = g.input(t.clone());
        let cam = cam_forward_graph(g, q, p, ti, &cfg, s)?;
        let head = probe(g, cam.output, &mut r)?;
        let w = g.param(s, "class_w")?;
        let ce = cosine_ce_loss_graph(g, p, w, &[0, 3, 4], 20.0)?;
        g.add(head, ce)
    })
}

/// Full episode loss on a small synthetic task with two slots.
pub fn train_loss(seed: u64) -> Result<GradCheckReport> {
    train_loss_with(seed, checker())
}

pub fn train_loss_with(seed: u64, check: GradCheck<'_>) -> Result<GradCheckReport> {
    let cfg = SynthConfig {
        images: 4,
        height: 10,
        width: 10,
        objects_per_image: 2,
        noise: 0.1,
        ..SynthConfig::default()
    };
    let images = synthesize(&cfg, seed)?;
    let maps: MapStore = images.iter().map(|im| (im.image_id, (im.rgb.clone(), im.ir.clone()))).collect();
    let model = ModelConfig::new(default_fusion(cfg.channels, FusionMode::Cda)?, cfg.classes);
    let mut store = init_model(&model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    for k in ["cda.rgb.off_w", "cda.ir.off_w"] {
        store.value_mut(k)?.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let (q, s) = (&images[0], &images[1]);
    let a = s.boxes[0];
    let b = q.boxes[1];
    let sb = |g: &crate::eval::GroundTruth| SupportBox::new(g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2, g.class_id);
    let mut slots = vec![a.class_id];
    if b.class_id != a.class_id {
        slots.push(b.class_id);
    }
    let episode = Episode {
        support: slots
            .iter()
            .map(|&c| if c == a.class_id { (s.image_id, sb(&a)) } else { (q.image_id, sb(&b)) })
            .collect(),
        query_gt: q.boxes.iter().filter(|g| slots.contains(&g.class_id)).copied().collect(),
        query: q.image_id,
        ignore: vec![],
        slots,
    };
    check.run(&store, |g, st| Ok(train_loss_graph(g, &episode, &maps, &model, st)?.total))
}

/// Runs audit `name` on `seed`.
pub fn run(name: &'static str, seed: u64) -> Result<AuditResult> {
    let report = match name {
        "na_forward" => na(seed)?,
        "fusion_forward" => fusion(seed)?,
        "cam_cosine" => cam_cosine(seed)?,
        "train_loss" => train_loss(seed)?,
        other => return Err(crate::Error::Config(format!("unknown audit {other:?}"))),
    };
    Ok(AuditResult { name, seed, report })
}

/// Every audit on seeds `0..seeds`.
pub fn run_all(seeds: u64) -> Result<Vec<AuditResult>> {
    let mut out = Vec::new();
    for name in AUDITS {
        for seed in 0..seeds {
            out.push(run(name, seed)?);
        }
    }
    Ok(out)
}
