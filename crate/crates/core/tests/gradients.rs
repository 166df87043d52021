use fsmod_core::attention::neighborhood::{na_forward_graph, NAConfig};
use fsmod_core::fusion::{fusion_forward_graph, FusionConfig, FusionMode};
use fsmod_core::gradcheck::{GradCheck, DEFAULT_EPS};
use fsmod_core::prototype::{cam_forward_graph, cosine_ce_loss_graph, task_encodings, CamConfig};
use fsmod_core::{FeatureMap, Graph, Matrix, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
/// Disagreements smaller than this many loss-rounding floors are attributed
/// to the finite difference.
const NOISE_FLOORS: f64 = 8.0;

fn assert_gradients(report: &fsmod_core::gradcheck::GradCheckReport, what: &str) {
    let resolved = report.max_rel_error_above_noise(NOISE_FLOORS);
    assert!(
        resolved <= TOL,
        "{what}: rel {resolved:e} above noise floor {:e}; worst {:?}",
        report.noise_floor(),
        report.worst
    );
    assert!(report.entries_checked > 0);
}

fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(d, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Fixed random projection to a scalar so every output entry carries gradient.
fn probe(g: &mut Graph, out: fsmod_core::NodeId, weights: &[f64]) -> fsmod_core::Result<fsmod_core::NodeId> {
    let shape = g.shape(out).to_vec();
    let w = g.input(Tensor::new(shape, weights.to_vec())?);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

#[test]
fn neighborhood_attention_gradients() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NAConfig::new("na", 3, 3).unwrap();
        let mut store = ParamStore::new(seed);
        cfg.init_params(&mut store).unwrap();
        let x = random_map(&mut rng, 3, 5, 4);
        let pw: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = GradCheck::new(DEFAULT_EPS)
            .run(&store, |g, s| {
                let xi = g.input(x.clone());
                let (out, _) = na_forward_graph(g, xi, &cfg, s)?;
                probe(g, out, &pw)
            })
            .unwrap();
        assert_gradients(&report, &format!("seed {seed}"));
    }
}

#[test]
fn full_fusion_gradients_through_deformed_sampling() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 4;
        let cfg = FusionConfig::new(d, FusionMode::Cda, 3, 2, 0.5, 3).unwrap();
        let mut store = ParamStore::new(seed);
        cfg.init_params(&mut store).unwrap();
        for k in ["cda.rgb.off_w", "cda.ir.off_w", "cda.rgb.off_b", "cda.ir.off_b"] {
            store.value_mut(k).unwrap().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let rgb = random_map(&mut rng, d, 4, 6);
        let ir = random_map(&mut rng, d, 4, 6);
        let pw: Vec<f64> = (0..d * 24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = GradCheck::new(DEFAULT_EPS)
            .run(&store, |g, s| {
                let r = g.input(rgb.clone());
                let i = g.input(ir.clone());
                let nodes = fusion_forward_graph(g, r, i, &cfg, s)?;
                probe(g, nodes.fused, &pw)
            })
            .unwrap();
        assert_gradients(&report, &format!("seed {seed}"));
    }
}

#[test]
fn aggregation_and_cosine_loss_gradients() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let d = 4;
        let cfg = CamConfig::new(d);
        let mut store = ParamStore::new(seed);
        cfg.init_params(&mut store).unwrap();
        store.insert("proto", Tensor::new(vec![3, d], (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        store.insert("class_w", Tensor::new(vec![5, d], (0..5 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let f = random_map(&mut rng, d, 3, 4);
        let t = task_encodings(3, d).unwrap();
        let pw: Vec<f64> = (0..d * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = GradCheck::new(DEFAULT_EPS)
            .run(&store, |g, s| {
                let q = g.input(f.clone());
                let p = g.param(s, "proto")?;
                let ti = g.input(t.clone());
                let cam = cam_forward_graph(g, q, p, ti, &cfg, s)?;
                let head = probe(g, cam.output, &pw)?;
                let w = g.param(s, "class_w")?;
                let ce = cosine_ce_loss_graph(g, p, w, &[0, 3, 4], 20.0)?;
                g.add(head, ce)
            })
            .unwrap();
        assert_gradients(&report, &format!("seed {seed}"));
    }
}

#[test]
fn cosine_loss_matches_closed_form() {
    let s = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let l = fsmod_core::prototype::cosine_ce_loss(&s, &w, &[0], 1.0).unwrap();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((l - want).abs() < 1e-12);
}

#[test]
fn episode_loss_gradients_on_three_seeds() {
    for seed in 0..3 {
        let r = fsmod_core::audit::run("train_loss", seed).unwrap();
        assert!(r.report.entries_checked > 500, "{}", r.line());
        assert!(r.passed(), "{}", r.line());
    }
}

#[test]
fn every_audit_passes_on_three_seeds() {
    for r in fsmod_core::audit::run_all(3).unwrap() {
        println!("{}", r.line());
        assert!(r.passed(), "{}", r.line());
    }
}
