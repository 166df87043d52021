//! Registry of quick end-to-end checks run by `fsmod selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cda_forward, na_forward, offset_net, CDAConfig, NAConfig};
use crate::config::RunConfig;
use crate::eval::{format_detections, nap50, parse_detections, Box2, Detection, GroundTruth};
use crate::fusion::{fusion_forward, FusionConfig, FusionMode};
use crate::gradcheck::{GradCheck, DEFAULT_EPS};
use crate::ops::{self, Axis};
use crate::oracle;
use crate::prototype::{cam_forward, roi_align, task_encodings, CamConfig, PrototypeSet, SupportBox};
use crate::{fmp, FeatureMap, Matrix, ParamStore};

/// One registered check: on success a short detail, on failure the reason.
pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Result<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn registry() -> Vec<Check> {
    vec![
        Check { name: "softmax", run: softmax },
        Check { name: "na-vs-masked-dense", run: na_oracle },
        Check { name: "cda-zero-offset-vs-dense", run: cda_dense },
        Check { name: "cda-vs-direct", run: cda_direct },
        Check { name: "offset-bound", run: offset_bound },
        Check { name: "fusion-vs-oracle", run: fusion_oracle },
        Check { name: "cam-vs-direct", run: cam_oracle },
        Check { name: "roi-align", run: roi },
        Check { name: "ap-hand-cases", run: ap_hand },
        Check { name: "ap-rescale", run: ap_rescale },
        Check { name: "gradcheck-na", run: grad_na },
        Check { name: "fmp-roundtrip", run: fmp_roundtrip },
        Check { name: "params-roundtrip", run: params_roundtrip },
        Check { name: "detections-roundtrip", run: detections_roundtrip },
        Check { name: "config-roundtrip", run: config_roundtrip },
    ]
}

/// Runs every registered check in order. A panicking check counts as failed.
pub fn run_all() -> Vec<CheckResult> {
    registry()
        .into_iter()
        .map(|c| {
            let (passed, detail) = match std::panic::catch_unwind(c.run) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(e)) => (false, e),
                Err(_) => (false, "panicked".into()),
            };
            CheckResult { name: c.name, passed, detail }
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(d, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng, amp: f64) {
    let keys: Vec<String> = store.keys().filter(|k| k.starts_with(prefix)).map(String::from).collect();
    for k in keys {
        if let Ok(v) = store.value_mut(&k) {
            v.iter_mut().for_each(|x| *x = rng.random_range(-amp..amp));
        }
    }
}

fn within(what: &str, err: f64, tol: f64) -> Result<String, String> {
    if err <= tol {
        Ok(format!("max err {err:.2e}"))
    } else {
        Err(format!("{what}: max err {err:.3e} > {tol:e}"))
    }
}

fn e(x: impl std::fmt::Display) -> String {
    x.to_string()
}

fn softmax() -> Result<String, String> {
    let mut r = rng(1);
    let m = Matrix::from_fn(5, 7, |_, _| r.random_range(-4.0..4.0));
    let p = ops::softmax(&m, Axis::Rows);
    let mut worst = 0.0f64;
    for i in 0..5 {
        let row = m.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((p.at(i, j) - (v - mx).exp() / z).abs());
        }
    }
    within("softmax rows", worst, 1e-14)
}

fn na_oracle() -> Result<String, String> {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let (d, h, w) = (r.random_range(1..=6), r.random_range(3..=8), r.random_range(3..=8));
        let k = [1, 3][trial % 2];
        let cfg = NAConfig::new("na", d, k).map_err(e)?;
        let mut store = ParamStore::new(trial as u64);
        cfg.init_params(&mut store).map_err(e)?;
        let x = random_map(&mut r, d, h, w);
        let fast = na_forward(&x, &cfg, &store).map_err(e)?;
        let slow = oracle::na_masked_dense(&x, &cfg, &store).map_err(e)?;
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    within("neighborhood attention", worst, 1e-10)
}

fn cda_dense() -> Result<String, String> {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let (d, h, w) = (4, r.random_range(2..=6), r.random_range(2..=6));
        let cfg = CDAConfig::new("cda", d, 1, 0.5, 3).map_err(e)?;
        let mut store = ParamStore::new(trial);
        cfg.init_params(&mut store).map_err(e)?;
        randomize(&mut store, "cda.ffn", &mut r, 0.5);
        let (a, b, c) = (random_map(&mut r, d, h, w), random_map(&mut r, d, h, w), random_map(&mut r, d, h, w));
        let fast = cda_forward(&a, &b, &c, &cfg, &store).map_err(e)?;
        let slow = oracle::cross_attention_dense(&a, &b, &c, &cfg, &store).map_err(e)?;
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    within("zero-offset cross attention", worst, 1e-10)
}

fn cda_direct() -> Result<String, String> {
    let mut r = rng(4);
    let cfg = CDAConfig::new("cda", 4, 2, 0.4, 5).map_err(e)?;
    let mut store = ParamStore::new(4);
    cfg.init_params(&mut store).map_err(e)?;
    randomize(&mut store, "cda.off", &mut r, 1.0);
    let (a, b, c) = (random_map(&mut r, 4, 6, 8), random_map(&mut r, 4, 6, 8), random_map(&mut r, 4, 6, 8));
    let fast = cda_forward(&a, &b, &c, &cfg, &store).map_err(e)?;
    let slow = oracle::cda_direct(&a, &b, &c, &cfg, &store).map_err(e)?;
    within("deformable attention", fast.max_abs_diff(&slow), 1e-10)
}

fn offset_bound() -> Result<String, String> {
    let mut r = rng(5);
    let s = 0.5;
    let cfg = CDAConfig::new("cda", 3, 2, s, 3).map_err(e)?;
    let mut store = ParamStore::new(5);
    cfg.init_params(&mut store).map_err(e)?;
    randomize(&mut store, "cda.off", &mut r, 50.0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let x = FeatureMap::from_fn(3, 4, 4, |_, _, _| r.random_range(-100.0..100.0));
        let dp = offset_net(&x, &cfg, &store).map_err(e)?;
        worst = dp.data().iter().fold(worst, |m, v| m.max(v.abs()));
    }
    if worst <= s {
        Ok(format!("max |dp| {worst:.6} <= {s}"))
    } else {
        Err(format!("offset {worst} exceeds {s}"))
    }
}

fn fusion_oracle() -> Result<String, String> {
    let mut r = rng(6);
    let cfg = FusionConfig::new(4, FusionMode::Cda, 3, 2, 0.5, 5).map_err(e)?;
    let mut store = ParamStore::new(6);
    cfg.init_params(&mut store).map_err(e)?;
    randomize(&mut store, "cda.rgb.off", &mut r, 1.0);
    randomize(&mut store, "cda.ir.off", &mut r, 1.0);
    let (rgb, ir) = (random_map(&mut r, 4, 6, 8), random_map(&mut r, 4, 6, 8));
    let fast = fusion_forward(&rgb, &ir, &cfg, &store).map_err(e)?;
    let slow = oracle::fusion_direct(&rgb, &ir, &cfg, &store).map_err(e)?;
    within("fusion", fast.max_abs_diff(&slow), 1e-10)
}

fn cam_oracle() -> Result<String, String> {
    let mut r = rng(7);
    let d = 6;
    let cfg = CamConfig::new(d);
    let mut store = ParamStore::new(7);
    cfg.init_params(&mut store).map_err(e)?;
    let f = random_map(&mut r, d, 4, 5);
    let s = Matrix::from_fn(3, d, |_, _| r.random_range(-1.0..1.0));
    let protos = PrototypeSet::new(s.clone(), vec![0, 1, 2]).map_err(e)?;
    let fast = cam_forward(&f, &protos, &cfg, &store).map_err(e)?;
    let t = task_encodings(3, d).map_err(e)?;
    let slow = oracle::cam_direct(&f, &s, &t, &cfg, &store).map_err(e)?;
    within("aggregation", fast.max_abs_diff(&slow), 1e-12)
}

fn roi() -> Result<String, String> {
    let mut r = rng(8);
    let f = random_map(&mut r, 3, 10, 12);
    let b = SupportBox::new(1.3, 2.0, 6.1, 5.5, 0);
    let out = roi_align(&f, &b, 7, 2).map_err(e)?;
    let direct = oracle::roi_mean_direct(&f, &b, 7, 2);
    let worst = direct
        .iter()
        .enumerate()
        .map(|(c, want)| ((0..49).map(|k| out.at(c, k / 7, k % 7)).sum::<f64>() / 49.0 - want).abs())
        .fold(0.0, f64::max);
    within("roi mean", worst, 1e-12)
}

fn hand_case() -> (Vec<Detection>, Vec<GroundTruth>) {
    let b = |x: f64| Box2 { x1: x, y1: 0.0, x2: x + 2.0, y2: 2.0 };
    let gts = (0..3)
        .map(|k| GroundTruth { image_id: 0, class_id: 1, bbox: b(10.0 * k as f64) })
        .collect();
    let det = |score, x| Detection { image_id: 0, class_id: 1, score, bbox: b(x) };
    (vec![det(0.9, 0.0), det(0.8, 50.0), det(0.7, 10.0), det(0.6, 20.0)], gts)
}

fn ap_hand() -> Result<String, String> {
    let (dets, gts) = hand_case();
    let hand = nap50(&dets, &gts, &[1]).map_err(e)?.nap;
    let perfect: Vec<Detection> = gts
        .iter()
        .map(|g| Detection { image_id: 0, class_id: 1, score: 1.0, bbox: g.bbox })
        .collect();
    let full = nap50(&perfect, &gts, &[1]).map_err(e)?.nap;
    let none = nap50(&[], &gts, &[1]).map_err(e)?.nap;
    if hand == 5.0 / 6.0 && full == 1.0 && none == 0.0 {
        Ok("5/6, 1, 0".into())
    } else {
        Err(format!("got {hand}, {full}, {none}; want 5/6, 1, 0"))
    }
}

fn ap_rescale() -> Result<String, String> {
    let mut r = rng(9);
    for _ in 0..20 {
        let gts: Vec<GroundTruth> = (0..4)
            .map(|k| GroundTruth {
                image_id: k % 2,
                class_id: 0,
                bbox: Box2 { x1: 5.0 * k as f64, y1: 0.0, x2: 5.0 * k as f64 + 3.0, y2: 3.0 },
            })
            .collect();
        let dets: Vec<Detection> = (0..6)
            .map(|_| {
                let g = gts[r.random_range(0..4)];
                let dx = r.random_range(-1.5..1.5);
                Detection {
                    image_id: g.image_id,
                    class_id: 0,
                    score: r.random_range(0.0..1.0),
                    bbox: Box2 { x1: g.bbox.x1 + dx, x2: g.bbox.x2 + dx, ..g.bbox },
                }
            })
            .collect();
        let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: (3.0 * d.score - 1.0).exp(), ..*d }).collect();
        let a = nap50(&dets, &gts, &[0]).map_err(e)?.nap;
        let b = nap50(&scaled, &gts, &[0]).map_err(e)?.nap;
        if a != b {
            return Err(format!("AP {a} changed to {b} under monotone rescale"));
        }
    }
    Ok("20 cases".into())
}

fn grad_na() -> Result<String, String> {
    let mut r = rng(10);
    let cfg = NAConfig::new("na", 2, 3).map_err(e)?;
    let mut store = ParamStore::new(10);
    cfg.init_params(&mut store).map_err(e)?;
    let x = random_map(&mut r, 2, 4, 4);
    let report = GradCheck::new(DEFAULT_EPS)
        .run(&store, |g, s| {
            let xi = g.input(x.clone());
            let (out, _) = crate::attention::neighborhood::na_forward_graph(g, xi, &cfg, s)?;
            let sq = g.mul(out, out)?;
            Ok(g.sum(sq))
        })
        .map_err(e)?;
    let rel = report.max_rel_error_above_noise(8.0);
    if rel <= 1e-6 {
        Ok(format!("{} entries, rel {rel:.2e}", report.entries_checked))
    } else {
        Err(format!("relative error {rel:.3e} > 1e-6"))
    }
}

fn fmp_roundtrip() -> Result<String, String> {
    let mut r = rng(11);
    let m = random_map(&mut r, 3, 5, 4);
    let back = fmp::decode(&fmp::encode(&m)).map_err(e)?;
    if back == m {
        Ok(format!("checksum {:016x}", fmp::checksum(&m)))
    } else {
        Err("decoded map differs".into())
    }
}

fn params_roundtrip() -> Result<String, String> {
    let cfg = FusionConfig::new(4, FusionMode::Cda, 3, 2, 0.5, 5).map_err(e)?;
    let mut store = ParamStore::new(12);
    cfg.init_params(&mut store).map_err(e)?;
    let back = ParamStore::from_json(&store.to_json()).map_err(e)?;
    if back == store {
        Ok(format!("{} tensors", store.len()))
    } else {
        Err("parameters changed through JSON".into())
    }
}

fn detections_roundtrip() -> Result<String, String> {
    let (dets, _) = hand_case();
    let back = parse_detections(&format_detections(&dets), "dets").map_err(e)?;
    if back == dets {
        Ok(format!("{} lines", dets.len()))
    } else {
        Err("detections changed through text".into())
    }
}

fn config_roundtrip() -> Result<String, String> {
    let mut cfg = RunConfig::default();
    cfg.set("fusion.s", "0.3").map_err(e)?;
    let back = RunConfig::parse(&cfg.echo(), std::path::Path::new("echo")).map_err(e)?;
    if back == cfg {
        Ok(format!("{} keys", crate::config::KEYS.len()))
    } else {
        Err("config changed through echo".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_build_passes_everything() {
        let results = run_all();
        assert_eq!(results.len(), registry().len());
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }
}
