use std::collections::BTreeMap;

use fsmod_core::eval::Box2;
use fsmod_core::fusion::FusionMode;
use fsmod_core::gradcheck::{GradCheck, DEFAULT_EPS};
use fsmod_core::harness::data::{format_index, parse_index, synthesize, SynthImage, INDEX_FILE};
use fsmod_core::harness::episode::class_instances;
use fsmod_core::harness::model::{default_fusion, init_model, train_loss_graph};
use fsmod_core::harness::train::{fixed_episodes, format_log, mean_loss};
use fsmod_core::harness::*;
use fsmod_core::prototype::{PrototypeSet, SupportBox};
use fsmod_core::{Error, FeatureMap, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(images: usize, seed: u64) -> (tempfile::TempDir, DatasetIndex, MapStore) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        images,
        ..SynthConfig::default()
    };
    let index = generate_synthetic(&cfg, seed, dir.path()).unwrap();
    let maps = index.load_maps().unwrap();
    (dir, index, maps)
}

fn split() -> SplitSpec {
    SplitSpec::new(&[0, 1], &[2]).unwrap()
}

fn model(mode: FusionMode) -> ModelConfig {
    ModelConfig::new(default_fusion(8, mode).unwrap(), 3)
}

#[test]
fn support_sets_hold_exactly_k_per_class() {
    let (_dir, index, _) = dataset(150, 5);
    let split = split();
    for k in [5, 10, 30] {
        let sets = build_supports(&index, &split, k, 10, 42).unwrap();
        assert_eq!(sets.len(), 10);
        for set in &sets {
            assert_eq!(set.shots, k);
            for c in split.all() {
                let inst = &set.per_class[&c];
                assert_eq!(inst.len(), k, "K={k} class {c}");
                let pool = class_instances(&index, c);
                for (n, i) in inst.iter().enumerate() {
                    assert!(pool.contains(i));
                    assert!(!inst[n + 1..].contains(i), "instance drawn twice");
                }
            }
        }
        assert_eq!(sets, build_supports(&index, &split, k, 10, 42).unwrap());
    }
}

#[test]
fn too_few_instances_is_reported() {
    let (_dir, index, _) = dataset(6, 1);
    let err = build_supports(&index, &split(), 30, 10, 0).unwrap_err();
    assert!(matches!(err, Error::InsufficientData { required: 30, .. }), "{err}");
}

#[test]
fn finetune_episodes_never_leak_novel_instances() {
    let (_dir, index, _) = dataset(60, 2);
    let split = split();
    let sets = build_supports(&index, &split, 5, 10, 7).unwrap();
    let active = &sets[3];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut with_novel_gt = 0;
    for _ in 0..1000 {
        let e = sample_episode(&index, &split, Stage::Finetune, Some(active), EpisodeConfig::default(), &mut rng).unwrap();
        for (img, b) in &e.support {
            if split.is_novel(b.class) {
                let bbox = Box2::new(b.x1, b.y1, b.x2, b.y2).unwrap();
                assert!(active.contains(b.class, *img, &bbox), "support {img} {b:?}");
            }
        }
        for gt in &e.query_gt {
            if split.is_novel(gt.class_id) {
                assert!(active.contains(gt.class_id, gt.image_id, &gt.bbox), "query gt {gt:?}");
                with_novel_gt += 1;
            }
        }
        let record = index.get(e.query).unwrap();
        for b in record.boxes.iter().filter(|b| split.is_novel(b.class_id)) {
            let labelled = e.query_gt.contains(b);
            let ignored = e.ignore.contains(&b.bbox);
            let in_set = active.contains(b.class_id, b.image_id, &b.bbox);
            assert!(!(labelled && ignored));
            assert_eq!(ignored, !in_set);
        }
    }
    assert!(with_novel_gt > 0, "no episode ever labelled a novel object");
}

#[test]
fn base_episodes_see_only_base_classes() {
    let (_dir, index, _) = dataset(60, 2);
    let split = split();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let e = sample_episode(&index, &split, Stage::Base, None, EpisodeConfig::default(), &mut rng).unwrap();
        assert!(e.slots.iter().all(|&c| !split.is_novel(c)));
        assert!(e.support.iter().all(|(_, b)| !split.is_novel(b.class)));
        let record = index.get(e.query).unwrap();
        assert!(record.boxes.iter().all(|b| !split.is_novel(b.class_id)));
        assert!(e.ignore.is_empty());
    }
}

#[test]
fn slot_positions_are_uniform() {
    let (_dir, index, _) = dataset(60, 2);
    let split = split();
    let sets = build_supports(&index, &split, 5, 1, 0).unwrap();
    let cfg = EpisodeConfig { t_max: 2, shots: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6000;
    let mut counts: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for _ in 0..n {
        let e = sample_episode(&index, &split, Stage::Finetune, Some(&sets[0]), cfg, &mut rng).unwrap();
        assert_eq!(e.slots.len(), 2);
        for (pos, &c) in e.slots.iter().enumerate() {
            *counts.entry((pos, c)).or_default() += 1;
        }
    }
    // 3 eligible classes in 2 slots: each class occupies each position 1/3 of the time
    for pos in 0..2 {
        for c in 0..3 {
            let p = counts.get(&(pos, c)).copied().unwrap_or(0) as f64 / n as f64;
            assert!((p - 1.0 / 3.0).abs() < 0.05, "slot {pos} class {c}: {p}");
        }
    }
}

#[test]
fn index_round_trips_through_text() {
    let (dir, index, _) = dataset(12, 9);
    let loaded = load_index(&dir.path().join(INDEX_FILE)).unwrap();
    assert_eq!(loaded, index);
    let text = format_index(&index, dir.path());
    let again = parse_index(&text, &dir.path().join("x.txt"), dir.path()).unwrap();
    assert_eq!(again, index);
}

#[test]
fn malformed_index_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = "# header\n0 a.fmp b.fmp\n  box 0 1 1 4 4\n  box zero 1 1 4 4\n";
    let err = parse_index(text, &dir.path().join("idx.txt"), dir.path()).unwrap_err();
    assert!(err.to_string().contains(":4"), "{err}");
    let missing = load_index(&dir.path().join("nope.txt")).unwrap_err();
    assert_eq!(missing.exit_code(), 1);
}

/// Clean crops of each class: centroid from the first half, classify the rest.
#[test]
fn synthetic_signatures_separate_by_nearest_centroid() {
    let cfg = SynthConfig {
        images: 60,
        noise: 0.0,
        ..SynthConfig::default()
    };
    let images = synthesize(&cfg, 4).unwrap();
    let crop = |im: &SynthImage, b: &Box2| -> Vec<f64> {
        let mut v = Vec::new();
        for map in [&im.rgb, &im.ir] {
            for c in 0..map.channels() {
                let mut acc = 0.0;
                for y in b.y1 as usize..b.y2 as usize {
                    for x in b.x1 as usize..b.x2 as usize {
                        acc += map.at(c, y, x);
                    }
                }
                v.push(acc);
            }
        }
        v
    };
    let samples: Vec<(u32, Vec<f64>)> = images
        .iter()
        .flat_map(|im| im.boxes.iter().map(move |b| (b.class_id, crop(im, &b.bbox))))
        .collect();
    let (train, test) = samples.split_at(samples.len() / 2);
    let mut centroids: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (c, v) in train {
        let e = centroids.entry(*c).or_insert((vec![0.0; v.len()], 0));
        e.0.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let dist = |a: &[f64], b: &[f64], n: usize| a.iter().zip(b).map(|(x, y)| (x / n as f64 - y).powi(2)).sum::<f64>();
    for (c, v) in test {
        let best = centroids
            .iter()
            .min_by(|a, b| dist(&a.1 .0, v, a.1 .1).total_cmp(&dist(&b.1 .0, v, b.1 .1)))
            .unwrap();
        assert_eq!(best.0, c);
    }
}

#[test]
fn ablated_modality_carries_only_noise() {
    let cfg = SynthConfig {
        images: 5,
        noise: 0.1,
        ablate: Some(Modality::Rgb),
        ..SynthConfig::default()
    };
    let ablated = synthesize(&cfg, 8).unwrap();
    let full = synthesize(&SynthConfig { ablate: None, ..cfg }, 8).unwrap();
    for (a, f) in ablated.iter().zip(&full) {
        assert!(a.rgb.data().iter().all(|v| v.abs() <= 0.1));
        assert_eq!(a.ir, f.ir);
        assert_eq!(a.boxes, f.boxes);
    }
}

fn quick_train(steps: (usize, usize), lr: f64) -> (TrainConfig, tempfile::TempDir, DatasetIndex, MapStore) {
    let (dir, index, maps) = dataset(24, 3);
    let cfg = TrainConfig {
        base_steps: steps.0,
        finetune_steps: steps.1,
        lr,
        k: 3,
        n_seeds: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    (cfg, dir, index, maps)
}

#[test]
fn zero_steps_leave_initialization_untouched() {
    let (cfg, _dir, index, maps) = quick_train((0, 0), 0.05);
    let m = model(FusionMode::Add);
    let out = run_training(&index, &maps, &split(), &m, &cfg).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.params, init_model(&m, cfg.seed).unwrap());
}

#[test]
fn zero_learning_rate_keeps_parameters_and_losses() {
    let (cfg, _dir, index, maps) = quick_train((4, 4), 0.0);
    let m = model(FusionMode::Cda);
    let out = run_training(&index, &maps, &split(), &m, &cfg).unwrap();
    let init = init_model(&m, cfg.seed).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.log.len(), 8);
    let eps = fixed_episodes(&index, &split(), Stage::Finetune, Some(&out.supports[0]), cfg.episode, 5, 0).unwrap();
    let a = mean_loss(&eps, &maps, &m, &init).unwrap();
    let b = mean_loss(&eps, &maps, &m, &out.params).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn training_is_deterministic_per_seed() {
    let (cfg, _dir, index, maps) = quick_train((5, 5), 0.05);
    let m = model(FusionMode::Cda);
    let a = run_training(&index, &maps, &split(), &m, &cfg).unwrap();
    let b = run_training(&index, &maps, &split(), &m, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(format_log(&a.log), format_log(&b.log));
    let c = run_training(&index, &maps, &split(), &m, &TrainConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn exploding_updates_are_reported_as_divergence() {
    let (mut cfg, _dir, index, maps) = quick_train((50, 0), 1e12);
    cfg.clip = None;
    let err = run_training(&index, &maps, &split(), &model(FusionMode::Add), &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn clipping_bounds_the_update() {
    let (cfg, _dir, index, maps) = quick_train((0, 0), 0.0);
    let m = model(FusionMode::Add);
    let split = split();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ep = sample_episode(&index, &split, Stage::Base, None, cfg.episode, &mut rng).unwrap();
    let init = init_model(&m, 0).unwrap();
    let mut p = init.clone();
    fsmod_core::harness::train::sgd_step(&ep, &maps, &m, &mut p, 1.0, Some(1e-3)).unwrap();
    let step: f64 = init
        .keys()
        .flat_map(|k| init.value(k).unwrap().iter().zip(p.value(k).unwrap()).map(|(a, b)| (a - b).powi(2)))
        .sum::<f64>()
        .sqrt();
    assert!(step <= 1e-3 * (1.0 + 1e-9), "{step}");
    assert!(step > 0.0);
}

#[test]
fn box_term_vanishes_without_ground_truth() {
    let (_dir, index, maps) = dataset(12, 6);
    let m = model(FusionMode::Cda);
    let store = init_model(&m, 0).unwrap();
    let img = index.images[0].image_id;
    let other = index.images[1].clone();
    let b = other.boxes[0];
    let ep = Episode {
        slots: vec![b.class_id],
        support: vec![(other.image_id, SupportBox::new(b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.class_id))],
        query: img,
        query_gt: vec![],
        ignore: vec![],
    };
    let mut g = fsmod_core::Graph::new();
    let l = train_loss_graph(&mut g, &ep, &maps, &m, &store).unwrap();
    assert_eq!(g.scalar(l.bbox), 0.0);
    assert_eq!(g.scalar(l.slot), 0.0);
    assert!(g.scalar(l.objectness) > 0.0);
}

#[test]
fn ignored_boxes_do_not_count_as_background() {
    let (_dir, index, maps) = dataset(12, 6);
    let m = model(FusionMode::Add);
    let store = init_model(&m, 0).unwrap();
    let q = index.images[0].clone();
    let s = index.images[1].clone();
    let b = s.boxes[0];
    let ep = Episode {
        slots: vec![b.class_id],
        support: vec![(s.image_id, SupportBox::new(b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.class_id))],
        query: q.image_id,
        query_gt: vec![],
        ignore: vec![],
    };
    let masked = Episode {
        ignore: q.boxes.iter().map(|b| b.bbox).collect(),
        ..ep.clone()
    };
    let a = train_loss(&ep, &maps, &m, &store).unwrap();
    let b = train_loss(&masked, &maps, &m, &store).unwrap();
    assert_ne!(a, b);
}

#[test]
fn episode_loss_gradients_match_finite_differences() {
    let cfg = SynthConfig {
        images: 6,
        channels: 8,
        height: 8,
        width: 8,
        objects_per_image: 1,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic(&cfg, 0, dir.path()).unwrap();
    let maps = index.load_maps().unwrap();
    let m = model(FusionMode::Cda);
    let mut store = init_model(&m, 3).unwrap();
    // move the offset conv off its zero init so sampling positions depend on it
    for key in ["cda.rgb.off_w", "cda.ir.off_w"] {
        let n = store.value(key).unwrap().len();
        let v: Vec<f64> = (0..n).map(|i| 0.05 * ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        store.set_value(key, &v).unwrap();
    }
    let q = &index.images[0];
    let s = &index.images[1];
    let b = s.boxes[0];
    let ep = Episode {
        slots: vec![b.class_id, (b.class_id + 1) % 3],
        support: vec![
            (s.image_id, SupportBox::new(b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.class_id)),
            (q.image_id, SupportBox::new(0.0, 0.0, 3.0, 3.0, (b.class_id + 1) % 3)),
        ],
        query: q.image_id,
        query_gt: q.boxes.iter().filter(|g| g.class_id == b.class_id).copied().collect(),
        ignore: vec![],
    };
    let report = GradCheck::new(DEFAULT_EPS)
        .run(&store, |g, st| Ok(train_loss_graph(g, &ep, &maps, &m, st)?.total))
        .unwrap();
    let resolved = report.max_rel_error_above_noise(8.0);
    assert!(resolved <= 1e-6, "rel {resolved:e}, worst {:?}", report.worst);
    assert!(report.entries_checked > 100);
}

#[test]
fn inference_is_deterministic_and_labels_with_dataset_ids() {
    let (_dir, index, maps) = dataset(12, 6);
    let m = model(FusionMode::Cda);
    let store = init_model(&m, 0).unwrap();
    let (rgb, ir) = &maps[&index.images[0].image_id];
    let proto = PrototypeSet::new(Matrix::from_fn(1, 8, |_, c| c as f64 + 1.0), vec![7]).unwrap();
    let mut lenient = m.clone();
    lenient.score_thr = 0.0;
    let a = infer(3, rgb, ir, &proto, &lenient, &store).unwrap();
    let b = infer(3, rgb, ir, &proto, &lenient, &store).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
    assert!(a.iter().all(|d| d.class_id == 7 && d.image_id == 3));

    let wide = PrototypeSet::new(Matrix::zeros(5, 8), (0..5).collect()).unwrap();
    assert_eq!(infer(0, rgb, ir, &wide, &m, &store).unwrap_err().exit_code(), 2);
    let narrow = PrototypeSet::new(Matrix::zeros(1, 4), vec![0]).unwrap();
    assert_eq!(infer(0, rgb, ir, &narrow, &m, &store).unwrap_err().exit_code(), 2);
    let blank = FeatureMap::zeros(8, 12, 12);
    assert!(infer(0, &blank, &blank, &proto, &m, &store).is_ok());
}

#[test]
fn prototypes_average_over_seeds() {
    let (_dir, index, maps) = dataset(24, 3);
    let split = split();
    let m = model(FusionMode::Add);
    let store = init_model(&m, 0).unwrap();
    let sets = build_supports(&index, &split, 3, 4, 0).unwrap();
    let avg = precompute_prototypes(&sets, &split.all(), &maps, &m, &store).unwrap();
    let each: Vec<PrototypeSet> = sets
        .iter()
        .map(|s| precompute_prototypes(std::slice::from_ref(s), &split.all(), &maps, &m, &store).unwrap())
        .collect();
    for r in 0..3 {
        for c in 0..8 {
            let mean = each.iter().map(|p| p.prototypes.at(r, c)).sum::<f64>() / 4.0;
            assert!((avg.prototypes.at(r, c) - mean).abs() < 1e-12);
        }
    }
}
