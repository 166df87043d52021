use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fsmod_core::fmp;
use fsmod_core::fusion::{fuse_pair, fusion_forward, FusionConfig, FusionMode};
use fsmod_core::{selftest, FeatureMap, ParamStore};

fn fsmod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsmod")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn map(d: usize, h: usize, w: usize, shift: f64) -> FeatureMap {
    FeatureMap::from_fn(d, h, w, |c, i, j| ((c * 31 + i * 7 + j) as f64 * 0.37 + shift).sin())
}

fn write_pair(dir: &Path, rgb: &FeatureMap, ir: &FeatureMap) -> (String, String) {
    let (a, b) = (dir.join("rgb.fmp"), dir.join("ir.fmp"));
    fmp::write(&a, rgb).unwrap();
    fmp::write(&b, ir).unwrap();
    (a.display().to_string(), b.display().to_string())
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

#[test]
fn fuse_add_is_elementwise_sum() {
    let dir = tempfile::tempdir().unwrap();
    let (rgb, ir) = (map(4, 5, 6, 0.0), map(4, 5, 6, 1.3));
    let (a, b) = write_pair(dir.path(), &rgb, &ir);
    let out = dir.path().join("f.fmp");
    let o = fsmod(&["fuse", "--rgb", &a, "--ir", &b, "--mode", "add", "--out", &p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let fused = fmp::read(&out).unwrap();
    let want = FeatureMap::from_fn(4, 5, 6, |c, i, j| rgb.at(c, i, j) + ir.at(c, i, j));
    assert_eq!(fused, want);
    assert!(stdout(&o).contains("shape 4 5 6"));
}

#[test]
fn fuse_checksum_is_stable_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path(), &map(4, 6, 6, 0.2), &map(4, 6, 6, 0.9));
    let out = p(&dir.path().join("f.fmp"));
    let run = || stdout(&fsmod(&["--seed", "5", "fuse", "--rgb", &a, "--ir", &b, "--mode", "cda", "--out", &out]));
    let first = run();
    assert!(first.contains("checksum "));
    assert_eq!(first, run());
}

#[test]
fn fuse_cda_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (rgb, ir) = (map(4, 6, 8, 0.4), map(4, 6, 8, 2.1));
    let (a, b) = write_pair(dir.path(), &rgb, &ir);
    let out = dir.path().join("f.fmp");
    let o = fsmod(&["--seed", "11", "fuse", "--rgb", &a, "--ir", &b, "--mode", "cda", "--out", &p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let cfg = FusionConfig::new(4, FusionMode::Cda, 3, 2, 0.5, 5).unwrap();
    let mut store = ParamStore::new(11);
    cfg.init_params(&mut store).unwrap();
    let lib = fusion_forward(&rgb, &ir, &cfg, &store).unwrap();
    assert_eq!(fmp::read(&out).unwrap(), lib);
    assert!(stdout(&o).contains(&format!("checksum {:016x}", fmp::checksum(&lib))));
}

#[test]
fn fuse_with_saved_params_uses_them() {
    let dir = tempfile::tempdir().unwrap();
    let (rgb, ir) = (map(3, 5, 5, 0.1), map(3, 5, 5, 0.7));
    let (a, b) = write_pair(dir.path(), &rgb, &ir);
    let cfg = FusionConfig::new(3, FusionMode::Concat, 3, 2, 0.5, 5).unwrap();
    let mut store = ParamStore::new(99);
    cfg.init_params(&mut store).unwrap();
    let params = dir.path().join("p.json");
    store.save(&params).unwrap();
    let out = dir.path().join("f.fmp");
    let o = fsmod(&["fuse", "--rgb", &a, "--ir", &b, "--mode", "concat", "--params", &p(&params), "--out", &p(&out)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(fmp::read(&out).unwrap(), fuse_pair(&rgb, &ir, &cfg, &store).unwrap());
}

#[test]
fn fuse_shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path(), &map(4, 5, 6, 0.0), &map(4, 5, 5, 0.0));
    let o = fsmod(&["fuse", "--rgb", &a, "--ir", &b, "--mode", "add", "--out", &p(&dir.path().join("f.fmp"))]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn missing_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(&dir.path().join("none.fmp"));
    let o = fsmod(&["fuse", "--rgb", &missing, "--ir", &missing, "--out", &p(&dir.path().join("f.fmp"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_flags_and_keys_are_rejected() {
    assert_eq!(fsmod(&["selftest", "--bogus"]).status.code(), Some(2));
    assert_eq!(fsmod(&["--set", "train.nope=1", "selftest"]).status.code(), Some(2));
    assert_eq!(fsmod(&["--set", "train.lr", "selftest"]).status.code(), Some(2));
}

const GTS: &str = "# image_id class_id x1 y1 x2 y2\n0 1 0 0 2 2\n0 1 10 0 12 2\n0 1 20 0 22 2\n";

fn eval(dets: &str) -> Output {
    let dir = tempfile::tempdir().unwrap();
    let (d, g) = (dir.path().join("dets.txt"), dir.path().join("gts.txt"));
    fs::write(&d, dets).unwrap();
    fs::write(&g, GTS).unwrap();
    fsmod(&["eval", "--dets", &p(&d), "--gts", &p(&g), "--novel", "1"])
}

#[test]
fn eval_perfect_empty_and_hand_case() {
    let perfect = "0 1 1.0 0 0 2 2\n0 1 1.0 10 0 12 2\n0 1 1.0 20 0 22 2\n";
    assert!(stdout(&eval(perfect)).contains("nAP50 1.0000"));
    assert!(stdout(&eval("")).contains("nAP50 0.0000"));
    let hand = "0 1 0.9 0 0 2 2\n0 1 0.8 50 0 52 2\n0 1 0.7 10 0 12 2\n0 1 0.6 20 0 22 2\n";
    let o = eval(hand);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "class AP50\n1 0.8333\nnAP50 0.8333\n");
}

#[test]
fn eval_parse_error_names_the_line() {
    let o = eval("0 1 0.9 0 0 2 2\n0 1 oops 0 0 2 2\n");
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("dets.txt:2"), "{err}");
}

#[test]
fn every_run_echoes_the_resolved_config() {
    let o = fsmod(&["--seed", "17", "--set", "fusion.s=0.25", "selftest"]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("# seed = 17"));
    assert!(err.contains("# fusion.s = 0.25"));
}

#[test]
fn selftest_passes_and_reports_every_check() {
    let o = fsmod(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), selftest::registry().len());
    assert!(out.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn corrupted_softmax_fails_the_softmax_check() {
    let o = fsmod(&["selftest", "--corrupt-softmax"]);
    assert_ne!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), selftest::registry().len());
    assert!(out.lines().any(|l| l.starts_with("FAIL softmax ")), "{out}");
}

#[test]
fn gradcheck_prints_one_line_per_audit_and_seed() {
    let o = fsmod(&["gradcheck", "--seeds", "2", "--only", "na_forward"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().all(|l| l.starts_with("PASS na_forward seed ")));
    assert_eq!(fsmod(&["gradcheck", "--only", "nope"]).status.code(), Some(2));
}

#[test]
fn gen_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let dets = dir.path().join("dets.txt");
    let quick = ["--set", "train.base_steps=20", "--set", "train.finetune_steps=20"];
    assert!(fsmod(&["--seed", "1", "gen", "--out", &p(&data)]).status.success());
    let index = p(&data.join("annotations.txt"));
    let model_dir = p(&model);
    let mut args = vec!["--seed", "2"];
    args.extend(quick);
    args.extend(["train", "--data", &index, "--out", &model_dir]);
    let o = fsmod(&args);
    assert!(o.status.success(), "{o:?}");
    for f in ["params.json", "train.log", "prototypes.fmp", "config.txt"] {
        assert!(model.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(model.join("train.log")).unwrap().lines().count(), 41);
    assert!(fsmod(&["infer", "--data", &index, "--model", &model_dir, "--out", &p(&dets)]).status.success());
    let o = fsmod(&["eval", "--dets", &p(&dets), "--gts", &p(&data.join("gts.txt"))]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("class AP50\n2 "));
}
