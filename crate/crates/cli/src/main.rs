use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fsmod_core::audit;
use fsmod_core::config::RunConfig;
use fsmod_core::eval::{format_detections, nap50, read_detections, read_ground_truth};
use fsmod_core::fmp;
use fsmod_core::fusion::{fuse_pair, FusionConfig, FusionMode};
use fsmod_core::harness::data::GT_FILE;
use fsmod_core::harness::model::precompute_prototypes;
use fsmod_core::harness::train::format_log;
use fsmod_core::harness::{generate_synthetic, infer, load_index, run_training};
use fsmod_core::prototype::PrototypeSet;
use fsmod_core::{selftest, Error, ParamStore, Result};

const PARAMS_FILE: &str = "params.json";
const LOG_FILE: &str = "train.log";
const PROTO_FILE: &str = "prototypes.fmp";
const CONFIG_FILE: &str = "config.txt";

/// Few-shot RGB/IR detection toolkit.
#[derive(Parser)]
#[command(name = "fsmod", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic paired-modality dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse one RGB/IR pair of FMP1 maps.
    Fuse {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        /// cda, concat or add; defaults to `fusion.mode`.
        #[arg(long)]
        mode: Option<FusionMode>,
        /// Parameter store (JSON); seed-initialised when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Base training then fine-tuning on one support set.
    Train {
        /// Annotation index.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect on every image of an index with a trained model.
    Infer {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class AP50 and nAP50 over the novel classes.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        /// Comma-separated novel ids; defaults to `split.novel`.
        #[arg(long)]
        novel: Option<String>,
    },
    /// Run every registered check.
    Selftest {
        #[arg(long, hide = true)]
        corrupt_softmax: bool,
    },
    /// Finite-difference gradient audits.
    Gradcheck {
        /// Seeds per audit.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Run only this audit.
        #[arg(long)]
        only: Option<String>,
    },
}

fn resolve(base: RunConfig, g: &Global) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(p) = &g.config {
        cfg.apply(&fs::read_to_string(p)?, p)?;
    }
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    for line in cfg.echo().lines() {
        eprintln!("# {line}");
    }
    Ok(cfg)
}

fn fuse(cfg: &RunConfig, rgb: &Path, ir: &Path, mode: Option<FusionMode>, params: Option<&Path>, out: &Path) -> Result<()> {
    let a = fmp::read(rgb)?;
    let b = fmp::read(ir)?;
    let fc = FusionConfig::new(a.shape().0, mode.unwrap_or(cfg.mode), cfg.window, cfg.stride, cfg.offset_scale, cfg.offset_kernel)?;
    let store = match params {
        Some(p) => ParamStore::load(p)?,
        None => {
            let mut s = ParamStore::new(cfg.seed);
            fc.init_params(&mut s)?;
            s
        }
    };
    let f = fuse_pair(&a, &b, &fc, &store)?;
    fmp::write(out, &f)?;
    let (d, h, w) = f.shape();
    println!("shape {d} {h} {w}");
    println!("checksum {:016x}", fmp::checksum(&f));
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let index = load_index(data)?;
    let maps = index.load_maps()?;
    let split = cfg.split()?;
    let model = cfg.model()?;
    let run = run_training(&index, &maps, &split, &model, &cfg.train_config()?)?;
    let protos = precompute_prototypes(&run.supports, &split.all(), &maps, &model, &run.params)?;
    fs::create_dir_all(out)?;
    run.params.save(&out.join(PARAMS_FILE))?;
    fs::write(out.join(LOG_FILE), format_log(&run.log))?;
    protos.save(&out.join(PROTO_FILE))?;
    fs::write(out.join(CONFIG_FILE), cfg.echo())?;
    let last = run.log.last().map_or(f64::NAN, |e| e.loss);
    println!("steps {} final_loss {last:.6}", run.log.len());
    Ok(())
}

fn infer_all(cfg: &RunConfig, data: &Path, model_dir: &Path, out: &Path) -> Result<()> {
    let index = load_index(data)?;
    let model = cfg.model()?;
    let store = ParamStore::load(&model_dir.join(PARAMS_FILE))?;
    let protos = PrototypeSet::load(&model_dir.join(PROTO_FILE))?;
    let mut images: Vec<_> = index.images.iter().collect();
    images.sort_by_key(|r| r.image_id);
    let mut dets = Vec::new();
    for r in images {
        let (a, b) = (fmp::read(&r.rgb)?, fmp::read(&r.ir)?);
        dets.extend(infer(r.image_id, &a, &b, &protos, &model, &store)?);
    }
    fs::write(out, format_detections(&dets))?;
    println!("images {} detections {}", index.len(), dets.len());
    Ok(())
}

fn eval(cfg: &RunConfig, dets: &Path, gts: &Path, novel: Option<&str>) -> Result<()> {
    let novel = match novel {
        Some(s) => {
            let mut c = RunConfig::default();
            c.set("split.novel", s)?;
            c.novel
        }
        None => cfg.novel.clone(),
    };
    let report = nap50(&read_detections(dets)?, &read_ground_truth(gts)?, &novel)?;
    print!("{}", report.to_table());
    Ok(())
}

fn gradcheck(seeds: u64, only: Option<&str>) -> Result<bool> {
    let names: Vec<&'static str> = match only {
        Some(n) => vec![*audit::AUDITS
            .iter()
            .find(|a| **a == n)
            .ok_or_else(|| Error::Config(format!("unknown audit {n:?}; expected one of {:?}", audit::AUDITS)))?],
        None => audit::AUDITS.to_vec(),
    };
    let mut ok = true;
    for name in names {
        for seed in 0..seeds {
            let r = audit::run(name, seed)?;
            ok &= r.passed();
            println!("{}", r.line());
        }
    }
    Ok(ok)
}

/// Exit code of a run whose checks completed: 0, or the validation code 2
/// when a self-test check failed, or the numeric code 3 when an audit failed.
fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.cmd {
        Cmd::Gen { out } => {
            let cfg = resolve(RunConfig::default(), g)?;
            let index = generate_synthetic(&cfg.gen, cfg.seed, out)?;
            println!("images {} gts {}", index.len(), out.join(GT_FILE).display());
        }
        Cmd::Fuse { rgb, ir, mode, params, out } => {
            let cfg = resolve(RunConfig::default(), g)?;
            fuse(&cfg, rgb, ir, *mode, params.as_deref(), out)?;
        }
        Cmd::Train { data, out } => train(&resolve(RunConfig::default(), g)?, data, out)?,
        Cmd::Infer { data, model, out } => {
            let cfg = resolve(RunConfig::load(&model.join(CONFIG_FILE))?, g)?;
            infer_all(&cfg, data, model, out)?;
        }
        Cmd::Eval { dets, gts, novel } => eval(&resolve(RunConfig::default(), g)?, dets, gts, novel.as_deref())?,
        Cmd::Selftest { corrupt_softmax } => {
            resolve(RunConfig::default(), g)?;
            fsmod_core::fault::set_softmax_corruption(*corrupt_softmax);
            let results = selftest::run_all();
            for r in &results {
                println!("{}", r.line());
            }
            return Ok(if results.iter().all(|r| r.passed) { 0 } else { 2 });
        }
        Cmd::Gradcheck { seeds, only } => {
            resolve(RunConfig::default(), g)?;
            return Ok(if gradcheck(*seeds, only.as_deref())? { 0 } else { 3 });
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
