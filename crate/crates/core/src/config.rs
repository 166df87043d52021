//! Flat `key = value` run configuration with namespaced keys.
//!
//! Every key has a default, so an empty file is a complete configuration.
//! Unknown and repeated keys are rejected. [`RunConfig::echo`] prints every
//! resolved value in a form [`RunConfig::parse`] reads back.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::harness::data::{Modality, SynthConfig};
use crate::harness::episode::SplitSpec;
use crate::harness::model::{LossWeights, ModelConfig};
use crate::harness::train::TrainConfig;
use crate::prototype::{GateMode, COSINE_SCALE};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: SynthConfig,
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
    pub mode: FusionMode,
    pub window: usize,
    pub stride: usize,
    pub offset_scale: f64,
    pub offset_kernel: usize,
    pub gate: GateMode,
    pub alpha: f64,
    pub weights: LossWeights,
    pub score_thr: f64,
    /// `train.seed` is ignored; the master seed above is used.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gen: SynthConfig::default(),
            base: vec![0, 1],
            novel: vec![2],
            mode: FusionMode::Cda,
            window: 3,
            stride: 2,
            offset_scale: 0.5,
            offset_kernel: 5,
            gate: GateMode::FilterQuery,
            alpha: COSINE_SCALE,
            weights: LossWeights::default(),
            score_thr: 0.05,
            train: TrainConfig::default(),
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "gen.classes",
    "gen.images",
    "gen.channels",
    "gen.height",
    "gen.width",
    "gen.objects",
    "gen.object_size",
    "gen.noise",
    "gen.first_id",
    "gen.ablate",
    "split.base",
    "split.novel",
    "fusion.mode",
    "fusion.window",
    "fusion.r",
    "fusion.s",
    "fusion.k_off",
    "cam.gate",
    "model.alpha",
    "loss.meta",
    "loss.cls",
    "loss.box",
    "episode.t_max",
    "episode.shots",
    "train.base_steps",
    "train.finetune_steps",
    "train.lr",
    "train.clip",
    "train.k",
    "train.seeds",
    "train.support_set",
    "infer.score_thr",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn ids(key: &str, v: &str) -> Result<Vec<u32>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "gen.classes" => self.gen.classes = num(key, v)?,
            "gen.images" => self.gen.images = num(key, v)?,
            "gen.channels" => self.gen.channels = num(key, v)?,
            "gen.height" => self.gen.height = num(key, v)?,
            "gen.width" => self.gen.width = num(key, v)?,
            "gen.objects" => self.gen.objects_per_image = num(key, v)?,
            "gen.object_size" => self.gen.object_size = num(key, v)?,
            "gen.noise" => self.gen.noise = num(key, v)?,
            "gen.first_id" => self.gen.first_id = num(key, v)?,
            "gen.ablate" => {
                self.gen.ablate = match v {
                    "none" => None,
                    m => Some(m.parse::<Modality>()?),
                }
            }
            "split.base" => self.base = ids(key, v)?,
            "split.novel" => self.novel = ids(key, v)?,
            "fusion.mode" => self.mode = v.parse()?,
            "fusion.window" => self.window = num(key, v)?,
            "fusion.r" => self.stride = num(key, v)?,
            "fusion.s" => self.offset_scale = num(key, v)?,
            "fusion.k_off" => self.offset_kernel = num(key, v)?,
            "cam.gate" => self.gate = v.parse()?,
            "model.alpha" => self.alpha = num(key, v)?,
            "loss.meta" => self.weights.meta = num(key, v)?,
            "loss.cls" => self.weights.cls = num(key, v)?,
            "loss.box" => self.weights.bbox = num(key, v)?,
            "episode.t_max" => self.train.episode.t_max = num(key, v)?,
            "episode.shots" => self.train.episode.shots = num(key, v)?,
            "train.base_steps" => self.train.base_steps = num(key, v)?,
            "train.finetune_steps" => self.train.finetune_steps = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.clip" => {
                let c: f64 = num(key, v)?;
                self.train.clip = (c > 0.0).then_some(c);
            }
            "train.k" => self.train.k = num(key, v)?,
            "train.seeds" => self.train.n_seeds = num(key, v)?,
            "train.support_set" => self.train.active_set = num(key, v)?,
            "infer.score_thr" => self.score_thr = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "gen.classes" => self.gen.classes.to_string(),
            "gen.images" => self.gen.images.to_string(),
            "gen.channels" => self.gen.channels.to_string(),
            "gen.height" => self.gen.height.to_string(),
            "gen.width" => self.gen.width.to_string(),
            "gen.objects" => self.gen.objects_per_image.to_string(),
            "gen.object_size" => self.gen.object_size.to_string(),
            "gen.noise" => self.gen.noise.to_string(),
            "gen.first_id" => self.gen.first_id.to_string(),
            "gen.ablate" => self.gen.ablate.map_or("none".into(), |m| m.to_string()),
            "split.base" => join(&self.base),
            "split.novel" => join(&self.novel),
            "fusion.mode" => self.mode.to_string(),
            "fusion.window" => self.window.to_string(),
            "fusion.r" => self.stride.to_string(),
            "fusion.s" => self.offset_scale.to_string(),
            "fusion.k_off" => self.offset_kernel.to_string(),
            "cam.gate" => self.gate.to_string(),
            "model.alpha" => self.alpha.to_string(),
            "loss.meta" => self.weights.meta.to_string(),
            "loss.cls" => self.weights.cls.to_string(),
            "loss.box" => self.weights.bbox.to_string(),
            "episode.t_max" => self.train.episode.t_max.to_string(),
            "episode.shots" => self.train.episode.shots.to_string(),
            "train.base_steps" => self.train.base_steps.to_string(),
            "train.finetune_steps" => self.train.finetune_steps.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.clip" => self.train.clip.unwrap_or(0.0).to_string(),
            "train.k" => self.train.k.to_string(),
            "train.seeds" => self.train.n_seeds.to_string(),
            "train.support_set" => self.train.active_set.to_string(),
            "infer.score_thr" => self.score_thr.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Applies the assignments in `text` on top of the defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text, path)?;
        Ok(cfg)
    }

    /// Applies the assignments in `text` on top of `self`.
    pub fn apply(&mut self, text: &str, path: &Path) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(err(format!("key {key:?} set twice")));
            }
            seen.push(key);
            self.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn split(&self) -> Result<SplitSpec> {
        let s = SplitSpec::new(&self.base, &self.novel)?;
        if let Some(&c) = s.all().iter().find(|&&c| c as usize >= self.gen.classes) {
            return Err(Error::Config(format!("split class {c} outside {} classes", self.gen.classes)));
        }
        Ok(s)
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        FusionConfig::new(
            self.gen.channels,
            self.mode,
            self.window,
            self.stride,
            self.offset_scale,
            self.offset_kernel,
        )
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(self.fusion()?, self.gen.classes);
        m.cam.gate = self.gate;
        m.alpha = self.alpha;
        m.weights = self.weights;
        m.score_thr = self.score_thr;
        m.t_max = self.train.episode.t_max;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("model.alpha {} must be positive", self.alpha)));
        }
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be >= 0", t.lr)));
        }
        if t.n_seeds == 0 || t.active_set >= t.n_seeds {
            return Err(Error::Config(format!(
                "train.support_set {} must index one of {} support sets",
                t.active_set, t.n_seeds
            )));
        }
        Ok(TrainConfig {
            seed: self.seed,
            ..t.clone()
        })
    }
}
