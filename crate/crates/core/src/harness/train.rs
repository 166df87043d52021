//! Two-stage episodic training with plain gradient descent.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::harness::data::{DatasetIndex, MapStore};
use crate::harness::episode::{build_supports, sample_episode, Episode, EpisodeConfig, SplitSpec, Stage, SupportSet};
use crate::harness::model::{init_model, train_loss, train_loss_graph, ModelConfig};
use crate::harness::rng_stream;
use crate::params::ParamStore;

/// Schedule and sampling settings of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_steps: usize,
    pub finetune_steps: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub episode: EpisodeConfig,
    /// Shots per class in each support set.
    pub k: usize,
    pub n_seeds: usize,
    /// Which support set fine-tuning draws from.
    pub active_set: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_steps: 600,
            finetune_steps: 500,
            lr: 0.05,
            clip: Some(10.0),
            episode: EpisodeConfig::default(),
            k: 5,
            n_seeds: 10,
            active_set: 0,
            seed: 0,
        }
    }
}

/// Loss of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<LogEntry>,
    pub supports: Vec<SupportSet>,
}

const EPISODE_STREAM: u64 = 1 << 40;

/// Independent episode stream for `stage`.
pub fn episode_rng(seed: u64, stage: Stage) -> rand_chacha::ChaCha8Rng {
    rng_stream(
        seed,
        EPISODE_STREAM
            + match stage {
                Stage::Base => 0,
                Stage::Finetune => 1,
            },
    )
}

/// Samples `n` episodes of `stage` from a dedicated stream (e.g. a fixed
/// evaluation set).
pub fn fixed_episodes(
    index: &DatasetIndex,
    split: &SplitSpec,
    stage: Stage,
    active: Option<&SupportSet>,
    cfg: EpisodeConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = rng_stream(seed, EPISODE_STREAM + 2);
    (0..n).map(|_| sample_episode(index, split, stage, active, cfg, &mut rng)).collect()
}

/// Mean loss over `episodes`.
pub fn mean_loss(episodes: &[Episode], maps: &MapStore, cfg: &ModelConfig, store: &ParamStore) -> Result<f64> {
    let mut acc = 0.0;
    for e in episodes {
        acc += train_loss(e, maps, cfg, store)?;
    }
    Ok(acc / episodes.len().max(1) as f64)
}

/// One gradient-descent step on `episode`; returns the pre-update loss.
pub fn sgd_step(
    episode: &Episode,
    maps: &MapStore,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let l = train_loss_graph(&mut g, episode, maps, cfg, store)?;
    let loss = g.scalar(l.total);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss {loss}")));
    }
    g.backward_into(l.total, store)?;
    if let Some(c) = clip {
        store.clip_grad_norm(c);
    }
    store.sgd_step(lr);
    Ok(loss)
}

/// Base meta-learning on base-class episodes, then fine-tuning on
/// base ∪ novel episodes restricted to one support set.
pub fn run_training(
    index: &DatasetIndex,
    maps: &MapStore,
    split: &SplitSpec,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let supports = build_supports(index, split, cfg.k, cfg.n_seeds, cfg.seed)?;
    let active = supports
        .get(cfg.active_set)
        .ok_or_else(|| Error::Config(format!("active support set {} of {}", cfg.active_set, supports.len())))?;
    let mut params = init_model(model, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.base_steps + cfg.finetune_steps);
    for (stage, steps) in [(Stage::Base, cfg.base_steps), (Stage::Finetune, cfg.finetune_steps)] {
        let mut rng = episode_rng(cfg.seed, stage);
        for step in 0..steps {
            let ep = sample_episode(index, split, stage, (stage == Stage::Finetune).then_some(active), cfg.episode, &mut rng)?;
            let global = log.len();
            let loss = match sgd_step(&ep, maps, model, &mut params, cfg.lr, cfg.clip) {
                Ok(l) => l,
                Err(Error::Numeric(_)) => return Err(Error::Diverged { step: global, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !params.is_finite() {
                return Err(Error::Diverged { step: global, loss });
            }
            log.push(LogEntry { stage, step, loss });
        }
    }
    Ok(TrainOutcome { params, log, supports })
}

/// `stage step loss` lines with full round-trip precision.
pub fn format_log(log: &[LogEntry]) -> String {
    let mut s = String::from("# stage step loss\n");
    for e in log {
        let _ = writeln!(s, "{} {} {:?}", e.stage, e.step, e.loss);
    }
    s
}
