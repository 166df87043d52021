//! Base/novel splits, K-shot support sets and episode sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{Box2, GroundTruth};
use crate::harness::data::DatasetIndex;
use crate::harness::rng_stream;
use crate::prototype::SupportBox;

/// Disjoint, nonempty base and novel class sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    base: BTreeSet<u32>,
    novel: BTreeSet<u32>,
}

impl SplitSpec {
    pub fn new(base: &[u32], novel: &[u32]) -> Result<Self> {
        let base: BTreeSet<u32> = base.iter().copied().collect();
        let novel: BTreeSet<u32> = novel.iter().copied().collect();
        if base.is_empty() || novel.is_empty() {
            return Err(Error::Config("base and novel class sets must be nonempty".into()));
        }
        if let Some(c) = base.intersection(&novel).next() {
            return Err(Error::Config(format!("class {c} is both base and novel")));
        }
        Ok(Self { base, novel })
    }

    pub fn base(&self) -> Vec<u32> {
        self.base.iter().copied().collect()
    }

    pub fn novel(&self) -> Vec<u32> {
        self.novel.iter().copied().collect()
    }

    /// Base then novel, each ascending.
    pub fn all(&self) -> Vec<u32> {
        self.base.iter().chain(&self.novel).copied().collect()
    }

    pub fn is_novel(&self, class: u32) -> bool {
        self.novel.contains(&class)
    }

    fn check(&self) -> Result<()> {
        if self.base.is_disjoint(&self.novel) {
            Ok(())
        } else {
            Err(Error::Config("base and novel sets overlap".into()))
        }
    }
}

/// One annotated object usable as a support exemplar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub image_id: u32,
    pub bbox: Box2,
}

impl Instance {
    pub fn support_box(&self, class: u32) -> SupportBox {
        SupportBox::new(self.bbox.x1, self.bbox.y1, self.bbox.x2, self.bbox.y2, class)
    }
}

/// `K` instances per class drawn for one support seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub seed: u64,
    pub shots: usize,
    pub per_class: BTreeMap<u32, Vec<Instance>>,
}

impl SupportSet {
    pub fn contains(&self, class: u32, image_id: u32, bbox: &Box2) -> bool {
        self.per_class
            .get(&class)
            .is_some_and(|v| v.iter().any(|i| i.image_id == image_id && i.bbox == *bbox))
    }
}

/// Every instance of `class`, in image then annotation order.
pub fn class_instances(index: &DatasetIndex, class: u32) -> Vec<Instance> {
    index
        .ground_truth()
        .into_iter()
        .filter(|g| g.class_id == class)
        .map(|g| Instance {
            image_id: g.image_id,
            bbox: g.bbox,
        })
        .collect()
}

/// Draws `n_seeds` support sets of exactly `k` instances per class (base and
/// novel) without replacement. Seed `i` uses its own stream of `master_seed`.
pub fn build_supports(
    index: &DatasetIndex,
    split: &SplitSpec,
    k: usize,
    n_seeds: usize,
    master_seed: u64,
) -> Result<Vec<SupportSet>> {
    if k == 0 {
        return Err(Error::Config("shot count K must be >= 1".into()));
    }
    let pools: Vec<(u32, Vec<Instance>)> = split.all().into_iter().map(|c| (c, class_instances(index, c))).collect();
    for (class, pool) in &pools {
        if pool.len() < k {
            return Err(Error::InsufficientData {
                class: *class,
                available: pool.len(),
                required: k,
            });
        }
    }
    Ok((0..n_seeds)
        .map(|i| {
            let mut rng = rng_stream(master_seed, SUPPORT_STREAM + i as u64);
            let per_class = pools
                .iter()
                .map(|(class, pool)| {
                    let mut picks = index::sample(&mut rng, pool.len(), k).into_vec();
                    picks.sort_unstable();
                    (*class, picks.into_iter().map(|p| pool[p]).collect())
                })
                .collect();
            SupportSet {
                seed: i as u64,
                shots: k,
                per_class,
            }
        })
        .collect())
}

const SUPPORT_STREAM: u64 = 1 << 32;

/// Notes for pairs of support seeds that drew identical instances for a class.
pub fn duplicate_support_notes(sets: &[SupportSet]) -> Vec<String> {
    let mut notes = Vec::new();
    for (a, sa) in sets.iter().enumerate() {
        for sb in &sets[a + 1..] {
            for (class, inst) in &sa.per_class {
                if sb.per_class.get(class) == Some(inst) {
                    notes.push(format!(
                        "note: support seeds {} and {} drew identical instances for class {class}",
                        sa.seed, sb.seed
                    ));
                }
            }
        }
    }
    notes
}

/// Training stage an episode is drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Base,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Finetune => "finetune",
        })
    }
}

/// Episode size limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    /// Maximum number of class slots.
    pub t_max: usize,
    /// Support exemplars per slot used for the episode's prototypes.
    pub shots: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { t_max: 4, shots: 2 }
    }
}

/// One sampled task: slot classes with their supports and a query image.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Class id of each slot, in slot order.
    pub slots: Vec<u32>,
    /// `(image_id, box)` support exemplars; `box.class` is the class id.
    pub support: Vec<(u32, SupportBox)>,
    pub query: u32,
    /// Query ground truth restricted to slot classes.
    pub query_gt: Vec<GroundTruth>,
    /// Novel boxes in the query that lie outside the active support set.
    /// They carry no label and are masked out of the objectness loss.
    pub ignore: Vec<Box2>,
}

impl Episode {
    pub fn slot_of(&self, class: u32) -> Option<usize> {
        self.slots.iter().position(|&c| c == class)
    }

    /// Distinct images the support branch reads.
    pub fn support_images(&self) -> Vec<u32> {
        let s: BTreeSet<u32> = self.support.iter().map(|(i, _)| *i).collect();
        s.into_iter().collect()
    }
}

/// Samples one episode.
///
/// Base episodes draw slots from base classes, supports from the whole index
/// and queries only from images without novel objects, which would otherwise
/// be learned as background. Fine-tune episodes draw slots from base ∪ novel, take every support
/// from `active`, and only use query images whose novel objects all belong to
/// `active`, so no other novel annotation is ever seen.
pub fn sample_episode(
    index: &DatasetIndex,
    split: &SplitSpec,
    stage: Stage,
    active: Option<&SupportSet>,
    cfg: EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    split.check()?;
    if cfg.t_max == 0 || cfg.shots == 0 {
        return Err(Error::Config("t_max and episode shots must be >= 1".into()));
    }
    let active = match stage {
        Stage::Base => None,
        Stage::Finetune => Some(active.ok_or_else(|| Error::Sampling("fine-tune episode needs a support set".into()))?),
    };
    let query_ok = |img: &crate::harness::data::ImageRecord| match active {
        None => !img.boxes.iter().any(|b| split.is_novel(b.class_id)),
        // base-only images, or images holding at least one active-set instance
        Some(s) => {
            !img.boxes.iter().any(|b| split.is_novel(b.class_id))
                || img.boxes.iter().any(|b| s.contains(b.class_id, b.image_id, &b.bbox))
        }
    };
    let labelled = |b: &GroundTruth| match active {
        Some(s) if split.is_novel(b.class_id) => s.contains(b.class_id, b.image_id, &b.bbox),
        _ => true,
    };
    let pool: Vec<u32> = match stage {
        Stage::Base => split.base(),
        Stage::Finetune => split.all(),
    };
    // classes with at least one usable query image and one support exemplar
    let eligible: Vec<u32> = pool
        .into_iter()
        .filter(|&c| {
            let has_support = match active {
                None => index.images.iter().any(|r| r.boxes.iter().any(|b| b.class_id == c)),
                Some(s) => s.per_class.get(&c).is_some_and(|v| !v.is_empty()),
            };
            has_support
                && index
                    .images
                    .iter()
                    .any(|r| query_ok(r) && r.boxes.iter().any(|b| labelled(b) && b.class_id == c))
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling(format!("no eligible classes for a {stage} episode")));
    }
    let n_slots = cfg.t_max.min(eligible.len());
    let mut slots: Vec<u32> = index::sample(rng, eligible.len(), n_slots)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    slots.shuffle(rng);

    let queries: Vec<u32> = index
        .images
        .iter()
        .filter(|r| query_ok(r) && r.boxes.iter().any(|b| labelled(b) && slots.contains(&b.class_id)))
        .map(|r| r.image_id)
        .collect();
    if queries.is_empty() {
        return Err(Error::Sampling(format!("no query image contains classes {slots:?}")));
    }
    let query = queries[rng.random_range(0..queries.len())];
    let record = index.get(query).expect("query from index");
    let query_gt: Vec<GroundTruth> = record
        .boxes
        .iter()
        .filter(|b| labelled(b) && slots.contains(&b.class_id))
        .copied()
        .collect();
    let ignore: Vec<Box2> = record.boxes.iter().filter(|b| !labelled(b)).map(|b| b.bbox).collect();

    let mut support = Vec::new();
    for &class in &slots {
        let candidates: Vec<Instance> = match active {
            Some(s) => s.per_class[&class].clone(),
            None => {
                let all = class_instances(index, class);
                let elsewhere: Vec<Instance> = all.iter().filter(|i| i.image_id != query).copied().collect();
                if elsewhere.is_empty() {
                    all
                } else {
                    elsewhere
                }
            }
        };
        let n = cfg.shots.min(candidates.len());
        let mut picks = index::sample(rng, candidates.len(), n).into_vec();
        picks.sort_unstable();
        support.extend(picks.into_iter().map(|p| {
            let inst = candidates[p];
            (inst.image_id, inst.support_box(class))
        }));
    }
    Ok(Episode {
        slots,
        support,
        query,
        query_gt,
        ignore,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::ImageRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_index(classes_per_image: &[&[u32]]) -> DatasetIndex {
        DatasetIndex {
            images: classes_per_image
                .iter()
                .enumerate()
                .map(|(i, cs)| ImageRecord {
                    image_id: i as u32,
                    rgb: format!("{i}r").into(),
                    ir: format!("{i}i").into(),
                    condition: String::new(),
                    boxes: cs
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| GroundTruth {
                            image_id: i as u32,
                            class_id: c,
                            bbox: Box2::new(k as f64 * 4.0, 0.0, k as f64 * 4.0 + 3.0, 3.0).unwrap(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn split_rejects_overlap_and_empty() {
        assert!(SplitSpec::new(&[0, 1], &[1]).is_err());
        assert!(SplitSpec::new(&[], &[1]).is_err());
        assert_eq!(SplitSpec::new(&[1, 0], &[2]).unwrap().all(), vec![0, 1, 2]);
    }

    #[test]
    fn exhaustive_draw_takes_whole_class() {
        let idx = toy_index(&[&[0, 1], &[0], &[1, 0]]);
        let split = SplitSpec::new(&[0], &[1]).unwrap();
        for s in build_supports(&idx, &split, 2, 3, 7).unwrap() {
            assert_eq!(s.per_class[&1], class_instances(&idx, 1));
        }
    }

    #[test]
    fn insufficient_instances_named() {
        let idx = toy_index(&[&[0, 1], &[0]]);
        let split = SplitSpec::new(&[0], &[1]).unwrap();
        match build_supports(&idx, &split, 2, 1, 0) {
            Err(Error::InsufficientData {
                class: 1,
                available: 1,
                required: 2,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_class_episodes() {
        let idx = toy_index(&[&[0], &[0, 0]]);
        let split = SplitSpec::new(&[0], &[9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let e = sample_episode(&idx, &split, Stage::Base, None, EpisodeConfig::default(), &mut rng).unwrap();
            assert_eq!(e.slots, vec![0]);
            assert!(!e.query_gt.is_empty());
        }
    }

    #[test]
    fn finetune_needs_support_set() {
        let idx = toy_index(&[&[0, 1]]);
        let split = SplitSpec::new(&[0], &[1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_episode(&idx, &split, Stage::Finetune, None, EpisodeConfig::default(), &mut rng),
            Err(Error::Sampling(_))
        ));
    }
}
