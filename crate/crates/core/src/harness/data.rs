//! Paired RGB/IR feature-map datasets: the annotation index, on-disk I/O and
//! the synthetic generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{Box2, GroundTruth};
use crate::fmp;
use crate::harness::rng_stream;
use crate::tensor::FeatureMap;

/// One of the two input spectra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Ir,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
        })
    }
}

/// Annotation of one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u32,
    pub rgb: PathBuf,
    pub ir: PathBuf,
    pub condition: String,
    pub boxes: Vec<GroundTruth>,
}

/// All annotated image pairs, ordered by image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub images: Vec<ImageRecord>,
}

/// Decoded `(rgb, ir)` maps keyed by image id.
pub type MapStore = BTreeMap<u32, (FeatureMap, FeatureMap)>;

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: u32) -> Option<&ImageRecord> {
        self.images
            .binary_search_by_key(&image_id, |r| r.image_id)
            .ok()
            .map(|i| &self.images[i])
    }

    /// Every ground-truth box, in image then annotation order.
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.images.iter().flat_map(|r| r.boxes.iter().copied()).collect()
    }

    /// Sorted class ids that occur in the index.
    pub fn classes(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.ground_truth().iter().map(|g| g.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Reads every referenced map and checks pairing and box bounds.
    pub fn load_maps(&self) -> Result<MapStore> {
        let mut out = MapStore::new();
        for r in &self.images {
            let rgb = fmp::read(&r.rgb)?;
            let ir = fmp::read(&r.ir)?;
            if rgb.shape() != ir.shape() {
                return Err(Error::shape("load_maps", rgb.shape(), ir.shape()));
            }
            let (_, h, w) = rgb.shape();
            for b in &r.boxes {
                if b.bbox.x2 > w as f64 || b.bbox.y2 > h as f64 || b.bbox.x1 < 0.0 || b.bbox.y1 < 0.0 {
                    return Err(Error::pre(
                        "load_maps",
                        format!("image {}: box {:?} outside {h}x{w} map", r.image_id, b.bbox),
                    ));
                }
            }
            out.insert(r.image_id, (rgb, ir));
        }
        Ok(out)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses annotation text. Header lines are `image_id rgb_path ir_path
/// [condition...]`; indented `box class_id x1 y1 x2 y2` lines attach to the
/// preceding header. Relative paths resolve against `base`.
pub fn parse_index(text: &str, path: &Path, base: &Path) -> Result<DatasetIndex> {
    let mut images: Vec<ImageRecord> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = content.split_whitespace().collect();
        let indented = content.starts_with(char::is_whitespace);
        if indented {
            if f[0] != "box" || f.len() != 6 {
                return Err(parse_err(path, line, "expected `box class_id x1 y1 x2 y2`"));
            }
            let rec = images
                .last_mut()
                .ok_or_else(|| parse_err(path, line, "box line before any image record"))?;
            let class_id = f[1]
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad class id {:?}", f[1])))?;
            let mut v = [0.0; 4];
            for (slot, s) in v.iter_mut().zip(&f[2..]) {
                *slot = s
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("bad coordinate {s:?}")))?;
            }
            let bbox = Box2::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_err(path, line, e.to_string()))?;
            rec.boxes.push(GroundTruth {
                image_id: rec.image_id,
                class_id,
                bbox,
            });
        } else {
            if f.len() < 3 {
                return Err(parse_err(path, line, "expected `image_id rgb_path ir_path [condition]`"));
            }
            let image_id: u32 = f[0]
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad image id {:?}", f[0])))?;
            if images.iter().any(|r| r.image_id == image_id) {
                return Err(parse_err(path, line, format!("duplicate image id {image_id}")));
            }
            images.push(ImageRecord {
                image_id,
                rgb: base.join(f[1]),
                ir: base.join(f[2]),
                condition: f[3..].join(" "),
                boxes: Vec::new(),
            });
        }
    }
    images.sort_by_key(|r| r.image_id);
    Ok(DatasetIndex { images })
}

/// Reads an annotation file and checks that every modality file exists.
pub fn load_index(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let index = parse_index(&text, path, base)?;
    for r in &index.images {
        for (m, p) in [(Modality::Rgb, &r.rgb), (Modality::Ir, &r.ir)] {
            if !p.is_file() {
                return Err(Error::Io(io::Error::new(
                    io::ErrorKind::NotFound,
                    format!("image {}: missing {m} file {}", r.image_id, p.display()),
                )));
            }
        }
    }
    Ok(index)
}

/// Annotation text for `index`, with paths made relative to `base` when
/// they lie below it.
pub fn format_index(index: &DatasetIndex, base: &Path) -> String {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = String::from("# image_id rgb_path ir_path [condition]\n#   box class_id x1 y1 x2 y2\n");
    for r in &index.images {
        let _ = write!(s, "{} {} {}", r.image_id, rel(&r.rgb), rel(&r.ir));
        if !r.condition.is_empty() {
            let _ = write!(s, " {}", r.condition);
        }
        s.push('\n');
        for b in &r.boxes {
            let _ = writeln!(
                s,
                "  box {} {} {} {} {}",
                b.class_id, b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2
            );
        }
    }
    s
}

pub fn write_index(index: &DatasetIndex, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    fs::write(path, format_index(index, base))?;
    Ok(())
}

/// Parameters of the synthetic paired-modality generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub images: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub objects_per_image: usize,
    /// Side of every object box, in pixels; odd.
    pub object_size: usize,
    /// Uniform noise amplitude added to every entry of both maps.
    pub noise: f64,
    /// First image id; lets held-out draws avoid id clashes.
    pub first_id: u32,
    /// Paint no object evidence into this modality (noise only).
    pub ablate: Option<Modality>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            images: 40,
            channels: 8,
            height: 12,
            width: 12,
            objects_per_image: 2,
            object_size: 3,
            noise: 0.1,
            first_id: 0,
            ablate: None,
        }
    }
}

/// Per-modality pattern ids of each class. Classes form a two-digit mixed
/// radix number; RGB sees the high digit and IR the low one, so neither
/// modality alone separates every class pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Signatures {
    pub ir_radix: usize,
    pub rgb_patterns: usize,
}

impl Signatures {
    pub fn new(classes: usize) -> Self {
        let ir_radix = (classes as f64).sqrt().ceil().max(1.0) as usize;
        Self {
            ir_radix,
            rgb_patterns: classes.div_ceil(ir_radix),
        }
    }

    /// Channel lit by `class` in `m`. RGB patterns use the low half of the
    /// channels and IR patterns the high half.
    pub fn channel(&self, class: usize, m: Modality, channels: usize) -> usize {
        match m {
            Modality::Rgb => class / self.ir_radix,
            Modality::Ir => channels / 2 + class % self.ir_radix,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sig = Signatures::new(self.classes);
        if self.classes == 0 || self.images == 0 {
            return Err(Error::Config("classes and images must be >= 1".into()));
        }
        if sig.rgb_patterns > self.channels / 2 || sig.ir_radix > self.channels - self.channels / 2 {
            return Err(Error::Config(format!(
                "{} classes need more than {} channels",
                self.classes, self.channels
            )));
        }
        if self.object_size == 0 || self.object_size.is_multiple_of(2) {
            return Err(Error::Config(format!("object size {} must be odd", self.object_size)));
        }
        if self.object_size > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "objects of side {} cannot fit a {}x{} map",
                self.object_size, self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise amplitude {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// One synthetic image pair before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image_id: u32,
    pub rgb: FeatureMap,
    pub ir: FeatureMap,
    pub boxes: Vec<GroundTruth>,
}

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Top-left corners of non-touching `size × size` boxes.
fn place_objects(rng: &mut impl Rng, cfg: &SynthConfig) -> Result<Vec<(usize, usize)>> {
    let s = cfg.object_size;
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for _ in 0..cfg.objects_per_image {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let y = rng.random_range(0..=cfg.height - s);
            let x = rng.random_range(0..=cfg.width - s);
            // one clear pixel between any two boxes
            let clear = placed
                .iter()
                .all(|&(py, px)| y > py + s || py > y + s || x > px + s || px > x + s);
            if clear {
                placed.push((y, x));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Config(format!(
                "cannot fit {} objects of side {s} into a {}x{} map",
                cfg.objects_per_image, cfg.height, cfg.width
            )));
        }
    }
    Ok(placed)
}

/// Gaussian blob of peak 1 centred on the box centre, spread `σ = size/4`,
/// painted inside the box and a one-pixel ring.
fn paint(map: &mut FeatureMap, channel: usize, y: usize, x: usize, size: usize) {
    let (_, h, w) = map.shape();
    let (cy, cx) = ((y + size / 2) as f64, (x + size / 2) as f64);
    let sigma = size as f64 / 4.0;
    let lo = |v: usize| v.saturating_sub(1);
    for i in lo(y)..(y + size + 1).min(h) {
        for j in lo(x)..(x + size + 1).min(w) {
            let r2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            let v = map.at(channel, i, j) + (-r2 / (2.0 * sigma * sigma)).exp();
            map.set(channel, i, j, v);
        }
    }
}

/// Generates the images in memory. Layout, RGB noise and IR noise come from
/// separate streams, so ablating a modality leaves everything else unchanged.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    let sig = Signatures::new(cfg.classes);
    let class_ids: Vec<u32> = (0..cfg.classes as u32).collect();
    let mut out = Vec::with_capacity(cfg.images);
    for n in 0..cfg.images {
        let image_id = cfg.first_id + n as u32;
        let mut layout = rng_stream(seed, 3 * image_id as u64);
        let corners = place_objects(&mut layout, cfg)?;
        let classes: Vec<u32> = corners
            .iter()
            .map(|_| *class_ids.choose(&mut layout).expect("classes >= 1"))
            .collect();
        let mut maps = Vec::with_capacity(2);
        for (k, m) in [Modality::Rgb, Modality::Ir].into_iter().enumerate() {
            let mut noise = rng_stream(seed, 3 * image_id as u64 + 1 + k as u64);
            let mut map = FeatureMap::from_fn(cfg.channels, cfg.height, cfg.width, |_, _, _| {
                if cfg.noise > 0.0 {
                    noise.random_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                }
            });
            if cfg.ablate != Some(m) {
                for (&(y, x), &c) in corners.iter().zip(&classes) {
                    paint(&mut map, sig.channel(c as usize, m, cfg.channels), y, x, cfg.object_size);
                }
            }
            maps.push(map);
        }
        let s = cfg.object_size as f64;
        let boxes = corners
            .iter()
            .zip(&classes)
            .map(|(&(y, x), &class_id)| GroundTruth {
                image_id,
                class_id,
                bbox: Box2 {
                    x1: x as f64,
                    y1: y as f64,
                    x2: x as f64 + s,
                    y2: y as f64 + s,
                },
            })
            .collect();
        let ir = maps.pop().expect("two maps");
        let rgb = maps.pop().expect("two maps");
        out.push(SynthImage {
            image_id,
            rgb,
            ir,
            boxes,
        });
    }
    Ok(out)
}

/// File name of the annotation index inside a generated dataset directory.
pub const INDEX_FILE: &str = "annotations.txt";
/// File name of the flat ground-truth list inside a generated dataset directory.
pub const GT_FILE: &str = "gts.txt";

/// Writes a synthetic dataset (FMP1 maps, annotation index and flat
/// ground-truth list) into `dir` and returns its index.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<DatasetIndex> {
    let images = synthesize(cfg, seed)?;
    fs::create_dir_all(dir)?;
    let mut index = DatasetIndex::default();
    for im in images {
        let rgb = dir.join(format!("img{:05}_rgb.fmp", im.image_id));
        let ir = dir.join(format!("img{:05}_ir.fmp", im.image_id));
        fmp::write(&rgb, &im.rgb)?;
        fmp::write(&ir, &im.ir)?;
        index.images.push(ImageRecord {
            image_id: im.image_id,
            rgb,
            ir,
            condition: "synthetic".into(),
            boxes: im.boxes,
        });
    }
    write_index(&index, &dir.join(INDEX_FILE))?;
    fs::write(dir.join(GT_FILE), crate::eval::format_ground_truth(&index.ground_truth()))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_annotation_gives_empty_index() {
        let idx = parse_index("# nothing here\n\n", Path::new("a.txt"), Path::new(".")).unwrap();
        assert!(idx.is_empty());
    }

    #[test]
    fn degenerate_box_reports_line() {
        let text = "0 a.fmp b.fmp day\n  box 1 0 0 2 2\n  box 1 3 0 3 2\n";
        match parse_index(text, Path::new("ann.txt"), Path::new(".")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn box_before_header_rejected() {
        assert!(parse_index("  box 0 0 0 1 1\n", Path::new("a"), Path::new(".")).is_err());
    }

    #[test]
    fn condition_keeps_spaces() {
        let idx = parse_index("4 r.fmp i.fmp late night\n", Path::new("a"), Path::new("/d")).unwrap();
        assert_eq!(idx.images[0].condition, "late night");
        assert_eq!(idx.images[0].rgb, PathBuf::from("/d/r.fmp"));
    }

    #[test]
    fn signatures_split_classes_across_modalities() {
        let s = Signatures::new(3);
        let codes: Vec<_> = (0..3)
            .map(|c| (s.channel(c, Modality::Rgb, 8), s.channel(c, Modality::Ir, 8)))
            .collect();
        assert_eq!(codes, vec![(0, 4), (0, 5), (1, 4)]);
    }

    #[test]
    fn synthesis_is_deterministic_and_ablation_keeps_layout() {
        let cfg = SynthConfig {
            images: 3,
            ..SynthConfig::default()
        };
        let a = synthesize(&cfg, 5).unwrap();
        assert_eq!(a, synthesize(&cfg, 5).unwrap());
        let ab = synthesize(
            &SynthConfig {
                ablate: Some(Modality::Rgb),
                ..cfg.clone()
            },
            5,
        )
        .unwrap();
        for (x, y) in a.iter().zip(&ab) {
            assert_eq!(x.boxes, y.boxes);
            assert_eq!(x.ir, y.ir);
            assert!(y.rgb.data().iter().all(|v| v.abs() <= cfg.noise));
        }
    }

    #[test]
    fn crowded_maps_are_a_config_error() {
        let cfg = SynthConfig {
            height: 4,
            width: 4,
            objects_per_image: 3,
            ..SynthConfig::default()
        };
        assert!(matches!(synthesize(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_single_object_peaks_inside_box() {
        let cfg = SynthConfig {
            images: 5,
            objects_per_image: 1,
            noise: 0.0,
            ..SynthConfig::default()
        };
        for im in synthesize(&cfg, 9).unwrap() {
            let (d, h, w) = im.rgb.shape();
            let mut best = (0.0, 0, 0);
            for i in 0..h {
                for j in 0..w {
                    let e: f64 = (0..d).map(|c| im.rgb.at(c, i, j).powi(2) + im.ir.at(c, i, j).powi(2)).sum();
                    if e > best.0 {
                        best = (e, i, j);
                    }
                }
            }
            let b = im.boxes[0].bbox;
            let (ci, cj) = (best.1 as f64 + 0.5, best.2 as f64 + 0.5);
            assert!(cj > b.x1 && cj < b.x2 && ci > b.y1 && ci < b.y2);
        }
    }
}
