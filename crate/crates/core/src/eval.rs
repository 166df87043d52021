//! Box geometry, greedy IoU matching, all-point average precision and nAP50.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Axis-aligned box with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2 {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2 {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::pre("Box", format!("invalid box ({x1}, {y1}, {x2}, {y2})")))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

pub fn iou(a: &Box2, b: &Box2) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: u32,
    pub class_id: u32,
    pub score: f64,
    pub bbox: Box2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: u32,
    pub class_id: u32,
    pub bbox: Box2,
}

/// Greedy matching in descending score order (ties keep input order). Each
/// detection claims the unmatched same-image ground truth with the highest
/// IoU `>= thr`. Returns a TP flag per detection, in input order.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
    let order = score_order(dets);
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image_id != d.image_id || g.class_id != d.class_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// Indices of `dets` by descending score; stable, so ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// AP of one class with a flag marking the degenerate case where it is
/// defined by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApOutcome {
    pub ap: f64,
    /// Set when the class has no ground truth, so recall is undefined.
    pub undefined_recall: bool,
}

/// Exact fraction for AP accumulation; falls back to `f64` on overflow.
#[derive(Debug, Clone, Copy)]
struct Frac {
    num: i128,
    den: i128,
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Frac {
    fn new(num: i128, den: i128) -> Self {
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    fn checked_add(self, o: Frac) -> Option<Frac> {
        let g = gcd(self.den, o.den);
        let l = (self.den / g).checked_mul(o.den)?;
        let a = self.num.checked_mul(l / self.den)?;
        let b = o.num.checked_mul(l / o.den)?;
        Some(Frac::new(a.checked_add(b)?, l))
    }

    fn checked_mul(self, o: Frac) -> Option<Frac> {
        let g1 = gcd(self.num, o.den).max(1);
        let g2 = gcd(o.num, self.den).max(1);
        let num = (self.num / g1).checked_mul(o.num / g2)?;
        let den = (self.den / g2).checked_mul(o.den / g1)?;
        Some(Frac::new(num, den))
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn gt(self, o: Frac) -> bool {
        match (self.num.checked_mul(o.den), o.num.checked_mul(self.den)) {
            (Some(a), Some(b)) => a > b,
            _ => self.to_f64() > o.to_f64(),
        }
    }
}

/// All-point interpolated AP of `class_id` at IoU threshold `thr`.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], class_id: u32, thr: f64) -> ApOutcome {
    let dets: Vec<Detection> = dets.iter().filter(|d| d.class_id == class_id).copied().collect();
    let gts: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).copied().collect();
    if gts.is_empty() {
        return ApOutcome {
            ap: 0.0,
            undefined_recall: true,
        };
    }
    if dets.is_empty() {
        return ApOutcome {
            ap: 0.0,
            undefined_recall: false,
        };
    }
    let flags = match_detections(&dets, &gts, thr);
    let order = score_order(&dets);
    // (tp count, precision) after each detection in score order
    let mut curve: Vec<(usize, Frac)> = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if flags[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp, Frac::new(tp as i128, (tp + fp) as i128)));
    }
    // monotone envelope from the right
    let mut env = curve.iter().map(|c| c.1).collect::<Vec<_>>();
    for k in (0..env.len().saturating_sub(1)).rev() {
        if env[k + 1].gt(env[k]) {
            env[k] = env[k + 1];
        }
    }
    let n_gt = gts.len() as i128;
    let exact = (|| {
        let mut acc = Frac::new(0, 1);
        let mut prev_tp = 0;
        for (k, &(tp, _)) in curve.iter().enumerate() {
            if tp > prev_tp {
                let dr = Frac::new((tp - prev_tp) as i128, n_gt);
                acc = acc.checked_add(dr.checked_mul(env[k])?)?;
                prev_tp = tp;
            }
        }
        Some(acc.to_f64())
    })();
    let ap = exact.unwrap_or_else(|| {
        let mut acc = 0.0;
        let mut prev_tp = 0;
        for (k, &(tp, _)) in curve.iter().enumerate() {
            if tp > prev_tp {
                acc += (tp - prev_tp) as f64 / n_gt as f64 * env[k].to_f64();
                prev_tp = tp;
            }
        }
        acc
    });
    ApOutcome {
        ap,
        undefined_recall: false,
    }
}

/// Per-class AP and their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct NapReport {
    pub per_class: Vec<(u32, ApOutcome)>,
    pub nap: f64,
}

impl NapReport {
    /// Fixed-precision table, one class per line, then the mean.
    pub fn to_table(&self) -> String {
        let mut s = String::from("class AP50\n");
        for (c, o) in &self.per_class {
            let flag = if o.undefined_recall { " (no ground truth)" } else { "" };
            let _ = writeln!(s, "{c} {:.4}{flag}", o.ap);
        }
        let _ = writeln!(s, "nAP50 {:.4}", self.nap);
        s
    }
}

/// Mean AP at IoU 0.5 over `novel` classes.
pub fn nap50(dets: &[Detection], gts: &[GroundTruth], novel: &[u32]) -> Result<NapReport> {
    let classes: BTreeSet<u32> = novel.iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::pre("nap50", "novel class set is empty"));
    }
    let per_class: Vec<(u32, ApOutcome)> = classes
        .iter()
        .map(|&c| (c, average_precision(dets, gts, c, 0.5)))
        .collect();
    let nap = per_class.iter().map(|(_, o)| o.ap).sum::<f64>() / per_class.len() as f64;
    Ok(NapReport { per_class, nap })
}

// ---------------------------------------------------------------------------
// interchange files

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_fields<T: std::str::FromStr>(path: &str, line: usize, f: &str, what: &str) -> Result<T> {
    f.parse().map_err(|_| parse_err(path, line, format!("bad {what} {f:?}")))
}

fn parse_box(path: &str, line: usize, f: &[&str]) -> Result<Box2> {
    let v: Vec<f64> = f
        .iter()
        .map(|s| parse_fields::<f64>(path, line, s, "coordinate"))
        .collect::<Result<_>>()?;
    Box2::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_err(path, line, e.to_string()))
}

/// Parses `image_id class_id score x1 y1 x2 y2` records.
pub fn parse_detections(text: &str, path: &str) -> Result<Vec<Detection>> {
    data_lines(text)
        .map(|(line, f)| {
            if f.len() != 7 {
                return Err(parse_err(path, line, format!("expected 7 fields, found {}", f.len())));
            }
            let score: f64 = parse_fields(path, line, f[2], "score")?;
            if !score.is_finite() {
                return Err(parse_err(path, line, "non-finite score"));
            }
            Ok(Detection {
                image_id: parse_fields(path, line, f[0], "image id")?,
                class_id: parse_fields(path, line, f[1], "class id")?,
                score,
                bbox: parse_box(path, line, &f[3..7])?,
            })
        })
        .collect()
}

/// Parses `image_id class_id x1 y1 x2 y2` records.
pub fn parse_ground_truth(text: &str, path: &str) -> Result<Vec<GroundTruth>> {
    data_lines(text)
        .map(|(line, f)| {
            if f.len() != 6 {
                return Err(parse_err(path, line, format!("expected 6 fields, found {}", f.len())));
            }
            Ok(GroundTruth {
                image_id: parse_fields(path, line, f[0], "image id")?,
                class_id: parse_fields(path, line, f[1], "class id")?,
                bbox: parse_box(path, line, &f[2..6])?,
            })
        })
        .collect()
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::from("# image_id class_id score x1 y1 x2 y2\n");
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(
            s,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.image_id, d.class_id, d.score, b.x1, b.y1, b.x2, b.y2
        );
    }
    s
}

pub fn format_ground_truth(gts: &[GroundTruth]) -> String {
    let mut s = String::from("# image_id class_id x1 y1 x2 y2\n");
    for g in gts {
        let b = g.bbox;
        let _ = writeln!(s, "{} {} {:.6} {:.6} {:.6} {:.6}", g.image_id, g.class_id, b.x1, b.y1, b.x2, b.y2);
    }
    s
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    parse_ground_truth(&std::fs::read_to_string(path)?, &path.display().to_string())
}
