//! Central-difference gradient checking against the tape's analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst-case outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter key, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    pub eps: f64,
    /// Every checked entry.
    pub entries: Vec<GradEntry>,
}

/// One compared coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub key: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `(step, central difference)` at the smaller steps tried when the
    /// entry disagreed at the base step; empty otherwise.
    pub refined: Vec<(f64, f64)>,
}

impl GradEntry {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }

    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

impl GradCheckReport {
    /// Absolute error a central difference incurs from rounding the loss
    /// alone: `ε_mach·|f| / eps`.
    pub fn noise_floor(&self) -> f64 {
        f64::EPSILON * self.loss.abs().max(f64::MIN_POSITIVE) / self.eps
    }

    /// Largest relative error among entries whose absolute disagreement
    /// exceeds `k` noise floors; entries below that are limited by the
    /// finite difference, not by the analytic gradient.
    pub fn max_rel_error_above_noise(&self, k: f64) -> f64 {
        let floor = k * self.noise_floor();
        self.entries
            .iter()
            .filter(|e| e.abs_error() > floor)
            .map(GradEntry::rel_error)
            .fold(0.0, f64::max)
    }

    /// Rounding floor of a central difference with step `step`.
    pub fn noise_floor_at(&self, step: f64) -> f64 {
        f64::EPSILON * self.loss.abs().max(f64::MIN_POSITIVE) / step
    }

    /// Error of one entry after refinement: the smallest relative error over
    /// the base and refined steps, counting a step as exact when its
    /// disagreement is within `k` rounding floors. A wrong analytic gradient
    /// disagrees at every step; truncation error and kinks inside the
    /// difference interval shrink with the step.
    pub fn resolved_error(&self, e: &GradEntry, k: f64) -> f64 {
        std::iter::once((self.eps, e.numeric))
            .chain(e.refined.iter().copied())
            .map(|(step, n)| {
                if (e.analytic - n).abs() <= k * self.noise_floor_at(step) {
                    0.0
                } else {
                    relative_error(e.analytic, n)
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest [`resolved_error`](Self::resolved_error) over all entries.
    pub fn max_rel_error_resolved(&self, k: f64) -> f64 {
        self.entries.iter().map(|e| self.resolved_error(e, k)).fold(0.0, f64::max)
    }

    /// Entries that needed a smaller step to agree.
    pub fn refined_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.refined.is_empty()).count()
    }

    /// Number of entries whose relative error exceeds `tol`.
    pub fn count_above(&self, tol: f64) -> usize {
        self.entries.iter().filter(|e| e.rel_error() > tol).count()
    }
}

/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

type EntryFilter<'a> = Box<dyn Fn(&str, usize, f64) -> bool + 'a>;

/// Configurable checker. By default every entry of every parameter is checked.
pub struct GradCheck<'a> {
    eps: f64,
    prefixes: Option<Vec<String>>,
    filter: Option<EntryFilter<'a>>,
    refine: Option<(u32, f64)>,
}

impl Default for GradCheck<'_> {
    fn default() -> Self {
        Self::new(DEFAULT_EPS)
    }
}

impl<'a> GradCheck<'a> {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            prefixes: None,
            filter: None,
            refine: None,
        }
    }

    /// Entries whose relative error exceeds `tol` are re-differenced with
    /// steps `eps/4, eps/16, …` (`levels` of them).
    pub fn refine(mut self, levels: u32, tol: f64) -> Self {
        self.refine = Some((levels, tol));
        self
    }

    /// Restricts the check to parameters whose key starts with one of `prefixes`.
    pub fn only(mut self, prefixes: &[&str]) -> Self {
        self.prefixes = Some(prefixes.iter().map(|s| s.to_string()).collect());
        self
    }

    /// Skips entries for which `keep(key, index, value)` is false.
    pub fn filter(mut self, keep: impl Fn(&str, usize, f64) -> bool + 'a) -> Self {
        self.filter = Some(Box::new(keep));
        self
    }

    pub fn run<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
    {
        let mut work = store.clone();
        let mut g = Graph::new();
        let loss = f(&mut g, &work)?;
        g.backward_into(loss, &mut work)?;

        let keys: Vec<String> = store
            .keys()
            .filter(|k| {
                self.prefixes
                    .as_ref()
                    .is_none_or(|ps| ps.iter().any(|p| k.starts_with(p.as_str())))
            })
            .map(str::to_string)
            .collect();

        let eval = |s: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let id = f(&mut g, s)?;
            let v = g.scalar(id);
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite loss during gradient check".into()));
            }
            Ok(v)
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            analytic: 0.0,
            numeric: 0.0,
            entries_checked: 0,
            loss: g.scalar(loss),
            eps: self.eps,
            entries: Vec::new(),
        };
        for key in keys {
            let analytic = work.grad(&key)?.to_vec();
            for (i, &a) in analytic.iter().enumerate() {
                let orig = work.value(&key)?[i];
                if let Some(keep) = &self.filter {
                    if !keep(&key, i, orig) {
                        continue;
                    }
                }
                work.value_mut(&key)?[i] = orig + self.eps;
                let plus = eval(&work)?;
                work.value_mut(&key)?[i] = orig - self.eps;
                let minus = eval(&work)?;
                work.value_mut(&key)?[i] = orig;
                let n = (plus - minus) / (2.0 * self.eps);
                let err = relative_error(a, n);
                let mut refined = Vec::new();
                if let Some((levels, tol)) = self.refine {
                    if err > tol {
                        let mut step = self.eps;
                        for _ in 0..levels {
                            step /= 4.0;
                            work.value_mut(&key)?[i] = orig + step;
                            let p = eval(&work)?;
                            work.value_mut(&key)?[i] = orig - step;
                            let m = eval(&work)?;
                            work.value_mut(&key)?[i] = orig;
                            refined.push((step, (p - m) / (2.0 * step)));
                        }
                    }
                }
                report.entries_checked += 1;
                report.entries.push(GradEntry {
                    key: key.clone(),
                    index: i,
                    analytic: a,
                    numeric: n,
                    refined,
                });
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = err;
                    report.worst = Some((key.clone(), i));
                    report.analytic = a;
                    report.numeric = n;
                }
            }
        }
        Ok(report)
    }
}

/// Shorthand for checking every parameter entry with step `eps`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    GradCheck::new(eps).run(store, f)
}

/// True when a pixel-space coordinate is at least `margin` away from every
/// integer, i.e. strictly inside a bilinear interpolation cell.
pub fn clear_of_cell_boundary(pixel: f64, margin: f64) -> bool {
    let frac = pixel - pixel.floor();
    frac >= margin && 1.0 - frac >= margin
}
