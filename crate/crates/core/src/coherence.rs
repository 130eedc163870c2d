//! Hierarchy constraint predicates and label-conditioned score propagation.
//!
//! Propagation replaces every positively labeled score by the minimum over its
//! ancestors and every negatively labeled score by the maximum over its
//! descendants. The result always orders positive chains from the root down
//! and negative subtrees from the top down.

use crate::error::{Error, Result};
use crate::taxonomy::ClassHierarchy;

/// Threshold the constraint checkers use when none is given.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binary label vector over all nodes for ground-truth leaf `leaf`.
pub fn expand_labels(h: &ClassHierarchy, leaf: usize) -> Result<Vec<bool>> {
    if leaf >= h.len() {
        return Err(Error::OutOfRange {
            what: "node",
            index: leaf,
            len: h.len(),
        });
    }
    if !h.is_leaf(leaf) {
        return Err(Error::invalid(format!(
            "`{}` is not a leaf class",
            h.name(leaf)
        )));
    }
    let mut out = vec![false; h.len()];
    for &a in h.ancestors_of(leaf) {
        out[a] = true;
    }
    Ok(out)
}

/// Recovers the leaf whose expansion equals `labels`, or fails when `labels`
/// is not hierarchy-consistent.
pub fn labeled_leaf(h: &ClassHierarchy, labels: &[bool]) -> Result<usize> {
    check_len(h, labels.len(), "label vector")?;
    let mut found = None;
    for &leaf in h.leaves() {
        if labels[leaf] {
            if found.is_some() {
                return Err(Error::invalid("more than one positive leaf"));
            }
            found = Some(leaf);
        }
    }
    let leaf = found.ok_or_else(|| Error::invalid("no positive leaf"))?;
    let positives = labels.iter().filter(|&&b| b).count();
    let chain = h.ancestors_of(leaf);
    if positives != chain.len() || chain.iter().any(|&a| !labels[a]) {
        return Err(Error::invalid(
            "positive labels do not form a root-to-leaf chain",
        ));
    }
    Ok(leaf)
}

pub(crate) fn check_len(h: &ClassHierarchy, got: usize, what: &'static str) -> Result<()> {
    if got != h.len() {
        return Err(Error::LengthMismatch {
            what,
            expected: h.len(),
            got,
        });
    }
    Ok(())
}

/// A pair `(v, u)` whose scores break a hierarchy constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub node: usize,
    pub other: usize,
}

/// Positive-constraint violations: `u` a strict ancestor of `v`, `s_v` above
/// `threshold` and `s_v > s_u`.
pub fn check_positive_constraint(
    h: &ClassHierarchy,
    s: &[f64],
    threshold: f64,
) -> Result<Vec<Violation>> {
    check_len(h, s.len(), "score vector")?;
    Ok(positive_violations(h, s, |v| s[v] > threshold))
}

/// Negative-constraint violations: `u` a strict descendant of `v`, `s_v` at or
/// below `threshold` and `s_u > s_v`.
pub fn check_negative_constraint(
    h: &ClassHierarchy,
    s: &[f64],
    threshold: f64,
) -> Result<Vec<Violation>> {
    check_len(h, s.len(), "score vector")?;
    Ok(negative_violations(h, s, |v| s[v] <= threshold))
}

/// Positive-constraint check restricted to nodes labeled positive in `labels`.
pub fn check_positive_constraint_labeled(
    h: &ClassHierarchy,
    s: &[f64],
    labels: &[bool],
) -> Result<Vec<Violation>> {
    check_len(h, s.len(), "score vector")?;
    check_len(h, labels.len(), "label vector")?;
    Ok(positive_violations(h, s, |v| labels[v]))
}

/// Negative-constraint check restricted to nodes labeled negative in `labels`.
pub fn check_negative_constraint_labeled(
    h: &ClassHierarchy,
    s: &[f64],
    labels: &[bool],
) -> Result<Vec<Violation>> {
    check_len(h, s.len(), "score vector")?;
    check_len(h, labels.len(), "label vector")?;
    Ok(negative_violations(h, s, |v| !labels[v]))
}

fn positive_violations(
    h: &ClassHierarchy,
    s: &[f64],
    selected: impl Fn(usize) -> bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for v in 0..h.len() {
        if !selected(v) {
            continue;
        }
        for &u in &h.ancestors_of(v)[1..] {
            if s[v] > s[u] {
                out.push(Violation { node: v, other: u });
            }
        }
    }
    out
}

fn negative_violations(
    h: &ClassHierarchy,
    s: &[f64],
    selected: impl Fn(usize) -> bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for v in 0..h.len() {
        if !selected(v) {
            continue;
        }
        for &u in h.descendants_of(v) {
            if u != v && s[u] > s[v] {
                out.push(Violation { node: v, other: u });
            }
        }
    }
    out
}

/// True when `s` breaks either constraint at `threshold`.
pub fn is_incoherent(h: &ClassHierarchy, s: &[f64], threshold: f64) -> bool {
    !positive_violations(h, s, |v| s[v] > threshold).is_empty()
        || !negative_violations(h, s, |v| s[v] <= threshold).is_empty()
}

/// For each node, the index in `s` its propagated score is copied from.
///
/// Ties resolve to the smallest node id.
pub fn propagation_sources(h: &ClassHierarchy, s: &[f64], labels: &[bool]) -> Result<Vec<usize>> {
    check_len(h, s.len(), "score vector")?;
    labeled_leaf(h, labels)?;
    Ok(sources_unchecked(h, s, labels))
}

pub(crate) fn sources_unchecked(h: &ClassHierarchy, s: &[f64], labels: &[bool]) -> Vec<usize> {
    (0..h.len())
        .map(|v| {
            if labels[v] {
                pick(h.ancestors_of(v), s, |cand, best| cand < best)
            } else {
                pick(h.descendants_of(v), s, |cand, best| cand > best)
            }
        })
        .collect()
}

fn pick(set: &[usize], s: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = set[0];
    for &u in &set[1..] {
        if better(s[u], s[best]) || (s[u] == s[best] && u < best) {
            best = u;
        }
    }
    best
}

/// Hierarchy-coherent scores `p` for ground-truth labels `labels`.
pub fn propagate(h: &ClassHierarchy, s: &[f64], labels: &[bool]) -> Result<Vec<f64>> {
    let src = propagation_sources(h, s, labels)?;
    Ok(src.iter().map(|&u| s[u]).collect())
}

/// Backward pass of [`propagate`]: each upstream component is routed to the
/// single score entry its output was copied from.
pub fn propagate_grad(
    h: &ClassHierarchy,
    s: &[f64],
    labels: &[bool],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check_len(h, upstream.len(), "upstream gradient")?;
    let src = propagation_sources(h, s, labels)?;
    Ok(route(&src, upstream))
}

pub(crate) fn route(src: &[usize], upstream: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; upstream.len()];
    for (v, &u) in src.iter().enumerate() {
        grad[u] += upstream[v];
    }
    grad
}
