//! Per-pixel classification losses with analytic gradients.
//!
//! All sigmoid-score losses clip scores to `[eps, 1 - eps]` before taking
//! logs. Gradients are evaluated at the clipped score, so a saturated score
//! still receives a finite, non-zero gradient.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coherence::{check_len, labeled_leaf, route, sources_unchecked};
use crate::error::{Error, Result};
use crate::field::{LabelField, ScoreField};
use crate::taxonomy::ClassHierarchy;

pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// How the focal modulating factor is treated in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulatorGrad {
    /// Differentiate through `(1 - p)^gamma` and `p^gamma`.
    #[default]
    Through,
    /// Treat the factor as a constant.
    Detached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub modulator: ModulatorGrad,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            modulator: ModulatorGrad::Through,
        }
    }
}

impl FocalConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::invalid(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cce,
    Bce,
    Focal,
    #[serde(rename = "tm")]
    TreeMin,
    #[serde(rename = "ftm")]
    FocalTreeMin,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Cce,
        LossKind::Bce,
        LossKind::Focal,
        LossKind::TreeMin,
        LossKind::FocalTreeMin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Cce => "cce",
            LossKind::Bce => "bce",
            LossKind::Focal => "focal",
            LossKind::TreeMin => "tm",
            LossKind::FocalTreeMin => "ftm",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss `{s}`")))
    }
}

fn check_scores(s: &[f64]) -> Result<()> {
    match s.iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(i) => Err(Error::invalid(format!(
            "score {} at {i} outside [0, 1]",
            s[i]
        ))),
        None => Ok(()),
    }
}

fn clip(x: f64, eps: f64) -> f64 {
    x.clamp(eps, 1.0 - eps)
}

/// Categorical cross-entropy on leaf probabilities `y` (ordered like
/// `h.leaves()`) for ground-truth leaf node `leaf`.
pub fn cce_loss(h: &ClassHierarchy, y: &[f64], leaf: usize, eps: f64) -> Result<LossReport> {
    if y.len() != h.leaves().len() {
        return Err(Error::LengthMismatch {
            what: "leaf probabilities",
            expected: h.leaves().len(),
            got: y.len(),
        });
    }
    let t = h
        .leaf_index(leaf)
        .ok_or_else(|| Error::invalid(format!("node {leaf} is not a leaf")))?;
    check_scores(y)?;
    let total: f64 = y.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("leaf probabilities sum to {total}")));
    }
    Ok(cce_unchecked(y, t, eps))
}

pub(crate) fn cce_unchecked(y: &[f64], t: usize, eps: f64) -> LossReport {
    let yt = y[t].max(eps);
    let mut grad = vec![0.0; y.len()];
    grad[t] = -1.0 / yt;
    LossReport {
        value: -yt.ln(),
        grad,
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Pulls a gradient on softmax outputs `y` back to the logits.
pub fn softmax_backward(y: &[f64], grad_y: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(grad_y).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(grad_y)
        .map(|(yi, gi)| yi * (gi - dot))
        .collect()
}

/// Summed binary cross-entropy over all nodes.
pub fn bce_loss(h: &ClassHierarchy, s: &[f64], labels: &[bool], eps: f64) -> Result<LossReport> {
    check_len(h, s.len(), "score vector")?;
    check_len(h, labels.len(), "label vector")?;
    check_scores(s)?;
    Ok(bce_terms(s, labels, eps))
}

fn bce_terms(s: &[f64], labels: &[bool], eps: f64) -> LossReport {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(s.len());
    for (&x, &pos) in s.iter().zip(labels) {
        let q = clip(x, eps);
        if pos {
            value += -q.ln();
            grad.push(-1.0 / q);
        } else {
            value += -(1.0 - q).ln();
            grad.push(1.0 / (1.0 - q));
        }
    }
    LossReport { value, grad }
}

/// One focal term and its derivative with respect to the score.
fn focal_term(x: f64, positive: bool, cfg: &FocalConfig) -> (f64, f64) {
    let q = clip(x, cfg.epsilon);
    let g = cfg.gamma;
    let through = cfg.modulator == ModulatorGrad::Through && g != 0.0;
    if positive {
        let nll = -q.ln();
        let w = (1.0 - q).powf(g);
        let mut d = -w / q;
        if through {
            d += nll * -g * (1.0 - q).powf(g - 1.0);
        }
        (w * nll, d)
    } else {
        let nll = -(1.0 - q).ln();
        let w = q.powf(g);
        let mut d = w / (1.0 - q);
        if through {
            d += nll * g * q.powf(g - 1.0);
        }
        (w * nll, d)
    }
}

fn focal_terms(s: &[f64], labels: &[bool], cfg: &FocalConfig) -> LossReport {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(s.len());
    for (&x, &pos) in s.iter().zip(labels) {
        let (v, d) = focal_term(x, pos, cfg);
        value += v;
        grad.push(d);
    }
    LossReport { value, grad }
}

/// Focal-modulated binary cross-entropy on raw scores (no propagation).
pub fn focal_loss(
    h: &ClassHierarchy,
    s: &[f64],
    labels: &[bool],
    cfg: &FocalConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    check_len(h, s.len(), "score vector")?;
    check_len(h, labels.len(), "label vector")?;
    check_scores(s)?;
    Ok(focal_terms(s, labels, cfg))
}

/// Binary cross-entropy on propagated scores.
pub fn tree_min_loss(
    h: &ClassHierarchy,
    s: &[f64],
    labels: &[bool],
    eps: f64,
) -> Result<LossReport> {
    check_len(h, s.len(), "score vector")?;
    check_scores(s)?;
    labeled_leaf(h, labels)?;
    Ok(tree_min_unchecked(h, s, labels, eps))
}

fn tree_min_unchecked(h: &ClassHierarchy, s: &[f64], labels: &[bool], eps: f64) -> LossReport {
    let src = sources_unchecked(h, s, labels);
    let p: Vec<f64> = src.iter().map(|&u| s[u]).collect();
    let inner = bce_terms(&p, labels, eps);
    LossReport {
        value: inner.value,
        grad: route(&src, &inner.grad),
    }
}

/// Focal-modulated binary cross-entropy on propagated scores.
pub fn focal_tree_min_loss(
    h: &ClassHierarchy,
    s: &[f64],
    labels: &[bool],
    cfg: &FocalConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    check_len(h, s.len(), "score vector")?;
    check_scores(s)?;
    labeled_leaf(h, labels)?;
    Ok(focal_tree_min_unchecked(h, s, labels, cfg))
}

fn focal_tree_min_unchecked(
    h: &ClassHierarchy,
    s: &[f64],
    labels: &[bool],
    cfg: &FocalConfig,
) -> LossReport {
    let src = sources_unchecked(h, s, labels);
    let p: Vec<f64> = src.iter().map(|&u| s[u]).collect();
    let inner = focal_terms(&p, labels, cfg);
    LossReport {
        value: inner.value,
        grad: route(&src, &inner.grad),
    }
}

/// Loss for one pixel with full score vector `s` and ground-truth `leaf`.
///
/// For [`LossKind::Cce`] the leaf entries of `s` are read as a probability
/// vector and the gradient is zero on internal nodes.
pub fn pixel_loss(
    h: &ClassHierarchy,
    kind: LossKind,
    s: &[f64],
    leaf: usize,
    cfg: &FocalConfig,
) -> Result<LossReport> {
    check_len(h, s.len(), "score vector")?;
    match kind {
        LossKind::Cce => {
            let y: Vec<f64> = h.leaves().iter().map(|&l| s[l]).collect();
            let r = cce_loss(h, &y, leaf, cfg.epsilon)?;
            let mut grad = vec![0.0; h.len()];
            for (&l, g) in h.leaves().iter().zip(r.grad) {
                grad[l] = g;
            }
            Ok(LossReport {
                value: r.value,
                grad,
            })
        }
        _ => {
            let labels = crate::coherence::expand_labels(h, leaf)?;
            match kind {
                LossKind::Bce => bce_loss(h, s, &labels, cfg.epsilon),
                LossKind::Focal => focal_loss(h, s, &labels, cfg),
                LossKind::TreeMin => tree_min_loss(h, s, &labels, cfg.epsilon),
                LossKind::FocalTreeMin => focal_tree_min_loss(h, s, &labels, cfg),
                LossKind::Cce => unreachable!(),
            }
        }
    }
}

/// Mean loss over the non-ignored pixels of a field and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldLoss {
    pub value: f64,
    /// Same layout as the score field.
    pub grad: Vec<f64>,
    pub pixels: usize,
}

/// Pixel-mean loss over `scores` against `labels`.
///
/// Pixels are evaluated in parallel; the reduction runs in pixel order so the
/// result is bit-identical to a sequential loop.
pub fn field_loss(
    h: &ClassHierarchy,
    scores: &ScoreField,
    labels: &LabelField,
    kind: LossKind,
    cfg: &FocalConfig,
) -> Result<FieldLoss> {
    scores.check_hierarchy(h)?;
    if scores.height() != labels.height() || scores.width() != labels.width() {
        return Err(Error::invalid("score and label fields differ in size"));
    }
    labels.validate(h)?;
    cfg.validate()?;

    let per_pixel: Vec<Option<LossReport>> = (0..scores.num_pixels())
        .into_par_iter()
        .map(|i| {
            labels
                .get(i)
                .map(|leaf| pixel_loss(h, kind, scores.pixel(i), leaf, cfg))
                .transpose()
        })
        .collect::<Result<_>>()?;

    let n = h.len();
    let count = per_pixel.iter().filter(|r| r.is_some()).count();
    let mut grad = vec![0.0; scores.as_slice().len()];
    if count == 0 {
        return Ok(FieldLoss {
            value: 0.0,
            grad,
            pixels: 0,
        });
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for (i, r) in per_pixel.iter().enumerate() {
        if let Some(r) = r {
            total += r.value;
            for (g, d) in grad[i * n..(i + 1) * n].iter_mut().zip(&r.grad) {
                *g = d * scale;
            }
        }
    }
    Ok(FieldLoss {
        value: total * scale,
        grad,
        pixels: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coherence::{expand_labels, propagate};
    use crate::taxonomy::parse_taxonomy;
    use std::f64::consts::LN_2;

    fn tree() -> ClassHierarchy {
        parse_taxonomy("root\troot\nroot\tA\nroot\tB\nA\ta1\nA\ta2\n").unwrap()
    }

    fn worked_scores(h: &ClassHierarchy) -> Vec<f64> {
        let mut s = vec![0.0; h.len()];
        for (n, x) in [
            ("root", 0.9),
            ("A", 0.5),
            ("a1", 0.7),
            ("B", 0.4),
            ("a2", 0.6),
        ] {
            s[h.id(n).unwrap()] = x;
        }
        s
    }

    #[test]
    fn cce_values() {
        let h = tree();
        let a1 = h.id("a1").unwrap();
        let t = h.leaf_index(a1).unwrap();
        let mut y = vec![0.0; 3];
        y[t] = 1.0;
        assert_eq!(cce_loss(&h, &y, a1, DEFAULT_EPSILON).unwrap().value, 0.0);
        let u = vec![1.0 / 3.0; 3];
        let r = cce_loss(&h, &u, a1, DEFAULT_EPSILON).unwrap();
        assert!((r.value - 3f64.ln()).abs() < 1e-12);
        assert!(cce_loss(&h, &[0.5, 0.2, 0.2], a1, DEFAULT_EPSILON).is_err());
        assert!(cce_loss(&h, &u, h.id("A").unwrap(), DEFAULT_EPSILON).is_err());
        assert!(cce_loss(&h, &[0.5, 0.5], a1, DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn bce_values() {
        let h = tree();
        let l = expand_labels(&h, h.id("a2").unwrap()).unwrap();
        let exact: Vec<f64> = l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let r = bce_loss(&h, &exact, &l, DEFAULT_EPSILON).unwrap();
        assert!(r.value < 1e-10);
        assert!(r.value.is_finite() && r.grad.iter().all(|g| g.is_finite()));
        let half = vec![0.5; h.len()];
        let r = bce_loss(&h, &half, &l, DEFAULT_EPSILON).unwrap();
        assert!((r.value - 5.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn clamped_extremes_stay_finite() {
        let h = tree();
        let l = expand_labels(&h, h.id("a2").unwrap()).unwrap();
        let wrong: Vec<f64> = l.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
        for kind in LossKind::ALL {
            let s = if kind == LossKind::Cce {
                let mut s = vec![0.0; h.len()];
                s[h.id("a1").unwrap()] = 1.0;
                s
            } else {
                wrong.clone()
            };
            let r = pixel_loss(&h, kind, &s, h.id("a2").unwrap(), &FocalConfig::default()).unwrap();
            assert!(r.value.is_finite(), "{kind}");
            assert!(r.grad.iter().all(|g| g.is_finite()), "{kind}");
        }
    }

    #[test]
    fn focal_gamma_zero_is_bce() {
        let h = tree();
        let l = expand_labels(&h, h.id("a1").unwrap()).unwrap();
        let s = worked_scores(&h);
        let f = focal_loss(&h, &s, &l, &FocalConfig::with_gamma(0.0)).unwrap();
        let b = bce_loss(&h, &s, &l, DEFAULT_EPSILON).unwrap();
        assert!((f.value - b.value).abs() <= 1e-12);
        for (x, y) in f.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn tree_min_equals_bce_on_propagated() {
        let h = tree();
        let l = expand_labels(&h, h.id("a1").unwrap()).unwrap();
        let s = worked_scores(&h);
        let p = propagate(&h, &s, &l).unwrap();
        let tm = tree_min_loss(&h, &s, &l, DEFAULT_EPSILON).unwrap();
        let b = bce_loss(&h, &p, &l, DEFAULT_EPSILON).unwrap();
        assert!((tm.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn perfect_coherent_prediction_is_zero() {
        let h = tree();
        let l = expand_labels(&h, h.id("a1").unwrap()).unwrap();
        let s: Vec<f64> = l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert!(tree_min_loss(&h, &s, &l, DEFAULT_EPSILON).unwrap().value < 1e-10);
        assert!(
            focal_tree_min_loss(&h, &s, &l, &FocalConfig::default())
                .unwrap()
                .value
                < 1e-10
        );
        assert!(
            focal_loss(&h, &s, &l, &FocalConfig::default())
                .unwrap()
                .value
                < 1e-10
        );
    }

    #[test]
    fn ftm_terms_are_scaled_tm_terms() {
        let h = tree();
        let l = expand_labels(&h, h.id("a1").unwrap()).unwrap();
        let p = propagate(&h, &worked_scores(&h), &l).unwrap();
        let cfg = FocalConfig::default();
        for (&x, &pos) in p.iter().zip(&l) {
            let (focal, _) = focal_term(x, pos, &cfg);
            let (plain, _) = focal_term(x, pos, &FocalConfig::with_gamma(0.0));
            let ratio = focal / plain;
            assert!((0.0..=1.0).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn detached_modulator_drops_factor_derivative() {
        let cfg = FocalConfig {
            modulator: ModulatorGrad::Detached,
            ..FocalConfig::default()
        };
        let (_, d) = focal_term(0.3, true, &cfg);
        assert!((d - (-(0.7f64).powi(2) / 0.3)).abs() < 1e-12);
        let (_, d) = focal_term(0.3, false, &cfg);
        assert!((d - (0.09 / 0.7)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let h = tree();
        let l = expand_labels(&h, h.id("a1").unwrap()).unwrap();
        assert!(bce_loss(&h, &[0.5; 4], &l, DEFAULT_EPSILON).is_err());
        assert!(bce_loss(&h, &[1.5; 5], &l, DEFAULT_EPSILON).is_err());
        let mut bad = l.clone();
        bad[0] = false;
        assert!(tree_min_loss(&h, &[0.5; 5], &bad, DEFAULT_EPSILON).is_err());
        assert!(focal_loss(&h, &[0.5; 5], &l, &FocalConfig::with_gamma(-1.0)).is_err());
        assert_eq!("ftm".parse::<LossKind>().unwrap(), LossKind::FocalTreeMin);
        assert!("xyz".parse::<LossKind>().is_err());
    }

    #[test]
    fn all_ignored_field_is_zero() {
        let h = tree();
        let s = ScoreField::new(2, 2, h.len(), vec![0.5; 4 * h.len()]).unwrap();
        let g = LabelField::new(2, 2, vec![crate::field::IGNORE; 4]).unwrap();
        let r = field_loss(&h, &s, &g, LossKind::FocalTreeMin, &FocalConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.pixels, 0);
        assert!(r.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_pixel_field_matches_pixel_op() {
        let h = tree();
        let s = worked_scores(&h);
        let a1 = h.id("a1").unwrap();
        let f = ScoreField::new(1, 1, h.len(), s.clone()).unwrap();
        let g = LabelField::new(1, 1, vec![a1 as u32]).unwrap();
        for kind in [
            LossKind::Bce,
            LossKind::Focal,
            LossKind::TreeMin,
            LossKind::FocalTreeMin,
        ] {
            let r = field_loss(&h, &f, &g, kind, &FocalConfig::default()).unwrap();
            let p = pixel_loss(&h, kind, &s, a1, &FocalConfig::default()).unwrap();
            assert_eq!(r.value, p.value);
            assert_eq!(r.grad, p.grad);
        }
    }

    #[test]
    fn field_rejects_non_leaf_labels() {
        let h = tree();
        let f = ScoreField::new(1, 1, h.len(), vec![0.5; 5]).unwrap();
        let g = LabelField::new(1, 1, vec![h.id("A").unwrap() as u32]).unwrap();
        assert!(field_loss(&h, &f, &g, LossKind::Bce, &FocalConfig::default()).is_err());
    }

    #[test]
    fn softmax_backward_matches_cce_shortcut() {
        let z = [0.3, -1.2, 2.0];
        let y = softmax(&z);
        let r = cce_unchecked(&y, 1, DEFAULT_EPSILON);
        let gz = softmax_backward(&y, &r.grad);
        for (i, g) in gz.iter().enumerate() {
            let want = y[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-12);
        }
    }
}
