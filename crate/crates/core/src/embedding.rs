//! Hierarchy-margin metric learning on pixel embeddings.
//!
//! Triplets are valid when the positive's leaf is strictly closer to the
//! anchor's leaf in the tree than the negative's. The hinge margin grows with
//! the tree-distance gap between negative and positive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::ClassHierarchy;

pub const DEFAULT_MARGIN_EPSILON: f64 = 0.10;
pub const DEFAULT_MARGIN_SCALE: f64 = 0.5;
pub const DEFAULT_TRIPLET_COUNT: usize = 200;
pub const PROJECTION_DIM: usize = 256;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: "embedding",
            expected: x.len(),
            got: y.len(),
        });
    }
    let (nx, ny) = (norm(x), norm(y));
    if !(nx > 0.0 && ny > 0.0) || !nx.is_finite() || !ny.is_finite() {
        return Err(Error::invalid(
            "cosine distance needs finite non-zero vectors",
        ));
    }
    Ok((nx, ny))
}

/// `(1 - cos(x, y)) / 2`, in `[0, 1]`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    let (nx, ny) = check_pair(x, y)?;
    Ok(half_one_minus_cos(dot(x, y) / (nx * ny)))
}

fn half_one_minus_cos(c: f64) -> f64 {
    0.5 * (1.0 - c.clamp(-1.0, 1.0))
}

/// Cosine distance and its gradients with respect to `x` and `y`.
pub fn cosine_distance_grad(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (nx, ny) = check_pair(x, y)?;
    let c = dot(x, y) / (nx * ny);
    // d/dx cos = y/(|x||y|) - cos * x/|x|^2
    let gx = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| -0.5 * (yi / (nx * ny) - c * xi / (nx * nx)))
        .collect();
    let gy = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| -0.5 * (xi / (nx * ny) - c * yi / (ny * ny)))
        .collect();
    Ok((half_one_minus_cos(c), gx, gy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Constant tolerance for intra-class spread.
    pub epsilon: f64,
    /// Weight on the tree-distance term.
    pub scale: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_MARGIN_EPSILON,
            scale: DEFAULT_MARGIN_SCALE,
        }
    }
}

/// Hinge margin for a triplet of leaf labels.
///
/// `m = epsilon + scale * (psi(a, n) - psi(a, p)) / (2 D)`.
pub fn triplet_margin(
    h: &ClassHierarchy,
    anchor: usize,
    positive: usize,
    negative: usize,
    cfg: &MarginConfig,
) -> Result<f64> {
    for v in [anchor, positive, negative] {
        if !h.is_leaf(v) {
            return Err(Error::invalid(format!("triplet label {v} is not a leaf")));
        }
    }
    let near = h.psi(anchor, positive);
    let far = h.psi(anchor, negative);
    if far <= near {
        return Err(Error::invalid(format!(
            "invalid triplet: psi(a,n) = {far} is not greater than psi(a,p) = {near}"
        )));
    }
    Ok(margin_unchecked(h, near, far, cfg))
}

fn margin_unchecked(h: &ClassHierarchy, near: usize, far: usize, cfg: &MarginConfig) -> f64 {
    let tau = (far - near) as f64 / (2 * h.height()) as f64;
    cfg.epsilon + cfg.scale * tau
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

impl TripletLoss {
    pub fn is_active(&self) -> bool {
        self.grad_anchor.iter().any(|&g| g != 0.0)
            || self.grad_positive.iter().any(|&g| g != 0.0)
            || self.grad_negative.iter().any(|&g| g != 0.0)
    }
}

/// `max(d(a, p) - d(a, n) + m, 0)` with cosine distance `d`.
///
/// At exactly zero the hinge is treated as active.
pub fn tree_triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<TripletLoss> {
    let (d_ap, ga_p, gp) = cosine_distance_grad(anchor, positive)?;
    let (d_an, ga_n, gn) = cosine_distance_grad(anchor, negative)?;
    let slack = d_ap - d_an + margin;
    let dim = anchor.len();
    if slack < 0.0 {
        return Ok(TripletLoss {
            value: 0.0,
            grad_anchor: vec![0.0; dim],
            grad_positive: vec![0.0; dim],
            grad_negative: vec![0.0; dim],
        });
    }
    Ok(TripletLoss {
        value: slack,
        grad_anchor: ga_p.iter().zip(&ga_n).map(|(p, n)| p - n).collect(),
        grad_positive: gp,
        grad_negative: gn.into_iter().map(|g| -g).collect(),
    })
}

/// Indices into a batch plus their leaf labels and hinge margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub anchor_label: usize,
    pub positive_label: usize,
    pub negative_label: usize,
    pub margin: f64,
}

/// True when `t` respects the tree-distance ordering.
pub fn is_valid_triplet(h: &ClassHierarchy, t: &Triplet) -> bool {
    t.anchor != t.positive
        && h.psi(t.anchor_label, t.positive_label) < h.psi(t.anchor_label, t.negative_label)
}

/// Draws up to `count` valid triplets from a batch with per-element leaf
/// labels, seeding a fresh generator from `seed`.
pub fn sample_triplets(
    h: &ClassHierarchy,
    labels: &[usize],
    count: usize,
    seed: u64,
    margin: &MarginConfig,
) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_triplets_with(h, labels, count, margin, &mut rng)
}

/// Anchor-first sampling with replacement.
///
/// The anchor is uniform over batch elements that admit a valid triplet; the
/// positive is uniform over elements (other than the anchor) with some
/// farther element in the batch; the negative is uniform over elements
/// strictly farther than the positive. Returns an empty list when no valid
/// triplet exists.
pub fn sample_triplets_with<R: Rng + ?Sized>(
    h: &ClassHierarchy,
    labels: &[usize],
    count: usize,
    margin: &MarginConfig,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    for &l in labels {
        if !h.is_leaf(l) {
            return Err(Error::invalid(format!("batch label {l} is not a leaf")));
        }
    }
    // Group batch elements by label so each anchor costs O(#distinct labels).
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let slot = |l: usize| distinct.binary_search(&l).expect("label present");
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); distinct.len()];
    for (i, &l) in labels.iter().enumerate() {
        members[slot(l)].push(i);
    }

    // A label can anchor iff some other element is strictly closer than the
    // farthest element present.
    let farthest: Vec<usize> = distinct
        .iter()
        .map(|&a| distinct.iter().map(|&b| h.psi(a, b)).max().unwrap_or(0))
        .collect();
    let anchor_ok = |ai: usize| {
        let a = distinct[ai];
        distinct.iter().enumerate().any(|(bi, &b)| {
            let others = members[bi].len() - usize::from(bi == ai);
            others > 0 && h.psi(a, b) < farthest[ai]
        })
    };
    let anchors: Vec<usize> = (0..labels.len())
        .filter(|&i| anchor_ok(slot(labels[i])))
        .collect();
    if anchors.is_empty() || count == 0 {
        return Ok(Vec::new());
    }

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = anchors[rng.random_range(0..anchors.len())];
        let ai = slot(labels[anchor]);
        let a = distinct[ai];

        let pos_weights: Vec<usize> = distinct
            .iter()
            .enumerate()
            .map(|(bi, &b)| {
                if h.psi(a, b) < farthest[ai] {
                    members[bi].len() - usize::from(bi == ai)
                } else {
                    0
                }
            })
            .collect();
        let (pi, k) = pick_weighted(&pos_weights, rng);
        let positive = if pi == ai {
            // Skip the anchor itself within its own label group.
            let own = &members[ai];
            let at = own
                .iter()
                .position(|&i| i == anchor)
                .expect("anchor in group");
            own[if k >= at { k + 1 } else { k }]
        } else {
            members[pi][k]
        };
        let near = h.psi(a, distinct[pi]);

        let neg_weights: Vec<usize> = distinct
            .iter()
            .enumerate()
            .map(|(bi, &b)| {
                if h.psi(a, b) > near {
                    members[bi].len()
                } else {
                    0
                }
            })
            .collect();
        let (ni, k) = pick_weighted(&neg_weights, rng);
        let negative = members[ni][k];
        let far = h.psi(a, distinct[ni]);

        out.push(Triplet {
            anchor,
            positive,
            negative,
            anchor_label: a,
            positive_label: distinct[pi],
            negative_label: distinct[ni],
            margin: margin_unchecked(h, near, far, margin),
        });
    }
    Ok(out)
}

/// Picks a group proportionally to `weights`, returning (group, offset).
fn pick_weighted<R: Rng + ?Sized>(weights: &[usize], rng: &mut R) -> (usize, usize) {
    let total: usize = weights.iter().sum();
    let mut r = rng.random_range(0..total);
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return (i, r);
        }
        r -= w;
    }
    unreachable!("r < total")
}

/// Two affine maps with a rectifier between them, used only while training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `hidden x input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Projection {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    /// He-style random init with zero biases; hidden width equals the input.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let hidden = input;
        let mut p = Self::zeros(input, hidden, output);
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
        p.w1.iter_mut().for_each(|w| *w = n1.sample(rng));
        p.w2.iter_mut().for_each(|w| *w = n2.sample(rng));
        p
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden * self.input
            && self.b1.len() == self.hidden
            && self.w2.len() == self.output * self.hidden
            && self.b2.len() == self.output;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "projection parameter shapes are inconsistent",
            ))
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ProjectionCache)> {
        self.check_shapes()?;
        if x.len() != self.input {
            return Err(Error::LengthMismatch {
                what: "projection input",
                expected: self.input,
                got: x.len(),
            });
        }
        let pre: Vec<f64> = (0..self.hidden)
            .map(|j| self.b1[j] + dot(&self.w1[j * self.input..(j + 1) * self.input], x))
            .collect();
        let hid: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let out = (0..self.output)
            .map(|k| self.b2[k] + dot(&self.w2[k * self.hidden..(k + 1) * self.hidden], &hid))
            .collect();
        Ok((
            out,
            ProjectionCache {
                input: x.to_vec(),
                pre_activation: pre,
                hidden: hid,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` (same layout as `self`)
    /// and returns the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &ProjectionCache,
        grad_out: &[f64],
        grads: &mut Projection,
    ) -> Result<Vec<f64>> {
        if grad_out.len() != self.output {
            return Err(Error::LengthMismatch {
                what: "projection output gradient",
                expected: self.output,
                got: grad_out.len(),
            });
        }
        let mut grad_hidden = vec![0.0; self.hidden];
        for (k, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b2[k] += g;
            let row = k * self.hidden;
            for j in 0..self.hidden {
                grads.w2[row + j] += g * cache.hidden[j];
                grad_hidden[j] += g * self.w2[row + j];
            }
        }
        let mut grad_in = vec![0.0; self.input];
        for j in 0..self.hidden {
            // Rectifier subgradient is zero at the kink.
            if cache.pre_activation[j] <= 0.0 {
                continue;
            }
            let g = grad_hidden[j];
            grads.b1[j] += g;
            let row = j * self.input;
            for i in 0..self.input {
                grads.w1[row + i] += g * cache.input[i];
                grad_in[i] += g * self.w1[row + i];
            }
        }
        Ok(grad_in)
    }

    /// Convenience: projects one embedding.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::parse_taxonomy;

    fn tree() -> ClassHierarchy {
        parse_taxonomy("root\troot\nroot\tA\nroot\tB\nA\ta1\nA\ta2\n").unwrap()
    }

    fn balanced_d2() -> ClassHierarchy {
        parse_taxonomy("root\tr\nr\tA\nr\tB\nA\ta1\nA\ta2\nB\tb1\nB\tb2\n").unwrap()
    }

    #[test]
    fn cosine_basics() {
        let x = [1.0, 2.0, -0.5];
        assert!(cosine_distance(&x, &x).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cosine_distance(&x, &neg).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_scale_invariant() {
        let x = [0.3, -1.1, 2.0];
        let y = [1.5, 0.2, -0.7];
        let xs: Vec<f64> = x.iter().map(|v| v * 3.5).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * 0.01).collect();
        let a = cosine_distance(&x, &y).unwrap();
        let b = cosine_distance(&xs, &ys).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn margin_examples() {
        let h = balanced_d2();
        let id = |n| h.id(n).unwrap();
        let cfg = MarginConfig::default();
        // psi(a1,a2) = 2, psi(a1,b1) = 4: tau = 0.5
        let m = triplet_margin(&h, id("a1"), id("a2"), id("b1"), &cfg).unwrap();
        assert!((m - 0.35).abs() < 1e-15);
        // psi(a1,a1) = 0, psi(a1,b1) = 4 = 2D: tau = 1
        let m = triplet_margin(&h, id("a1"), id("a1"), id("b1"), &cfg).unwrap();
        assert!((m - 0.60).abs() < 1e-15);
        assert!(triplet_margin(&h, id("a1"), id("b1"), id("a2"), &cfg).is_err());
        assert!(triplet_margin(&h, id("a1"), id("b1"), id("b2"), &cfg).is_err());
        assert!(triplet_margin(&h, id("A"), id("a1"), id("b2"), &cfg).is_err());
    }

    #[test]
    fn margin_grows_with_negative_distance() {
        let h = parse_taxonomy(
            "root\tr\nr\tA\nr\tB\nA\tA1\nA\tA2\nB\tB1\nA1\tx\nA1\ty\nA2\tz\nB1\tw\n",
        )
        .unwrap();
        let id = |n| h.id(n).unwrap();
        let cfg = MarginConfig::default();
        let m_near = triplet_margin(&h, id("x"), id("x"), id("y"), &cfg).unwrap();
        let m_mid = triplet_margin(&h, id("x"), id("x"), id("z"), &cfg).unwrap();
        let m_far = triplet_margin(&h, id("x"), id("x"), id("w"), &cfg).unwrap();
        assert!(m_near < m_mid && m_mid < m_far);
    }

    #[test]
    fn hinge_examples() {
        let a = [0.4, -0.2, 1.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let r = tree_triplet_loss(&a, &a, &neg, 0.35).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(!r.is_active());

        let p = [1.0, 0.5, -0.3];
        let r = tree_triplet_loss(&a, &p, &p, 0.35).unwrap();
        assert!((r.value - 0.35).abs() < 1e-15);
        assert!(r.is_active());
    }

    #[test]
    fn hinge_boundary_counts_as_active() {
        let a = [1.0, 0.0];
        let p = [1.0, 0.0];
        let n = [0.0, 1.0];
        // d(a,p) = 0, d(a,n) = 0.5
        let r = tree_triplet_loss(&a, &p, &n, 0.5).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.is_active());
    }

    #[test]
    fn single_label_batch_has_no_triplets() {
        let h = tree();
        let a1 = h.id("a1").unwrap();
        let t = sample_triplets(&h, &[a1; 10], 50, 1, &MarginConfig::default()).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn sampled_triplets_are_valid() {
        let h = tree();
        let id = |n| h.id(n).unwrap();
        let labels = [id("a1"), id("a2"), id("B"), id("a1"), id("B")];
        let ts = sample_triplets(&h, &labels, 500, 9, &MarginConfig::default()).unwrap();
        assert_eq!(ts.len(), 500);
        for t in &ts {
            assert!(is_valid_triplet(&h, t), "{t:?}");
            assert_eq!(labels[t.anchor], t.anchor_label);
            assert_eq!(labels[t.positive], t.positive_label);
            assert_eq!(labels[t.negative], t.negative_label);
            let m = triplet_margin(
                &h,
                t.anchor_label,
                t.positive_label,
                t.negative_label,
                &MarginConfig::default(),
            )
            .unwrap();
            assert_eq!(m, t.margin);
        }
        // anchor a1 with negative B always
        for t in ts.iter().filter(|t| t.anchor_label == id("a1")) {
            if t.positive_label == id("a2") {
                assert_eq!(t.negative_label, id("B"));
            }
        }
    }

    #[test]
    fn lone_anchor_does_not_pair_with_itself() {
        let h = tree();
        let id = |n| h.id(n).unwrap();
        // a1 once, B once: a1 can only use itself as positive, which is excluded.
        let labels = [id("a1"), id("B")];
        let ts = sample_triplets(&h, &labels, 20, 3, &MarginConfig::default()).unwrap();
        assert!(ts.is_empty());
    }

    #[test]
    fn sampling_is_seeded() {
        let h = tree();
        let labels: Vec<usize> = (0..300).map(|i| h.leaves()[i % 3]).collect();
        let a = sample_triplets(&h, &labels, 200, 42, &MarginConfig::default()).unwrap();
        let b = sample_triplets(&h, &labels, 200, 42, &MarginConfig::default()).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, b);
        let c = sample_triplets(&h, &labels, 200, 43, &MarginConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn projection_contract() {
        let p = Projection::zeros(4, 4, PROJECTION_DIM);
        assert_eq!(p.project(&[0.0; 4]).unwrap(), vec![0.0; PROJECTION_DIM]);
        assert!(p.project(&[0.0; 3]).is_err());

        let d = PROJECTION_DIM;
        let mut id = Projection::zeros(d, d, d);
        for i in 0..d {
            id.w1[i * d + i] = 1.0;
            id.w2[i * d + i] = 1.0;
        }
        let x: Vec<f64> = (0..d).map(|i| i as f64 * 0.01).collect();
        assert_eq!(id.project(&x).unwrap(), x);
    }
}
