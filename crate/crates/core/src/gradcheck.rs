//! Central finite-difference checks of the analytic gradients.
//!
//! Instances are drawn away from non-smooth points: scores are kept at least
//! [`TIE_GAP`] apart so min/max routing cannot flip inside the stencil, and
//! triplet hinges are kept at least that far from zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::coherence::expand_labels;
use crate::embedding::tree_triplet_loss;
use crate::error::{Error, Result};
use crate::losses::{
    bce_loss, cce_loss, focal_loss, focal_tree_min_loss, softmax, softmax_backward, tree_min_loss,
    FocalConfig, LossKind,
};
use crate::synthetic::random_hierarchy;
use crate::taxonomy::ClassHierarchy;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const TIE_GAP: f64 = 1e-3;

/// Gradient targets the checker knows how to exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Loss(LossKind),
    /// Hinge over cosine distances, all three embeddings at once.
    TreeTriplet,
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "tt" {
            Ok(Target::TreeTriplet)
        } else {
            s.parse().map(Target::Loss)
        }
    }
}

/// Symmetric difference quotient of `f` at `x` along every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub trials: usize,
    pub max_relative_error: f64,
    pub worst_trial: usize,
}

/// Scores in `[0.05, 0.95]` with every pair at least `gap` apart.
pub fn separated_scores<R: Rng + ?Sized>(n: usize, gap: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[1] - w[0] >= gap) {
            return s;
        }
    }
}

/// Max relative gradient error for one random instance of `target`.
pub fn check_instance<R: Rng + ?Sized>(
    target: Target,
    cfg: &FocalConfig,
    step: f64,
    rng: &mut R,
) -> Result<f64> {
    match target {
        Target::TreeTriplet => {
            let dim = 8;
            loop {
                let x: Vec<f64> = (0..3 * dim).map(|_| StandardNormal.sample(rng)).collect();
                let margin = rng.random_range(0.1..0.6);
                let (a, rest) = x.split_at(dim);
                let (p, n) = rest.split_at(dim);
                let r = tree_triplet_loss(a, p, n, margin)?;
                if r.value < TIE_GAP {
                    continue;
                }
                let mut analytic = r.grad_anchor;
                analytic.extend(r.grad_positive);
                analytic.extend(r.grad_negative);
                let numeric = central_difference(
                    |y| {
                        let (a, rest) = y.split_at(dim);
                        let (p, n) = rest.split_at(dim);
                        tree_triplet_loss(a, p, n, margin).map_or(f64::NAN, |r| r.value)
                    },
                    &x,
                    step,
                );
                return Ok(max_relative_error(&analytic, &numeric));
            }
        }
        Target::Loss(LossKind::Cce) => {
            let k = rng.random_range(2..10);
            let h = flat_hierarchy(k);
            let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
            let leaf = h.leaves()[rng.random_range(0..k)];
            let y = softmax(&z);
            let r = cce_loss(&h, &y, leaf, cfg.epsilon)?;
            let analytic = softmax_backward(&y, &r.grad);
            let numeric = central_difference(
                |z| cce_loss(&h, &softmax(z), leaf, cfg.epsilon).map_or(f64::NAN, |r| r.value),
                &z,
                step,
            );
            Ok(max_relative_error(&analytic, &numeric))
        }
        Target::Loss(kind) => {
            let n = rng.random_range(2..=20);
            let h = random_hierarchy(n, rng);
            let leaf = h.leaves()[rng.random_range(0..h.leaves().len())];
            let labels = expand_labels(&h, leaf)?;
            let s = separated_scores(h.len(), TIE_GAP, rng);
            let eval = |s: &[f64]| -> Result<crate::losses::LossReport> {
                match kind {
                    LossKind::Bce => bce_loss(&h, s, &labels, cfg.epsilon),
                    LossKind::Focal => focal_loss(&h, s, &labels, cfg),
                    LossKind::TreeMin => tree_min_loss(&h, s, &labels, cfg.epsilon),
                    LossKind::FocalTreeMin => focal_tree_min_loss(&h, s, &labels, cfg),
                    LossKind::Cce => unreachable!(),
                }
            };
            let analytic = eval(&s)?.grad;
            let numeric = central_difference(|x| eval(x).map_or(f64::NAN, |r| r.value), &s, step);
            Ok(max_relative_error(&analytic, &numeric))
        }
    }
}

fn flat_hierarchy(k: usize) -> ClassHierarchy {
    let names = (0..=k).map(|i| format!("c{i}")).collect();
    let parents = (0..=k).map(|i| (i > 0).then_some(0)).collect();
    ClassHierarchy::from_parents(names, parents).expect("star tree")
}

/// Runs `trials` seeded instances and reports the worst error.
pub fn run(target: Target, trials: usize, seed: u64, cfg: &FocalConfig) -> Result<Summary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = Summary {
        trials,
        max_relative_error: 0.0,
        worst_trial: 0,
    };
    for t in 0..trials {
        let e = check_instance(target, cfg, DEFAULT_STEP, &mut rng)?;
        if !e.is_finite() {
            return Err(Error::Numerical(format!(
                "trial {t} produced a non-finite gradient error"
            )));
        }
        if e > summary.max_relative_error {
            summary.max_relative_error = e;
            summary.worst_trial = t;
        }
    }
    Ok(summary)
}
