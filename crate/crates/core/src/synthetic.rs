//! Synthetic hierarchies and Gaussian-cluster pixel data.
//!
//! Leaf cluster centers are built from one orthonormal direction per
//! non-root node. A node on level `m` contributes a component of length
//! `c * sqrt(2 (2m - 1))` along its own direction, which makes the distance
//! between two leaf centers of a balanced tree exactly `c * psi`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::LabelField;
use crate::taxonomy::{parse_taxonomy, ClassHierarchy};

/// Random tree with `n` nodes. Node `i > 0` attaches to one of the previous
/// `window` nodes, so small windows give deep trees and large ones bushy trees.
pub fn random_hierarchy<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ClassHierarchy {
    let n = n.max(1);
    let window = rng.random_range(1..=n);
    let names = (0..n).map(|i| format!("n{i}")).collect();
    let parents = (0..n)
        .map(|i| (i > 0).then(|| rng.random_range(i.saturating_sub(window)..i)))
        .collect();
    ClassHierarchy::from_parents(names, parents).expect("generated parents form a tree")
}

/// Per-pixel feature vectors on an `H x W` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureField {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureField {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub feature_dim: usize,
    pub pixels_per_class: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Grid of `leaves * pixels_per_class` pixels, as square as possible with
    /// the given width.
    pub fn for_hierarchy(h: &ClassHierarchy, pixels_per_class: usize, width: usize) -> Self {
        let total = h.leaves().len() * pixels_per_class;
        let width = width.max(1);
        Self {
            feature_dim: h.len().saturating_sub(1).max(1),
            pixels_per_class,
            center_scale: 1.0,
            noise_sigma: 1.0,
            height: total / width,
            width,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureField,
    pub labels: LabelField,
}

/// Leaf cluster centers, one row per entry of `h.leaves()`.
pub fn leaf_centers<R: Rng + ?Sized>(
    h: &ClassHierarchy,
    dim: usize,
    scale: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let needed = h.len() - 1;
    if dim < needed {
        return Err(Error::invalid(format!(
            "feature dimension {dim} is below the {needed} directions the hierarchy needs"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(needed);
    while basis.len() < needed {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let direction = |v: usize| if v < h.root() { v } else { v - 1 };
    Ok(h.leaves()
        .iter()
        .map(|&leaf| {
            let mut c = vec![0.0; dim];
            for &u in h.ancestors_of(leaf) {
                if u == h.root() {
                    continue;
                }
                let m = h.level(u) as f64;
                let a = scale * (2.0 * (2.0 * m - 1.0)).sqrt();
                c.iter_mut()
                    .zip(&basis[direction(u)])
                    .for_each(|(x, e)| *x += a * e);
            }
            c
        })
        .collect())
}

/// Draws `pixels_per_class` noisy samples around each leaf center, shuffled
/// over the grid. Identical configs give identical output.
pub fn generate_synthetic(h: &ClassHierarchy, cfg: &SyntheticConfig) -> Result<Dataset> {
    check_config(h, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = leaf_centers(h, cfg.feature_dim, cfg.center_scale, &mut rng)?;
    Ok(sample_around(h, cfg, &centers, &mut rng))
}

/// Training draw plus a held-out draw around the same centers, sampled with
/// [`held_out_seed`].
pub fn generate_split(h: &ClassHierarchy, cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    check_config(h, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = leaf_centers(h, cfg.feature_dim, cfg.center_scale, &mut rng)?;
    let train = sample_around(h, cfg, &centers, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(held_out_seed(cfg.seed));
    let held_out = sample_around(h, cfg, &centers, &mut rng);
    Ok((train, held_out))
}

fn check_config(h: &ClassHierarchy, cfg: &SyntheticConfig) -> Result<()> {
    if !(cfg.noise_sigma > 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be positive"));
    }
    let total = h.leaves().len() * cfg.pixels_per_class;
    if cfg.height * cfg.width != total {
        return Err(Error::invalid(format!(
            "grid {}x{} does not hold {} leaves x {} pixels",
            cfg.height,
            cfg.width,
            h.leaves().len(),
            cfg.pixels_per_class
        )));
    }
    Ok(())
}

fn sample_around(
    h: &ClassHierarchy,
    cfg: &SyntheticConfig,
    centers: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let total = h.leaves().len() * cfg.pixels_per_class;
    let mut slots: Vec<usize> = (0..total).map(|i| i / cfg.pixels_per_class).collect();
    slots.shuffle(rng);

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
    let mut data = Vec::with_capacity(total * cfg.feature_dim);
    let mut labels = Vec::with_capacity(total);
    for &k in &slots {
        labels.push(h.leaves()[k] as u32);
        data.extend(centers[k].iter().map(|c| c + noise.sample(rng)));
    }
    Dataset {
        features: FeatureField {
            height: cfg.height,
            width: cfg.width,
            dim: cfg.feature_dim,
            data,
        },
        labels: LabelField::new(cfg.height, cfg.width, labels).expect("grid size checked"),
    }
}

/// Seed for the held-out draw that pairs with a training draw on `seed`.
pub fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// As [`generate_synthetic`], reading the taxonomy from disk first.
pub fn generate_synthetic_from_file(
    path: impl AsRef<Path>,
    cfg: &SyntheticConfig,
) -> Result<(ClassHierarchy, Dataset)> {
    let text = std::fs::read_to_string(path)?;
    let h = parse_taxonomy(&text)?;
    let d = generate_synthetic(&h, cfg)?;
    Ok((h, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = include_str!("../taxonomies/toy_3level.tax");

    #[test]
    fn random_trees_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..60 {
            let h = random_hierarchy(n, &mut rng);
            assert_eq!(h.len(), n);
            assert_eq!(h.root(), 0);
        }
    }

    #[test]
    fn center_distances_follow_tree_distance() {
        let h = parse_taxonomy(TOY).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = leaf_centers(&h, 20, 1.5, &mut rng).unwrap();
        let leaves = h.leaves();
        let mut pairs = Vec::new();
        for i in 0..leaves.len() {
            for j in i + 1..leaves.len() {
                let d: f64 = c[i]
                    .iter()
                    .zip(&c[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let psi = h.tree_distance(leaves[i], leaves[j]).unwrap() as f64;
                assert!((d - 1.5 * psi).abs() < 1e-9, "{d} vs {psi}");
                pairs.push((psi, d));
            }
        }
        // Rank check: psi order is reproduced exactly by distance order.
        for &(p1, d1) in &pairs {
            for &(p2, d2) in &pairs {
                if p1 < p2 {
                    assert!(d1 < d2);
                } else if p1 == p2 {
                    assert!((d1 - d2).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let h = parse_taxonomy(TOY).unwrap();
        let cfg = SyntheticConfig {
            seed: 11,
            ..SyntheticConfig::for_hierarchy(&h, 25, 10)
        };
        let a = generate_synthetic(&h, &cfg).unwrap();
        let b = generate_synthetic(&h, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(
            &h,
            &SyntheticConfig {
                seed: 12,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a.features, c.features);
        for &leaf in h.leaves() {
            let n = a.labels.iter().filter(|&l| l == Some(leaf)).count();
            assert_eq!(n, 25);
        }
    }

    #[test]
    fn split_shares_centers() {
        let h = parse_taxonomy(TOY).unwrap();
        let cfg = SyntheticConfig {
            noise_sigma: 1e-9,
            ..SyntheticConfig::for_hierarchy(&h, 4, 8)
        };
        let (a, b) = generate_split(&h, &cfg).unwrap();
        assert_eq!(a, generate_synthetic(&h, &cfg).unwrap());
        assert_ne!(a.labels, b.labels);
        let mean = |d: &Dataset, leaf| {
            let i = (0..d.labels.num_pixels())
                .find(|&i| d.labels.get(i) == Some(leaf))
                .unwrap();
            d.features.pixel(i).to_vec()
        };
        for &leaf in h.leaves() {
            let (x, y) = (mean(&a, leaf), mean(&b, leaf));
            assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-6));
        }
    }

    #[test]
    fn config_errors() {
        let h = parse_taxonomy(TOY).unwrap();
        let cfg = SyntheticConfig::for_hierarchy(&h, 10, 10);
        assert!(generate_synthetic(
            &h,
            &SyntheticConfig {
                noise_sigma: 0.0,
                ..cfg.clone()
            }
        )
        .is_err());
        assert!(generate_synthetic(
            &h,
            &SyntheticConfig {
                width: 7,
                ..cfg.clone()
            }
        )
        .is_err());
        assert!(generate_synthetic(
            &h,
            &SyntheticConfig {
                feature_dim: 3,
                ..cfg.clone()
            }
        )
        .is_err());
        assert!(matches!(
            generate_synthetic_from_file("/nonexistent/x.tax", &cfg),
            Err(Error::Io(_))
        ));
    }
}
