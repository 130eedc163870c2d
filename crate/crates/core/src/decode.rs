//! Root-to-leaf path decoding and per-level mIoU.
//!
//! A pixel is assigned the leaf whose root-to-leaf path has the largest sum
//! of raw scores, ties going to the smallest leaf id. Sums are not
//! normalized by path length, so in unbalanced trees deeper leaves collect
//! more terms than shallow ones.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coherence::check_len;
use crate::error::{Error, Result};
use crate::field::{LabelField, ScoreField, IGNORE};
use crate::taxonomy::ClassHierarchy;

/// Leaf id of the top-scoring root-to-leaf path.
pub fn decode_path(h: &ClassHierarchy, s: &[f64]) -> Result<usize> {
    check_len(h, s.len(), "score vector")?;
    Ok(decode_unchecked(h, s))
}

fn decode_unchecked(h: &ClassHierarchy, s: &[f64]) -> usize {
    // best[v] = (suffix sum from v down to its best leaf, that leaf).
    let mut best: Vec<(f64, usize)> = vec![(0.0, 0); h.len()];
    // Post-order: process children before parents.
    let mut stack = vec![(h.root(), false)];
    while let Some((v, expanded)) = stack.pop() {
        let kids = h.children(v);
        if kids.is_empty() {
            best[v] = (s[v], v);
        } else if expanded {
            let mut top = best[kids[0]];
            for &c in &kids[1..] {
                let cand = best[c];
                if cand.0 > top.0 || (cand.0 == top.0 && cand.1 < top.1) {
                    top = cand;
                }
            }
            best[v] = (s[v] + top.0, top.1);
        } else {
            stack.push((v, true));
            stack.extend(kids.iter().map(|&c| (c, false)));
        }
    }
    best[h.root()].1
}

/// Decodes every pixel. Runs in parallel; output is independent of scheduling.
pub fn decode_field(h: &ClassHierarchy, scores: &ScoreField) -> Result<LabelField> {
    scores.check_hierarchy(h)?;
    let labels: Vec<u32> = (0..scores.num_pixels())
        .into_par_iter()
        .map(|i| decode_unchecked(h, scores.pixel(i)) as u32)
        .collect();
    LabelField::new(scores.height(), scores.width(), labels)
}

/// Relabels every pixel with its level-`level` class; ignored pixels stay
/// ignored.
pub fn merge_to_level(h: &ClassHierarchy, field: &LabelField, level: usize) -> Result<LabelField> {
    h.check_level(level)?;
    let mut map = Vec::with_capacity(h.len());
    for v in 0..h.len() {
        map.push(h.level_ancestor_of(v, level) as u32);
    }
    let labels = field
        .raw()
        .iter()
        .map(|&x| match x {
            IGNORE => Ok(IGNORE),
            v => map.get(v as usize).copied().ok_or(Error::OutOfRange {
                what: "node",
                index: v as usize,
                len: h.len(),
            }),
        })
        .collect::<Result<Vec<u32>>>()?;
    LabelField::new(field.height(), field.width(), labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScore {
    pub level: usize,
    /// IoU per class id, for classes present in ground truth or prediction.
    pub per_class: BTreeMap<usize, f64>,
    pub miou: f64,
}

/// Integer confusion counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
}

/// Per-class intersection and union counts over pixels with non-ignored
/// ground truth. A prediction of `IGNORE` counts as no class.
pub fn class_counts(
    pred: &LabelField,
    gt: &LabelField,
    classes: &[usize],
) -> Result<BTreeMap<usize, ClassCounts>> {
    if !pred.same_dims(gt) {
        return Err(Error::invalid(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut counts: BTreeMap<usize, ClassCounts> = classes
        .iter()
        .map(|&c| (c, ClassCounts::default()))
        .collect();
    for (p, g) in pred.iter().zip(gt.iter()) {
        let Some(g) = g else { continue };
        if p == Some(g) {
            if let Some(c) = counts.get_mut(&g) {
                c.intersection += 1;
                c.union += 1;
            }
            continue;
        }
        if let Some(c) = counts.get_mut(&g) {
            c.union += 1;
        }
        if let Some(c) = p.and_then(|p| counts.get_mut(&p)) {
            c.union += 1;
        }
    }
    Ok(counts)
}

/// Mean IoU over `classes`, skipping classes absent from both fields.
pub fn miou(
    pred: &LabelField,
    gt: &LabelField,
    classes: &[usize],
    level: usize,
) -> Result<LevelScore> {
    let counts = class_counts(pred, gt, classes)?;
    let per_class: BTreeMap<usize, f64> = counts
        .into_iter()
        .filter(|(_, c)| c.union > 0)
        .map(|(k, c)| (k, c.intersection as f64 / c.union as f64))
        .collect();
    if per_class.is_empty() {
        return Err(Error::invalid(
            "no class present in prediction or ground truth",
        ));
    }
    let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(LevelScore {
        level,
        per_class,
        miou,
    })
}

/// mIoU on every level `1..=D+1` for an already-decoded prediction.
pub fn evaluate_prediction(
    h: &ClassHierarchy,
    pred: &LabelField,
    gt: &LabelField,
) -> Result<Vec<LevelScore>> {
    (1..=h.num_levels())
        .map(|l| {
            let classes = h.level_classes(l)?;
            miou(
                &merge_to_level(h, pred, l)?,
                &merge_to_level(h, gt, l)?,
                &classes,
                l,
            )
        })
        .collect()
}

/// Decodes `scores` and reports mIoU on every level. The root level is
/// trivially 1.0 whenever any pixel is labeled.
pub fn evaluate_all_levels(
    h: &ClassHierarchy,
    scores: &ScoreField,
    gt: &LabelField,
) -> Result<Vec<LevelScore>> {
    let pred = decode_field(h, scores)?;
    evaluate_prediction(h, &pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::parse_taxonomy;

    fn tree() -> ClassHierarchy {
        parse_taxonomy("root\troot\nroot\tA\nroot\tB\nA\ta1\nA\ta2\n").unwrap()
    }

    #[test]
    fn decode_examples() {
        let h = tree();
        let id = |n| h.id(n).unwrap();
        let mut s = vec![0.0; h.len()];
        for (n, x) in [
            ("root", 0.9),
            ("A", 0.5),
            ("a1", 0.7),
            ("a2", 0.2),
            ("B", 0.8),
        ] {
            s[id(n)] = x;
        }
        assert_eq!(decode_path(&h, &s).unwrap(), id("a1"));
        assert_eq!(decode_path(&h, &vec![0.5; h.len()]).unwrap(), id("a1"));
        assert!(decode_path(&h, &[0.5; 2]).is_err());

        let chain = parse_taxonomy("root\tr\nr\tx\nx\ty\n").unwrap();
        assert_eq!(
            decode_path(&chain, &[0.0, 1.0, 0.3]).unwrap(),
            chain.id("y").unwrap()
        );
    }

    #[test]
    fn uniform_scores_pick_smallest_leaf() {
        let h = parse_taxonomy("root\tr\nr\tB\nr\tA\nB\tb2\nB\tb1\nA\ta1\nA\ta2\n").unwrap();
        let leaf = decode_path(&h, &vec![0.25; h.len()]).unwrap();
        assert_eq!(leaf, *h.leaves().iter().min().unwrap());
    }

    #[test]
    fn decode_field_constant_on_uniform() {
        let h = tree();
        let f = ScoreField::new(3, 2, h.len(), vec![0.5; 6 * h.len()]).unwrap();
        let d = decode_field(&h, &f).unwrap();
        assert!(d.iter().all(|v| v == Some(h.id("a1").unwrap())));
    }

    #[test]
    fn merge_levels() {
        let h = tree();
        let id = |n| h.id(n).unwrap() as u32;
        let f = LabelField::new(1, 4, vec![id("a1"), id("a2"), id("B"), IGNORE]).unwrap();
        assert_eq!(merge_to_level(&h, &f, 1).unwrap(), f);
        let m2 = merge_to_level(&h, &f, 2).unwrap();
        assert_eq!(m2.raw(), &[id("A"), id("A"), id("B"), IGNORE]);
        let m3 = merge_to_level(&h, &f, 3).unwrap();
        assert_eq!(m3.raw(), &[id("root"), id("root"), id("root"), IGNORE]);
        assert!(merge_to_level(&h, &f, 0).is_err());
        assert!(merge_to_level(&h, &f, 4).is_err());
    }

    #[test]
    fn miou_simple_cases() {
        let gt = LabelField::new(1, 4, vec![1, 1, 2, 2]).unwrap();
        let r = miou(&gt, &gt, &[1, 2, 3], 1).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class.len(), 2);

        let a = LabelField::new(1, 2, vec![1, 1]).unwrap();
        let b = LabelField::new(1, 2, vec![2, 2]).unwrap();
        assert_eq!(miou(&a, &b, &[1, 2], 1).unwrap().miou, 0.0);

        // class 1: I=1, U=3; class 2: I=1, U=3
        let p = LabelField::new(1, 4, vec![1, 2, 1, 2]).unwrap();
        let r = miou(&p, &gt, &[1, 2], 1).unwrap();
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);

        assert!(miou(&a, &gt, &[1], 1).is_err());
        let none = LabelField::new(1, 2, vec![IGNORE, IGNORE]).unwrap();
        assert!(miou(&none, &none, &[1], 1).is_err());
    }

    #[test]
    fn ignored_ground_truth_is_skipped() {
        let gt = LabelField::new(1, 3, vec![1, IGNORE, 2]).unwrap();
        let p = LabelField::new(1, 3, vec![1, 2, 2]).unwrap();
        assert_eq!(miou(&p, &gt, &[1, 2], 1).unwrap().miou, 1.0);
    }

    #[test]
    fn perfect_scores_all_levels_one() {
        let h = tree();
        let leaves = h.leaves().to_vec();
        let mut data = Vec::new();
        let mut gt = Vec::new();
        for i in 0..6 {
            let leaf = leaves[i % leaves.len()];
            let l = crate::coherence::expand_labels(&h, leaf).unwrap();
            data.extend(l.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            gt.push(leaf as u32);
        }
        let s = ScoreField::new(2, 3, h.len(), data).unwrap();
        let g = LabelField::new(2, 3, gt).unwrap();
        let levels = evaluate_all_levels(&h, &s, &g).unwrap();
        assert_eq!(levels.len(), 3);
        assert!(levels.iter().all(|l| l.miou == 1.0));
    }

    #[test]
    fn confusion_inside_superclass_vanishes_on_merge() {
        let h = tree();
        let id = |n| h.id(n).unwrap() as u32;
        let gt = LabelField::new(1, 4, vec![id("a1"), id("a2"), id("B"), id("a1")]).unwrap();
        let pred = LabelField::new(1, 4, vec![id("a2"), id("a1"), id("B"), id("a1")]).unwrap();
        let r = evaluate_prediction(&h, &pred, &gt).unwrap();
        assert!(r[0].miou < r[1].miou);
        assert_eq!(r[1].miou, 1.0);
        assert!(r[1].miou <= r[2].miou);
    }
}
