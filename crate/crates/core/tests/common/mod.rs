//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use hiertax::ClassHierarchy;

pub const TOY: &str = include_str!("../../taxonomies/toy_3level.tax");
pub const PASCAL_PERSON_PART: &str = include_str!("../../taxonomies/pascal_person_part.tax");
pub const CITYSCAPES: &str = include_str!("../../taxonomies/cityscapes.tax");
pub const LIP: &str = include_str!("../../taxonomies/lip.tax");
pub const MAPILLARY: &str = include_str!("../../taxonomies/mapillary_vistas.tax");

/// One-level tree: a root with four leaf children.
pub const FLAT: &str = "root\tall\nall\tw\nall\tx\nall\ty\nall\tz\n";

/// Undirected adjacency built from parent links only.
fn adjacency(h: &ClassHierarchy) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); h.len()];
    for v in 0..h.len() {
        if let Some(p) = h.parent(v) {
            adj[v].push(p);
            adj[p].push(v);
        }
    }
    adj
}

/// All-pairs edge distance by breadth-first search.
pub fn bfs_distances(h: &ClassHierarchy) -> Vec<Vec<usize>> {
    let adj = adjacency(h);
    (0..h.len())
        .map(|src| {
            let mut d = vec![usize::MAX; h.len()];
            d[src] = 0;
            let mut q = VecDeque::from([src]);
            while let Some(u) = q.pop_front() {
                for &w in &adj[u] {
                    if d[w] == usize::MAX {
                        d[w] = d[u] + 1;
                        q.push_back(w);
                    }
                }
            }
            d
        })
        .collect()
}

/// Level of every node: 1 plus the longest downward edge count to a leaf.
pub fn levels(h: &ClassHierarchy) -> Vec<usize> {
    fn go(h: &ClassHierarchy, v: usize, out: &mut [usize]) -> usize {
        let l = 1 + h
            .children(v)
            .iter()
            .map(|&c| go(h, c, out))
            .max()
            .unwrap_or(0);
        out[v] = l;
        l
    }
    let mut out = vec![0; h.len()];
    go(h, h.root(), &mut out);
    out
}

/// Highest ancestor of `leaf` whose level does not exceed `l`.
pub fn merge_oracle(h: &ClassHierarchy, lv: &[usize], leaf: usize, l: usize) -> usize {
    let mut v = leaf;
    while let Some(p) = h.parent(v) {
        if lv[p] > l {
            break;
        }
        v = p;
    }
    v
}

/// Every root-to-leaf path, found by walking parent links from each leaf.
pub fn enumerate_paths(h: &ClassHierarchy) -> Vec<(usize, Vec<usize>)> {
    (0..h.len())
        .filter(|&v| h.children(v).is_empty())
        .map(|leaf| {
            let mut path = vec![leaf];
            let mut v = leaf;
            while let Some(p) = h.parent(v) {
                path.push(p);
                v = p;
            }
            (leaf, path)
        })
        .collect()
}

/// Exhaustive best path: largest leaf-to-root score sum, ties to the smaller leaf.
pub fn decode_oracle(h: &ClassHierarchy, s: &[f64]) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for (leaf, path) in enumerate_paths(h) {
        let sum = path
            .iter()
            .fold(None, |acc: Option<f64>, &v| {
                Some(acc.map_or(s[v], |a| a + s[v]))
            })
            .unwrap();
        best = match best {
            Some((b, bl)) if b > sum || (b == sum && bl < leaf) => Some((b, bl)),
            _ => Some((sum, leaf)),
        };
    }
    best.unwrap().1
}

/// Central difference quotient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += step;
            down[i] -= step;
            (f(&up) - f(&down)) / (2.0 * step)
        })
        .collect()
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale < 1e-12 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
