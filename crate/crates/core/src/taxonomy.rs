//! Tree-shaped class hierarchies.
//!
//! A [`ClassHierarchy`] is immutable once built. Node ids are dense `usize`
//! indices assigned in order of first appearance; names only matter at I/O
//! boundaries. Every node counts as its own ancestor and its own descendant.
//!
//! Levels are numbered from the leaves up: a node's level is one plus the
//! longest edge distance to any leaf below it, so leaves sit on level 1 and
//! the root on level `D + 1` where `D` is the tree height.
//!
//! # Taxonomy format
//!
//! ```text
//! # comment
//! root<TAB>all
//! all<TAB>vehicle
//! vehicle<TAB>car
//! ```
//!
//! The first non-comment line is `root<TAB>name`; every following line is a
//! `parent<TAB>child` edge. Edges may appear in any order. A later line
//! starting with `root` is an edge only when some class is itself named
//! `root`; otherwise it is a second root declaration and rejected.

use std::collections::HashMap;

use crate::error::{Error, Result, TaxonomyError};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassHierarchy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    leaves: Vec<usize>,
    leaf_pos: Vec<Option<usize>>,
    depth: Vec<usize>,
    level: Vec<usize>,
    height: usize,
    ancestors: Vec<Vec<usize>>,
    descendants: Vec<Vec<usize>>,
    dist: Vec<u32>,
}

impl ClassHierarchy {
    /// Builds a hierarchy from per-node names and parent links.
    ///
    /// Exactly one entry of `parents` must be `None` (the root).
    pub fn from_parents(names: Vec<String>, parents: Vec<Option<usize>>) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(TaxonomyError::Empty.into());
        }
        if parents.len() != n {
            return Err(Error::LengthMismatch {
                what: "parent links",
                expected: n,
                got: parents.len(),
            });
        }
        let mut index = HashMap::with_capacity(n);
        for (id, name) in names.iter().enumerate() {
            if index.insert(name.clone(), id).is_some() {
                return Err(TaxonomyError::DuplicateNode {
                    line: 0,
                    name: name.clone(),
                }
                .into());
            }
        }
        let mut root = None;
        for (id, p) in parents.iter().enumerate() {
            match p {
                None => {
                    if root.is_some() {
                        return Err(TaxonomyError::MultipleRoots {
                            line: 0,
                            name: names[id].clone(),
                        }
                        .into());
                    }
                    root = Some(id);
                }
                Some(p) if *p >= n => {
                    return Err(Error::OutOfRange {
                        what: "parent",
                        index: *p,
                        len: n,
                    })
                }
                Some(_) => {}
            }
        }
        let root = root.ok_or_else(|| TaxonomyError::Cycle {
            name: names[0].clone(),
        })?;

        // Walk every node up to the root; a walk longer than n means a cycle.
        let mut ancestors = Vec::with_capacity(n);
        for v in 0..n {
            let mut chain = vec![v];
            let mut cur = v;
            while let Some(p) = parents[cur] {
                if chain.len() > n {
                    return Err(TaxonomyError::Cycle {
                        name: names[v].clone(),
                    }
                    .into());
                }
                chain.push(p);
                cur = p;
            }
            ancestors.push(chain);
        }

        let mut children = vec![Vec::new(); n];
        for (v, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(v);
            }
        }
        let depth: Vec<usize> = ancestors.iter().map(|a| a.len() - 1).collect();
        let leaves: Vec<usize> = (0..n).filter(|&v| children[v].is_empty()).collect();
        let mut leaf_pos = vec![None; n];
        for (i, &l) in leaves.iter().enumerate() {
            leaf_pos[l] = Some(i);
        }
        let height = leaves.iter().map(|&l| depth[l]).max().unwrap_or(0);

        let mut descendants = vec![Vec::new(); n];
        for (v, chain) in ancestors.iter().enumerate() {
            for &a in chain {
                descendants[a].push(v);
            }
        }

        // Deepest nodes first so every child's level is known before its parent's.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| depth[*b].cmp(&depth[*a]));
        let mut level = vec![1usize; n];
        for &v in &order {
            if let Some(best) = children[v].iter().map(|&c| level[c]).max() {
                level[v] = best + 1;
            }
        }

        let mut dist = vec![0u32; n * n];
        let mut on_chain = vec![false; n];
        for u in 0..n {
            for &a in &ancestors[u] {
                on_chain[a] = true;
            }
            for v in 0..n {
                let lca = *ancestors[v]
                    .iter()
                    .find(|&&a| on_chain[a])
                    .expect("root is a common ancestor");
                dist[u * n + v] = (depth[u] + depth[v] - 2 * depth[lca]) as u32;
            }
            for &a in &ancestors[u] {
                on_chain[a] = false;
            }
        }

        Ok(Self {
            names,
            index,
            parent: parents,
            children,
            root,
            leaves,
            leaf_pos,
            depth,
            level,
            height,
            ancestors,
            descendants,
            dist,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    /// Always false; a hierarchy has at least its root.
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Leaf ids in ascending order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.leaf_pos.get(v).is_some_and(|p| p.is_some())
    }

    /// Position of leaf `v` inside [`leaves`](Self::leaves).
    pub fn leaf_index(&self, v: usize) -> Option<usize> {
        self.leaf_pos.get(v).copied().flatten()
    }

    pub fn name(&self, v: usize) -> &str {
        &self.names[v]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Edge count from the root.
    pub fn depth(&self, v: usize) -> usize {
        self.depth[v]
    }

    pub fn level(&self, v: usize) -> usize {
        self.level[v]
    }

    /// `D`: number of edges on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of levels including the root level, `D + 1`.
    pub fn num_levels(&self) -> usize {
        self.height + 1
    }

    fn check(&self, v: usize) -> Result<()> {
        if v < self.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "node",
                index: v,
                len: self.len(),
            })
        }
    }

    /// Nodes on the path from `v` to the root, starting with `v` itself.
    pub fn ancestors(&self, v: usize) -> Result<&[usize]> {
        self.check(v)?;
        Ok(&self.ancestors[v])
    }

    /// `v` and every node below it, in ascending id order.
    pub fn descendants(&self, v: usize) -> Result<&[usize]> {
        self.check(v)?;
        Ok(&self.descendants[v])
    }

    pub(crate) fn ancestors_of(&self, v: usize) -> &[usize] {
        &self.ancestors[v]
    }

    pub(crate) fn descendants_of(&self, v: usize) -> &[usize] {
        &self.descendants[v]
    }

    /// Length in edges of the shortest path between `u` and `v`.
    pub fn tree_distance(&self, u: usize, v: usize) -> Result<usize> {
        self.check(u)?;
        self.check(v)?;
        Ok(self.psi(u, v))
    }

    pub(crate) fn psi(&self, u: usize, v: usize) -> usize {
        self.dist[u * self.len() + v] as usize
    }

    /// One path per leaf, each ordered leaf first and root last.
    pub fn root_to_leaf_paths(&self) -> Vec<Vec<usize>> {
        self.leaves
            .iter()
            .map(|&l| self.ancestors[l].clone())
            .collect()
    }

    /// The class `v` is merged into when evaluating at level `l`.
    ///
    /// This is the highest node on `v`'s ancestor chain whose level does not
    /// exceed `l`. On balanced trees it is the unique level-`l` ancestor; a
    /// shallow leaf in an unbalanced tree keeps its own class on the levels
    /// its branch skips.
    pub fn level_ancestor(&self, v: usize, l: usize) -> Result<usize> {
        self.check(v)?;
        self.check_level(l)?;
        Ok(self.level_ancestor_of(v, l))
    }

    pub(crate) fn level_ancestor_of(&self, v: usize, l: usize) -> usize {
        let mut best = v;
        for &a in &self.ancestors[v] {
            if self.level[a] <= l {
                best = a;
            } else {
                break;
            }
        }
        best
    }

    pub(crate) fn check_level(&self, l: usize) -> Result<()> {
        if (1..=self.num_levels()).contains(&l) {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "level",
                index: l,
                len: self.num_levels(),
            })
        }
    }

    /// Classes that leaves are merged into at level `l`, ascending.
    pub fn level_classes(&self, l: usize) -> Result<Vec<usize>> {
        self.check_level(l)?;
        let mut out: Vec<usize> = self
            .leaves
            .iter()
            .map(|&leaf| self.level_ancestor_of(leaf, l))
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Number of classes on each level, finest first.
    pub fn level_counts(&self) -> Vec<usize> {
        (1..=self.num_levels())
            .map(|l| self.level_classes(l).map(|c| c.len()).unwrap_or(0))
            .collect()
    }
}

impl std::str::FromStr for ClassHierarchy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_taxonomy(s)
    }
}

/// Parses raw bytes of a `.tax` file; non-UTF-8 input is rejected.
pub fn parse_taxonomy_bytes(bytes: &[u8]) -> Result<ClassHierarchy> {
    let text = std::str::from_utf8(bytes).map_err(|e| TaxonomyError::Malformed {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    parse_taxonomy(text)
}

pub fn parse_taxonomy(text: &str) -> Result<ClassHierarchy> {
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<&'_ str, usize> = HashMap::new();
    let mut parents: Vec<Option<usize>> = Vec::new();
    let mut parent_line: Vec<usize> = Vec::new();
    let mut root: Option<usize> = None;

    fn intern<'a>(
        ids: &mut HashMap<&'a str, usize>,
        name: &'a str,
        names: &mut Vec<String>,
        parents: &mut Vec<Option<usize>>,
        parent_line: &mut Vec<usize>,
    ) -> usize {
        *ids.entry(name).or_insert_with(|| {
            names.push(name.to_owned());
            parents.push(None);
            parent_line.push(0);
            names.len() - 1
        })
    }

    for (i, raw) in text.split('\n').enumerate() {
        let line = i + 1;
        let content = raw.strip_suffix('\r').unwrap_or(raw);
        let trimmed = content.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = content.split('\t');
        let (Some(first), Some(second), None) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(TaxonomyError::Malformed {
                line,
                reason: "expected exactly two tab-separated fields".into(),
            }
            .into());
        };
        let (first, second) = (first.trim(), second.trim());
        if first.is_empty() || second.is_empty() {
            return Err(TaxonomyError::Malformed {
                line,
                reason: "empty class name".into(),
            }
            .into());
        }

        // A later `root` line is an edge only when a class is named `root`.
        if first == "root" && (root.is_none() || !ids.contains_key("root")) {
            if root.is_some() {
                return Err(TaxonomyError::MultipleRoots {
                    line,
                    name: second.to_owned(),
                }
                .into());
            }
            if !names.is_empty() {
                return Err(TaxonomyError::MissingRoot { line }.into());
            }
            root = Some(intern(
                &mut ids,
                second,
                &mut names,
                &mut parents,
                &mut parent_line,
            ));
            continue;
        }
        let Some(root_id) = root else {
            return Err(TaxonomyError::MissingRoot { line }.into());
        };

        let p = intern(&mut ids, first, &mut names, &mut parents, &mut parent_line);
        let c = intern(&mut ids, second, &mut names, &mut parents, &mut parent_line);
        if p == c || c == root_id {
            return Err(TaxonomyError::Cycle {
                name: second.to_owned(),
            }
            .into());
        }
        match parents[c] {
            Some(existing) if existing == p => {
                return Err(TaxonomyError::DuplicateEdge {
                    line,
                    parent: first.to_owned(),
                    child: second.to_owned(),
                }
                .into())
            }
            Some(_) => {
                return Err(TaxonomyError::DuplicateNode {
                    line,
                    name: second.to_owned(),
                }
                .into())
            }
            None => {
                parents[c] = Some(p);
                parent_line[c] = line;
            }
        }
    }

    let Some(root_id) = root else {
        return Err(TaxonomyError::Empty.into());
    };
    if let Some(v) = (0..names.len()).find(|&v| v != root_id && parents[v].is_none()) {
        return Err(TaxonomyError::DanglingParent {
            name: names[v].clone(),
        }
        .into());
    }
    // Every node now has one parent; anything not reaching the root is on a cycle.
    for v in 0..names.len() {
        let mut cur = v;
        let mut steps = 0;
        while let Some(p) = parents[cur] {
            steps += 1;
            if steps > names.len() {
                return Err(TaxonomyError::Cycle {
                    name: names[v].clone(),
                }
                .into());
            }
            cur = p;
        }
    }
    ClassHierarchy::from_parents(names, parents)
}
