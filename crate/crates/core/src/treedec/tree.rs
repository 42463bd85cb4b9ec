use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::AttnMask;
use crate::numerics::{top_k_indices, Real};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    /// Index of the parent node; the root is its own parent.
    pub parent: usize,
    pub depth: usize,
    /// Which ranked candidate of its depth's distribution the node takes.
    pub rank: usize,
}

/// Candidate tree shape. Node 0 is the root (the token about to be fed);
/// every other node is identified by its branch-rank path from the root.
/// Nodes are ordered by depth, then path, so parents precede children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeSpec {
    nodes: Vec<TreeNode>,
    paths: Vec<Vec<usize>>,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self::from_paths(Vec::new()).expect("root-only tree")
    }
}

impl TreeSpec {
    /// Parses one comma-separated branch-rank path per line. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut paths = Vec::new();
        let mut seen = HashSet::new();
        let mut line_of = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let path = line
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::TreeSpec {
                    line: i + 1,
                    msg: format!("expected comma-separated ranks, got {line:?}"),
                })?;
            if !seen.insert(path.clone()) {
                return Err(Error::TreeSpec {
                    line: i + 1,
                    msg: format!("duplicate path {line:?}"),
                });
            }
            paths.push(path);
            line_of.push(i + 1);
        }
        for (path, &line) in paths.iter().zip(&line_of) {
            if path.len() > 1 && !seen.contains(&path[..path.len() - 1]) {
                return Err(Error::TreeSpec {
                    line,
                    msg: format!("path {path:?} has no parent entry"),
                });
            }
        }
        Self::from_paths(paths)
    }

    /// Every combination of the top `branching[d]` candidates at depth `d + 1`.
    pub fn full(branching: &[usize]) -> Self {
        let mut level: Vec<Vec<usize>> = vec![Vec::new()];
        let mut paths = Vec::new();
        for &b in branching {
            level = level
                .iter()
                .flat_map(|p| {
                    (0..b).map(move |r| {
                        let mut q = p.clone();
                        q.push(r);
                        q
                    })
                })
                .collect();
            paths.extend(level.iter().cloned());
        }
        Self::from_paths(paths).expect("complete tree")
    }

    /// A single chain taking the top candidate at each of `depth` steps.
    pub fn chain(depth: usize) -> Self {
        Self::full(&vec![1; depth])
    }

    fn from_paths(mut paths: Vec<Vec<usize>>) -> Result<Self> {
        paths.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let mut nodes = vec![TreeNode {
            parent: 0,
            depth: 0,
            rank: 0,
        }];
        let mut all = vec![Vec::new()];
        for path in paths {
            let parent = all
                .iter()
                .position(|p| p.as_slice() == &path[..path.len() - 1])
                .ok_or_else(|| Error::Invalid(format!("path {path:?} has no parent")))?;
            nodes.push(TreeNode {
                parent,
                depth: path.len(),
                rank: *path.last().expect("non-empty path"),
            });
            all.push(path);
        }
        Ok(Self { nodes, paths: all })
    }

    /// Number of nodes including the root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when the tree is the root alone.
    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }

    pub fn path(&self, i: usize) -> &[usize] {
        &self.paths[i]
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Largest number of children of any node at each depth `0..depth`.
    pub fn branching(&self) -> Vec<usize> {
        let mut out = vec![0; self.depth()];
        for (i, n) in self.nodes.iter().enumerate() {
            let kids = self.children(i).count();
            if n.depth < out.len() {
                out[n.depth] = out[n.depth].max(kids);
            }
        }
        out
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .filter(move |(_, n)| n.parent == i)
            .map(|(j, _)| j)
    }

    /// Ancestors of `i` from the root down, excluding `i`.
    pub fn ancestors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = i;
        while cur != 0 {
            cur = self.nodes[cur].parent;
            out.push(cur);
        }
        out.reverse();
        out
    }

    /// Nodes no deeper than `max_depth`.
    pub fn truncated(&self, max_depth: usize) -> Self {
        let paths = self.paths[1..].iter().filter(|p| p.len() <= max_depth).cloned().collect();
        Self::from_paths(paths).expect("prefix-closed")
    }

    /// Spec file text that parses back to this tree.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.paths[1..] {
            let parts: Vec<String> = p.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}", parts.join(","));
        }
        out
    }
}

/// A tree with concrete tokens and positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DraftTree {
    pub spec: TreeSpec,
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
}

/// Fills `spec` from per-step draft distributions: the node at depth `d`
/// with rank `r` takes the `r`-th most probable token of `step_dists[d - 1]`
/// (ties go to the lower id).
pub fn build_candidates<T: Real>(step_dists: &[Vec<T>], spec: &TreeSpec, root_token: u32, root_position: usize) -> Result<DraftTree> {
    if spec.depth() > step_dists.len() {
        return Err(Error::Invalid(format!(
            "tree of depth {} needs {} draft distributions, got {}",
            spec.depth(),
            spec.depth(),
            step_dists.len()
        )));
    }
    let mut ranked: Vec<Vec<u32>> = Vec::with_capacity(spec.depth());
    for d in 1..=spec.depth() {
        let need = spec.nodes().iter().filter(|n| n.depth == d).map(|n| n.rank + 1).max().unwrap_or(0);
        let dist = &step_dists[d - 1];
        if need > dist.len() {
            return Err(Error::Invalid(format!(
                "branch rank {} at depth {d} exceeds vocabulary {}",
                need - 1,
                dist.len()
            )));
        }
        ranked.push(top_k_indices(dist, need));
    }
    let mut tokens = Vec::with_capacity(spec.len());
    let mut positions = Vec::with_capacity(spec.len());
    for n in spec.nodes() {
        tokens.push(if n.depth == 0 { root_token } else { ranked[n.depth - 1][n.rank] });
        positions.push(root_position + n.depth);
    }
    Ok(DraftTree {
        spec: spec.clone(),
        tokens,
        positions,
    })
}

/// Rows of a tree forward over a cache of `cache_len` entries.
#[derive(Clone, Debug)]
pub struct FlatTree {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub mask: AttnMask,
}

/// One row per node in tree order; each row sees the whole cache, its
/// ancestors and itself.
pub fn flatten_tree(tree: &DraftTree, cache_len: usize, max_positions: usize) -> Result<FlatTree> {
    if let Some(&p) = tree.positions.iter().find(|&&p| p >= max_positions) {
        return Err(Error::CacheOverflow {
            needed: p + 1,
            capacity: max_positions,
        });
    }
    let n = tree.spec.len();
    let mut mask = AttnMask::empty(n, cache_len + n);
    for i in 0..n {
        for c in 0..cache_len {
            mask.allow(i, c);
        }
        for a in tree.spec.ancestors(i) {
            mask.allow(i, cache_len + a);
        }
        mask.allow(i, cache_len + i);
    }
    Ok(FlatTree {
        tokens: tree.tokens.clone(),
        positions: tree.positions.clone(),
        mask,
    })
}
