//! Communication structures: rings, k-color k-ary spanning trees and the
//! payload chunk plan that maps element ranges onto colors.
//!
//! A multi-color tree set splits one allreduce into `k` independent
//! reductions. Color `c` reduces chunk `c` of the payload along its own BFS
//! tree, and no rank is a non-leaf in more than one color, so every rank does
//! the summing work for at most one chunk while only forwarding the others.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a rank inside a communicator.
pub type RankId = usize;

/// Default number of colors, the evaluated 4-color configuration.
pub const DEFAULT_COLORS: usize = 4;
/// Default tree arity.
pub const DEFAULT_ARITY: usize = 4;

/// One spanning tree. `parent` and `children` are indexed by rank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorTree {
    pub color: usize,
    pub root: RankId,
    pub parent: Vec<Option<RankId>>,
    pub children: Vec<Vec<RankId>>,
    /// The root plus every rank that has at least one child.
    pub interior: BTreeSet<RankId>,
}

impl ColorTree {
    /// Breadth-first `arity`-ary tree over `sequence`; `sequence[0]` is the root
    /// and node `i > 0` hangs below `sequence[(i - 1) / arity]`.
    pub fn bfs(color: usize, sequence: &[RankId], arity: usize) -> Self {
        let n = sequence.len();
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        for (i, &rank) in sequence.iter().enumerate().skip(1) {
            let p = sequence[(i - 1) / arity];
            parent[rank] = Some(p);
            children[p].push(rank);
        }
        Self::from_links(color, sequence[0], parent, children)
    }

    /// Chain rooted at `order[0]`: `order[i]`'s parent is `order[i - 1]`.
    pub fn chain(order: &[RankId]) -> Self {
        Self::bfs(0, order, 1)
    }

    /// Star: every other rank is a child of `root`, in ascending rank order.
    pub fn star(n_ranks: usize, root: RankId) -> Self {
        let mut parent = vec![Some(root); n_ranks];
        parent[root] = None;
        let mut children = vec![Vec::new(); n_ranks];
        children[root] = (0..n_ranks).filter(|&r| r != root).collect();
        Self::from_links(0, root, parent, children)
    }

    fn from_links(
        color: usize,
        root: RankId,
        parent: Vec<Option<RankId>>,
        children: Vec<Vec<RankId>>,
    ) -> Self {
        let interior = children
            .iter()
            .enumerate()
            .filter(|(r, c)| *r == root || !c.is_empty())
            .map(|(r, _)| r)
            .collect();
        Self {
            color,
            root,
            parent,
            children,
            interior,
        }
    }

    pub fn n_ranks(&self) -> usize {
        self.parent.len()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut depth = 0;
        let mut frontier = vec![self.root];
        while !frontier.is_empty() {
            let next: Vec<_> = frontier
                .iter()
                .flat_map(|&r| self.children[r].iter().copied())
                .collect();
            if next.is_empty() {
                break;
            }
            depth += 1;
            frontier = next;
        }
        depth
    }
}

/// One contiguous range of the payload reduced along the tree of `color`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub color: usize,
    pub start: usize,
    pub len: usize,
}

impl Chunk {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub payload_len: usize,
    pub chunks: Vec<Chunk>,
}

/// Splits `payload_len` elements into `k` contiguous chunks. The first
/// `payload_len % k` chunks get one extra element.
pub fn make_chunk_plan(payload_len: usize, k: usize) -> ChunkPlan {
    let k = k.max(1);
    let base = payload_len / k;
    let extra = payload_len % k;
    let mut start = 0;
    let chunks = (0..k)
        .map(|color| {
            let len = base + usize::from(color < extra);
            let chunk = Chunk { color, start, len };
            start += len;
            chunk
        })
        .collect();
    ChunkPlan {
        payload_len,
        chunks,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorTreeSet {
    pub k: usize,
    pub arity: usize,
    pub n_ranks: usize,
    pub trees: Vec<ColorTree>,
    pub plan: ChunkPlan,
}

impl ColorTreeSet {
    /// Replaces the chunk plan with one covering `payload_len` elements.
    pub fn with_payload(mut self, payload_len: usize) -> Self {
        self.plan = make_chunk_plan(payload_len, self.k);
        self
    }

    pub fn plan_for(&self, payload_len: usize) -> ChunkPlan {
        make_chunk_plan(payload_len, self.k)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Builds `k` BFS trees of the given arity over `n_ranks` ranks. Color `c`
/// lays the ranks out starting at `c * ceil(n_ranks / k)`, which places each
/// color's interior nodes in its own block of consecutive ranks.
pub fn build_multicolor_trees(n_ranks: usize, k: usize, arity: usize) -> Result<ColorTreeSet> {
    if n_ranks < 2 {
        return Err(Error::InvalidConfig(format!(
            "multi-color trees need at least 2 ranks, got {n_ranks}"
        )));
    }
    if k == 0 || k > n_ranks {
        return Err(Error::InvalidConfig(format!(
            "color count {k} must be in 1..={n_ranks}"
        )));
    }
    if arity == 0 {
        return Err(Error::InvalidConfig("arity must be at least 1".into()));
    }
    let shift = n_ranks.div_ceil(k);
    let trees = (0..k)
        .map(|c| {
            let sequence: Vec<_> = (0..n_ranks).map(|i| (i + c * shift) % n_ranks).collect();
            ColorTree::bfs(c, &sequence, arity)
        })
        .collect();
    let set = ColorTreeSet {
        k,
        arity,
        n_ranks,
        trees,
        plan: make_chunk_plan(0, k),
    };
    if let Some(err) = first_disjointness_error(&set) {
        return Err(err);
    }
    Ok(set)
}

fn first_disjointness_error(set: &ColorTreeSet) -> Option<Error> {
    let mut owner = vec![None; set.n_ranks];
    for tree in &set.trees {
        for &r in &tree.interior {
            match owner.get(r).copied().flatten() {
                Some(first) => {
                    return Some(Error::DisjointnessViolation {
                        rank: r,
                        first,
                        second: tree.color,
                    })
                }
                None => {
                    if let Some(slot) = owner.get_mut(r) {
                        *slot = Some(tree.color);
                    }
                }
            }
        }
    }
    None
}

/// Ring visiting ranks in order starting from the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingOrder {
    pub order: Vec<RankId>,
    pub root: RankId,
}

impl RingOrder {
    /// The reduce-to-root view of the ring: each rank's parent is its
    /// predecessor in `order`.
    pub fn as_tree(&self) -> ColorTree {
        ColorTree::chain(&self.order)
    }
}

pub fn build_ring(n_ranks: usize, root: RankId) -> Result<RingOrder> {
    if n_ranks == 0 || root >= n_ranks {
        return Err(Error::InvalidConfig(format!(
            "ring root {root} out of range for {n_ranks} ranks"
        )));
    }
    Ok(RingOrder {
        order: (0..n_ranks).map(|i| (root + i) % n_ranks).collect(),
        root,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ColorMismatch { index: usize, color: usize },
    WrongRankCount { color: usize, len: usize },
    SpanViolation { color: usize, rank: RankId },
    RootViolation { color: usize },
    ParentChildMismatch { color: usize, rank: RankId },
    ArityViolation { color: usize, rank: RankId, children: usize },
    InteriorMismatch { color: usize, rank: RankId },
    DisjointnessViolation { rank: RankId, colors: (usize, usize) },
    ChunkCoverage { detail: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of a tree set and lists what is broken.
pub fn validate_tree_set(ts: &ColorTreeSet) -> ValidationReport {
    let mut out = Vec::new();
    let n = ts.n_ranks;
    if ts.trees.len() != ts.k {
        out.push(Violation::ChunkCoverage {
            detail: format!("{} trees for k = {}", ts.trees.len(), ts.k),
        });
    }
    for (index, tree) in ts.trees.iter().enumerate() {
        validate_tree(index, tree, n, ts.arity, &mut out);
    }

    let mut owner: Vec<Option<usize>> = vec![None; n];
    for tree in &ts.trees {
        for &r in tree.interior.iter().filter(|&&r| r < n) {
            match owner[r] {
                Some(first) if first != tree.color => out.push(Violation::DisjointnessViolation {
                    rank: r,
                    colors: (first, tree.color),
                }),
                _ => owner[r] = Some(tree.color),
            }
        }
    }

    let plan = &ts.plan;
    if plan.chunks.len() != ts.k {
        out.push(Violation::ChunkCoverage {
            detail: format!("{} chunks for k = {}", plan.chunks.len(), ts.k),
        });
    }
    let mut next = 0;
    for (i, chunk) in plan.chunks.iter().enumerate() {
        if chunk.color != i || chunk.start != next {
            out.push(Violation::ChunkCoverage {
                detail: format!("chunk {i} starts at {} (expected {next})", chunk.start),
            });
        }
        next = chunk.start + chunk.len;
    }
    if next != plan.payload_len {
        out.push(Violation::ChunkCoverage {
            detail: format!("chunks cover {next} of {} elements", plan.payload_len),
        });
    }
    ValidationReport { violations: out }
}

fn validate_tree(index: usize, tree: &ColorTree, n: usize, arity: usize, out: &mut Vec<Violation>) {
    let color = tree.color;
    if color != index {
        out.push(Violation::ColorMismatch { index, color });
    }
    if tree.parent.len() != n || tree.children.len() != n {
        out.push(Violation::WrongRankCount {
            color,
            len: tree.parent.len().min(tree.children.len()),
        });
        return;
    }
    if tree.root >= n || tree.parent[tree.root].is_some() {
        out.push(Violation::RootViolation { color });
        return;
    }
    for r in 0..n {
        if r != tree.root && tree.parent[r].is_none() {
            out.push(Violation::RootViolation { color });
        }
        if let Some(p) = tree.parent[r] {
            if p >= n || !tree.children[p].contains(&r) {
                out.push(Violation::ParentChildMismatch { color, rank: r });
            }
        }
        for &c in &tree.children[r] {
            if c >= n || tree.parent[c] != Some(r) {
                out.push(Violation::ParentChildMismatch { color, rank: r });
            }
        }
        if tree.children[r].len() > arity {
            out.push(Violation::ArityViolation {
                color,
                rank: r,
                children: tree.children[r].len(),
            });
        }
        let should_be_interior = r == tree.root || !tree.children[r].is_empty();
        if should_be_interior != tree.interior.contains(&r) {
            out.push(Violation::InteriorMismatch { color, rank: r });
        }
    }
    // Walk down from the root; anything unvisited is either missing or on a cycle.
    let mut seen = vec![false; n];
    let mut stack = vec![tree.root];
    while let Some(r) = stack.pop() {
        if std::mem::replace(&mut seen[r], true) {
            continue;
        }
        stack.extend(tree.children[r].iter().copied().filter(|&c| c < n));
    }
    for (rank, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        out.push(Violation::SpanViolation { color, rank });
    }
}
