//! Discrete path models of Brownian motion.
//!
//! Both the full binary tree and the recombining lattices are stored as a
//! [`NodeGraph`]: nodes are numbered level by level, each non-terminal node
//! has an up child and a down child reached with probability ½.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Deepest full tree we are willing to materialize (65536 leaves).
pub const MAX_TREE_DEPTH: usize = 16;
/// Deepest subtree over which stopping rules are enumerated.
pub const MAX_RULE_DEPTH: usize = 5;

const NONE: u32 = u32::MAX;

/// Level-ordered node graph with binary transitions.
#[derive(Debug, Clone)]
pub struct NodeGraph {
    grid: TimeGrid,
    step: f64,
    level_start: Vec<usize>,
    level: Vec<u32>,
    b: Vec<i32>,
    m: Option<Vec<i32>>,
    root: Vec<u32>,
    root_values: Vec<f64>,
    roots: Vec<(usize, f64)>,
    children: Vec<[u32; 2]>,
    parent_start: Vec<u32>,
    parents: Vec<u32>,
    prob: Vec<f64>,
}

/// Markov summary of a node: time, position and running maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState {
    pub t: f64,
    pub x: f64,
    pub max: f64,
}

impl NodeGraph {
    fn assemble(
        grid: TimeGrid,
        level_sizes: &[usize],
        b: Vec<i32>,
        m: Option<Vec<i32>>,
        root: Vec<u32>,
        root_values: Vec<f64>,
        roots: Vec<(usize, f64)>,
        children: Vec<[u32; 2]>,
    ) -> Self {
        let n = b.len();
        let mut level_start = Vec::with_capacity(level_sizes.len() + 1);
        let mut level = Vec::with_capacity(n);
        let mut acc = 0;
        for (k, &size) in level_sizes.iter().enumerate() {
            level_start.push(acc);
            acc += size;
            level.extend(std::iter::repeat_n(k as u32, size));
        }
        level_start.push(acc);
        debug_assert_eq!(acc, n);

        let mut counts = vec![0u32; n + 1];
        for ch in &children {
            for &c in ch {
                if c != NONE {
                    counts[c as usize + 1] += 1;
                }
            }
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let parent_start = counts.clone();
        let mut fill = counts;
        let mut parents = vec![0u32; parent_start[n] as usize];
        for (v, ch) in children.iter().enumerate() {
            for &c in ch {
                if c != NONE {
                    let slot = &mut fill[c as usize];
                    parents[*slot as usize] = v as u32;
                    *slot += 1;
                }
            }
        }

        let mut prob = vec![0.0; n];
        for &(r, w) in &roots {
            prob[r] += w;
        }
        for v in 0..n {
            let [u, d] = children[v];
            if u != NONE {
                prob[u as usize] += 0.5 * prob[v];
                prob[d as usize] += 0.5 * prob[v];
            }
        }

        Self {
            grid,
            step: grid.step(),
            level_start,
            level,
            b,
            m,
            root,
            root_values,
            roots,
            children,
            parent_start,
            parents,
            prob,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn n_levels(&self) -> usize {
        self.level_start.len() - 1
    }

    pub fn last_level(&self) -> usize {
        self.n_levels() - 1
    }

    pub fn level_range(&self, k: usize) -> std::ops::Range<usize> {
        self.level_start[k]..self.level_start[k + 1]
    }

    pub fn level(&self, v: usize) -> usize {
        self.level[v] as usize
    }

    /// `(up, down)` children, `None` at the last level.
    pub fn children(&self, v: usize) -> Option<[usize; 2]> {
        let [u, d] = self.children[v];
        (u != NONE).then_some([u as usize, d as usize])
    }

    pub fn is_terminal(&self, v: usize) -> bool {
        self.children[v][0] == NONE
    }

    pub fn parents(&self, v: usize) -> &[u32] {
        &self.parents[self.parent_start[v] as usize..self.parent_start[v + 1] as usize]
    }

    /// Weighted roots `(node, weight)`.
    pub fn roots(&self) -> &[(usize, f64)] {
        &self.roots
    }

    /// Probability that the free walk visits `v`.
    pub fn prob(&self, v: usize) -> f64 {
        self.prob[v]
    }

    pub fn probs(&self) -> &[f64] {
        &self.prob
    }

    /// Position in step units relative to the node's root.
    pub fn b(&self, v: usize) -> i32 {
        self.b[v]
    }

    /// Running maximum in step units relative to the root, when tracked.
    pub fn m(&self, v: usize) -> Option<i32> {
        self.m.as_ref().map(|m| m[v])
    }

    pub fn tracks_max(&self) -> bool {
        self.m.is_some()
    }

    pub fn root_index(&self, v: usize) -> usize {
        self.root[v] as usize
    }

    pub fn value(&self, v: usize) -> f64 {
        self.root_values[self.root[v] as usize] + self.step * self.b[v] as f64
    }

    /// Running maximum value; for models that do not track it this is the
    /// maximum of the root value and the current value.
    pub fn max_value(&self, v: usize) -> f64 {
        let base = self.root_values[self.root[v] as usize];
        match &self.m {
            Some(m) => base + self.step * m[v] as f64,
            None => base + self.step * self.b[v].max(0) as f64,
        }
    }

    pub fn state(&self, v: usize) -> NodeState {
        NodeState {
            t: self.grid.time(self.level(v)),
            x: self.value(v),
            max: self.max_value(v),
        }
    }
}

/// Address of a node of a [`PathTree`]: the word's highest of `level` bits is
/// the first step, a set bit meaning "up".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TreeNode {
    pub root: usize,
    pub level: usize,
    pub word: u32,
}

impl TreeNode {
    pub fn root(root: usize) -> Self {
        Self {
            root,
            level: 0,
            word: 0,
        }
    }

    pub fn up(self) -> Self {
        Self {
            root: self.root,
            level: self.level + 1,
            word: (self.word << 1) | 1,
        }
    }

    pub fn down(self) -> Self {
        Self {
            root: self.root,
            level: self.level + 1,
            word: self.word << 1,
        }
    }

    /// Steps as `u`/`d` letters, first step first.
    pub fn word_string(&self) -> String {
        (0..self.level)
            .map(|i| {
                if (self.word >> (self.level - 1 - i)) & 1 == 1 {
                    'u'
                } else {
                    'd'
                }
            })
            .collect()
    }
}

impl fmt::Display for TreeNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = if self.level == 0 {
            "root".to_string()
        } else {
            self.word_string()
        };
        if self.root == 0 {
            write!(f, "{w}")
        } else {
            write!(f, "{}:{w}", self.root)
        }
    }
}

/// Full binary tree of random-walk paths, optionally started from several weighted roots.
#[derive(Debug, Clone)]
pub struct PathTree {
    graph: NodeGraph,
    depth: usize,
    n_roots: usize,
}

impl PathTree {
    pub fn new(grid: TimeGrid) -> Result<Self> {
        Self::with_roots(grid, &[(0.0, 1.0)])
    }

    /// Tree started at `(value, weight)` roots; weights must sum to 1.
    pub fn with_roots(grid: TimeGrid, roots: &[(f64, f64)]) -> Result<Self> {
        let depth = grid.n_steps();
        if depth > MAX_TREE_DEPTH {
            return Err(Error::Depth(format!(
                "full tree depth {depth} exceeds the cap {MAX_TREE_DEPTH}"
            )));
        }
        if roots.is_empty() {
            return Err(Error::Domain("a tree needs at least one root".into()));
        }
        let total: f64 = roots.iter().map(|r| r.1).sum();
        if roots.iter().any(|r| !(r.1 > 0.0) || !r.0.is_finite()) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("root weights must be positive and sum to 1".into()));
        }
        let r = roots.len();
        let sizes: Vec<usize> = (0..=depth).map(|k| r << k).collect();
        let n: usize = sizes.iter().sum();
        let mut b = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        let mut root = Vec::with_capacity(n);
        let mut children = Vec::with_capacity(n);
        for k in 0..=depth {
            for ri in 0..r {
                for word in 0..(1u32 << k) {
                    let ups = word.count_ones() as i32;
                    b.push(2 * ups - k as i32);
                    let mut pos = 0i32;
                    let mut mx = 0i32;
                    for i in 0..k {
                        pos += if (word >> (k - 1 - i)) & 1 == 1 { 1 } else { -1 };
                        mx = mx.max(pos);
                    }
                    m.push(mx);
                    root.push(ri as u32);
                    if k < depth {
                        let base = r * ((1usize << (k + 1)) - 1) + ri * (1usize << (k + 1));
                        let up = base + ((word as usize) << 1 | 1);
                        let down = base + ((word as usize) << 1);
                        children.push([up as u32, down as u32]);
                    } else {
                        children.push([NONE, NONE]);
                    }
                }
            }
        }
        let root_list = (0..r).map(|i| (i, roots[i].1)).collect();
        let root_values = roots.iter().map(|x| x.0).collect();
        let graph = NodeGraph::assemble(grid, &sizes, b, Some(m), root, root_values, root_list, children);
        Ok(Self {
            graph,
            depth,
            n_roots: r,
        })
    }

    pub fn graph(&self) -> &NodeGraph {
        &self.graph
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_roots(&self) -> usize {
        self.n_roots
    }

    pub fn contains(&self, node: TreeNode) -> bool {
        node.root < self.n_roots && node.level <= self.depth && (node.word as u64) < (1u64 << node.level)
    }

    pub fn node_id(&self, node: TreeNode) -> Result<usize> {
        if !self.contains(node) {
            return Err(Error::Node(format!("{node} (level {}) is not in the tree", node.level)));
        }
        Ok(self.n_roots * ((1usize << node.level) - 1) + (node.root << node.level) + node.word as usize)
    }

    pub fn tree_node(&self, id: usize) -> TreeNode {
        let level = self.graph.level(id);
        let off = id - self.graph.level_start[level];
        TreeNode {
            root: off >> level,
            level,
            word: (off & ((1usize << level) - 1)) as u32,
        }
    }

    /// Node reached from root 0 by a word of `u`/`d` letters.
    pub fn node(&self, word: &str) -> Result<TreeNode> {
        let mut node = TreeNode::root(0);
        for ch in word.chars() {
            node = match ch {
                'u' => node.up(),
                'd' => node.down(),
                _ => return Err(Error::Node(format!("invalid step `{ch}` in `{word}`"))),
            };
        }
        if !self.contains(node) {
            return Err(Error::Node(format!("word `{word}` is deeper than the tree")));
        }
        Ok(node)
    }

    /// Descendant of `base` following the relative node `rel` (root index ignored).
    pub fn descend(&self, base: TreeNode, rel: TreeNode) -> TreeNode {
        TreeNode {
            root: base.root,
            level: base.level + rel.level,
            word: (base.word << rel.level) | rel.word,
        }
    }
}

/// State carried by a recombining lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Position,
    PositionAndMax,
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StateKind::Position => "position",
            StateKind::PositionAndMax => "position_and_max",
        })
    }
}

/// Recombining lattice keyed by `(k, b)` or `(k, b, m)`, started at 0.
#[derive(Debug, Clone)]
pub struct StateLattice {
    graph: NodeGraph,
    kind: StateKind,
    keys: Vec<(i32, i32)>,
}

impl StateLattice {
    pub fn new(grid: TimeGrid, kind: StateKind) -> Self {
        let n_steps = grid.n_steps();
        let mut levels: Vec<Vec<(i32, i32)>> = vec![vec![(0, 0)]];
        for k in 0..n_steps {
            let mut next = BTreeMap::new();
            for &(b, m) in &levels[k] {
                for key in Self::transitions(kind, b, m) {
                    next.insert(key, ());
                }
            }
            levels.push(next.into_keys().collect());
        }
        let sizes: Vec<usize> = levels.iter().map(Vec::len).collect();
        let mut starts = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for s in &sizes {
            starts.push(acc);
            acc += s;
        }
        let mut children = Vec::with_capacity(acc);
        for (k, keys) in levels.iter().enumerate() {
            for &(b, m) in keys {
                if k == n_steps {
                    children.push([NONE, NONE]);
                    continue;
                }
                let [up, down] = Self::transitions(kind, b, m);
                let find = |key: (i32, i32)| {
                    let i = levels[k + 1].binary_search(&key).expect("transition stays in lattice");
                    (starts[k + 1] + i) as u32
                };
                children.push([find(up), find(down)]);
            }
        }
        let keys: Vec<(i32, i32)> = levels.into_iter().flatten().collect();
        let b = keys.iter().map(|k| k.0).collect();
        let m = match kind {
            StateKind::Position => None,
            StateKind::PositionAndMax => Some(keys.iter().map(|k| k.1).collect()),
        };
        let graph = NodeGraph::assemble(grid, &sizes, b, m, vec![0; acc], vec![0.0], vec![(0, 1.0)], children);
        Self { graph, kind, keys }
    }

    fn transitions(kind: StateKind, b: i32, m: i32) -> [(i32, i32); 2] {
        match kind {
            StateKind::Position => [(b + 1, 0), (b - 1, 0)],
            StateKind::PositionAndMax => [(b + 1, m.max(b + 1)), (b - 1, m)],
        }
    }

    pub fn graph(&self) -> &NodeGraph {
        &self.graph
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    /// Node at level `k` with position `b` (and running max `m` for the augmented kind).
    pub fn find(&self, k: usize, b: i32, m: Option<i32>) -> Option<usize> {
        if k > self.graph.last_level() {
            return None;
        }
        let key = match self.kind {
            StateKind::Position => (b, 0),
            StateKind::PositionAndMax => (b, m?),
        };
        let range = self.graph.level_range(k);
        self.keys[range.clone()]
            .binary_search(&key)
            .ok()
            .map(|i| range.start + i)
    }

    /// A path prefix reaching node `v`: up to the running max, down to the
    /// position, then down-up pairs.
    pub fn representative_path(&self, v: usize) -> PathPrefix {
        let g = &self.graph;
        let k = g.level(v) as i32;
        let b = g.b(v);
        let m = g.m(v).unwrap_or(b.max(0));
        let mut moves = Vec::with_capacity(k as usize);
        moves.extend(std::iter::repeat_n(1, m as usize));
        moves.extend(std::iter::repeat_n(-1, (m - b) as usize));
        while (moves.len() as i32) < k {
            moves.push(-1);
            moves.push(1);
        }
        let mut values = Vec::with_capacity(k as usize + 1);
        let mut pos = 0i32;
        values.push(0.0);
        for mv in moves {
            pos += mv;
            values.push(g.step * pos as f64);
        }
        PathPrefix {
            dt: g.grid.dt(),
            start: 0,
            values,
            horizon: Some(g.last_level()),
        }
    }
}

/// Either discrete path model.
#[derive(Debug, Clone)]
pub enum Model {
    Tree(PathTree),
    Lattice(StateLattice),
}

impl Model {
    pub fn graph(&self) -> &NodeGraph {
        match self {
            Model::Tree(t) => t.graph(),
            Model::Lattice(l) => l.graph(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.graph().grid()
    }

    pub fn as_tree(&self) -> Option<&PathTree> {
        match self {
            Model::Tree(t) => Some(t),
            Model::Lattice(_) => None,
        }
    }

    pub fn as_lattice(&self) -> Option<&StateLattice> {
        match self {
            Model::Lattice(l) => Some(l),
            Model::Tree(_) => None,
        }
    }

    /// Path prefix reaching node `v` (exact on trees, representative on lattices).
    pub fn path_to(&self, v: usize) -> PathPrefix {
        match self {
            Model::Tree(t) => node_path(t, t.tree_node(v)).expect("node id from this tree"),
            Model::Lattice(l) => l.representative_path(v),
        }
    }

    /// Human-readable node label.
    pub fn label(&self, v: usize) -> String {
        match self {
            Model::Tree(t) => t.tree_node(v).to_string(),
            Model::Lattice(l) => {
                let g = l.graph();
                match g.m(v) {
                    Some(m) => format!("(k={},b={},m={})", g.level(v), g.b(v), m),
                    None => format!("(k={},b={})", g.level(v), g.b(v)),
                }
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Model::Tree(t) => format!("tree(depth={}, roots={})", t.depth(), t.n_roots()),
            Model::Lattice(l) => format!("lattice({}, steps={})", l.kind(), l.graph().last_level()),
        }
    }

    pub fn into_arc(self) -> Arc<Model> {
        Arc::new(self)
    }
}

impl From<PathTree> for Model {
    fn from(t: PathTree) -> Self {
        Model::Tree(t)
    }
}

impl From<StateLattice> for Model {
    fn from(l: StateLattice) -> Self {
        Model::Lattice(l)
    }
}

/// Values of a path on consecutive grid times `start..start + values.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPrefix {
    pub dt: f64,
    /// Grid index of the first value.
    pub start: usize,
    pub values: Vec<f64>,
    /// Last grid index of the model the prefix lives in, if known.
    pub horizon: Option<usize>,
}

impl PathPrefix {
    pub fn new(dt: f64, values: Vec<f64>) -> Self {
        Self {
            dt,
            start: 0,
            values,
            horizon: None,
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = Some(horizon);
        self
    }

    /// Grid index of the last value.
    pub fn end_index(&self) -> usize {
        self.start + self.values.len() - 1
    }

    pub fn end_time(&self) -> f64 {
        self.end_index() as f64 * self.dt
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("nonempty prefix")
    }

    pub fn running_max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Steps left before the horizon, if known.
    pub fn remaining(&self) -> Option<usize> {
        self.horizon.map(|h| h.saturating_sub(self.end_index()))
    }

    pub fn state(&self) -> NodeState {
        NodeState {
            t: self.end_time(),
            x: self.last(),
            max: self.running_max(),
        }
    }
}

/// Prefix of the path leading to `node`.
pub fn node_path(tree: &PathTree, node: TreeNode) -> Result<PathPrefix> {
    let id = tree.node_id(node)?;
    let g = tree.graph();
    let root_value = g.root_values[node.root];
    let mut values = Vec::with_capacity(node.level + 1);
    values.push(root_value);
    let mut pos = 0i64;
    for i in 0..node.level {
        pos += if (node.word >> (node.level - 1 - i)) & 1 == 1 {
            1
        } else {
            -1
        };
        values.push(root_value + g.step * pos as f64);
    }
    debug_assert_eq!(pos as i32, g.b(id));
    Ok(PathPrefix {
        dt: g.grid.dt(),
        start: 0,
        values,
        horizon: Some(tree.depth),
    })
}

/// `(ω ⊙ θ)(r) = ω(r)` up to the junction and `ω(s) + θ(r)` afterwards.
pub fn concatenate(prefix: &PathPrefix, continuation: &PathPrefix) -> Result<PathPrefix> {
    if continuation.start != prefix.end_index() {
        return Err(Error::Concat(format!(
            "continuation starts at index {} but the prefix ends at {}",
            continuation.start,
            prefix.end_index()
        )));
    }
    if (continuation.dt - prefix.dt).abs() > 1e-12 * prefix.dt {
        return Err(Error::Concat(format!(
            "grid spacing {} differs from {}",
            continuation.dt, prefix.dt
        )));
    }
    if continuation.values.first().copied() != Some(0.0) {
        return Err(Error::Concat("continuation must start at value 0".into()));
    }
    let base = prefix.last();
    let mut values = prefix.values.clone();
    values.extend(continuation.values[1..].iter().map(|v| base + v));
    Ok(PathPrefix {
        dt: prefix.dt,
        start: prefix.start,
        values,
        horizon: prefix.horizon,
    })
}

/// Number of adapted stop/continue rules on a subtree of the given depth.
pub fn rule_count(depth: usize) -> u64 {
    let mut c = 1u64;
    for _ in 0..depth {
        c = 1 + c * c;
    }
    c
}

/// Pure stopping rule on a subtree, decoded lazily from its index: index 0
/// stops at once, otherwise `index - 1 = a * count(d-1) + b` continues with
/// rule `a` after an up step and rule `b` after a down step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoppingRule {
    depth: usize,
    index: u64,
}

impl StoppingRule {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// The rule that stops at the subtree root.
    pub fn is_immediate(&self) -> bool {
        self.index == 0
    }

    /// Calls `f(rel, prob)` for every stopping node, `rel` relative to the subtree root.
    pub fn for_each_stop(&self, f: &mut impl FnMut(TreeNode, f64)) {
        fn visit(d: usize, idx: u64, node: TreeNode, p: f64, f: &mut impl FnMut(TreeNode, f64)) {
            if idx == 0 {
                f(node, p);
                return;
            }
            let c = rule_count(d - 1);
            let (a, b) = ((idx - 1) / c, (idx - 1) % c);
            visit(d - 1, a, node.up(), 0.5 * p, f);
            visit(d - 1, b, node.down(), 0.5 * p, f);
        }
        visit(self.depth, self.index, TreeNode::root(0), 1.0, f);
    }

    pub fn stops(&self) -> Vec<(TreeNode, f64)> {
        let mut out = Vec::new();
        self.for_each_stop(&mut |n, p| out.push((n, p)));
        out
    }
}

/// Iterator over all [`StoppingRule`]s of one depth.
#[derive(Debug, Clone)]
pub struct StoppingRules {
    depth: usize,
    next: u64,
    end: u64,
}

impl Iterator for StoppingRules {
    type Item = StoppingRule;

    fn next(&mut self) -> Option<StoppingRule> {
        (self.next < self.end).then(|| {
            let r = StoppingRule {
                depth: self.depth,
                index: self.next,
            };
            self.next += 1;
            r
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.end - self.next) as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for StoppingRules {}

/// All rules stopping within `depth` extra steps, independent of a tree.
pub fn stopping_rules(depth: usize) -> Result<StoppingRules> {
    if depth > MAX_RULE_DEPTH {
        return Err(Error::Depth(format!(
            "rule depth {depth} exceeds the enumeration guard {MAX_RULE_DEPTH}"
        )));
    }
    Ok(StoppingRules {
        depth,
        next: 0,
        end: rule_count(depth),
    })
}

/// Every adapted rule on the subtree below `from` of at most `max_extra_depth` steps.
pub fn enumerate_stopping_rules(tree: &PathTree, from: TreeNode, max_extra_depth: usize) -> Result<StoppingRules> {
    tree.node_id(from)?;
    let remaining = tree.depth - from.level;
    if max_extra_depth > remaining {
        return Err(Error::Depth(format!(
            "rule depth {max_extra_depth} exceeds the {remaining} steps left below {from}"
        )));
    }
    stopping_rules(max_extra_depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree(dt: f64, n: usize) -> PathTree {
        PathTree::new(TimeGrid::new(dt, n).unwrap()).unwrap()
    }

    #[test]
    fn node_paths() {
        let t = tree(1.0, 3);
        assert_eq!(node_path(&t, TreeNode::root(0)).unwrap().values, vec![0.0]);
        let p = node_path(&t, t.node("ud").unwrap()).unwrap();
        assert_eq!(p.values, vec![0.0, 1.0, 0.0]);
        assert_eq!(p.end_index(), 2);
        let t = tree(0.25, 3);
        assert_eq!(
            node_path(&t, t.node("uuu").unwrap()).unwrap().values,
            vec![0.0, 0.5, 1.0, 1.5]
        );
        let bogus = TreeNode {
            root: 0,
            level: 2,
            word: 7,
        };
        assert!(matches!(node_path(&t, bogus), Err(Error::Node(_))));
        assert!(t.node("uuuu").is_err());
    }

    #[test]
    fn concatenation() {
        let p = PathPrefix::new(1.0, vec![0.0, 1.0]);
        let flat = PathPrefix {
            dt: 1.0,
            start: 1,
            values: vec![0.0, 0.0, 0.0],
            horizon: None,
        };
        assert_eq!(concatenate(&p, &flat).unwrap().values, vec![0.0, 1.0, 1.0, 1.0]);
        let down = PathPrefix {
            dt: 1.0,
            start: 1,
            values: vec![0.0, -1.0],
            horizon: None,
        };
        assert_eq!(concatenate(&p, &down).unwrap().values, vec![0.0, 1.0, 0.0]);
        let up2 = PathPrefix {
            dt: 1.0,
            start: 1,
            values: vec![0.0, 1.0, 2.0],
            horizon: None,
        };
        assert_eq!(concatenate(&p, &up2).unwrap().values, vec![0.0, 1.0, 2.0, 3.0]);
        let wrong = PathPrefix {
            dt: 1.0,
            start: 0,
            values: vec![0.0, 1.0],
            horizon: None,
        };
        assert!(matches!(concatenate(&p, &wrong), Err(Error::Concat(_))));
        let nonzero = PathPrefix {
            dt: 1.0,
            start: 1,
            values: vec![0.5],
            horizon: None,
        };
        assert!(matches!(concatenate(&p, &nonzero), Err(Error::Concat(_))));
    }

    #[test]
    fn rule_counts() {
        assert_eq!(
            (0..=5).map(rule_count).collect::<Vec<_>>(),
            vec![1, 2, 5, 26, 677, 458330]
        );
        let t = tree(1.0, 4);
        let root = TreeNode::root(0);
        assert_eq!(enumerate_stopping_rules(&t, root, 0).unwrap().count(), 1);
        let rules: Vec<_> = enumerate_stopping_rules(&t, root, 1).unwrap().collect();
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].stops().len(), 1);
        assert_eq!(rules[1].stops().len(), 2);
        assert!(matches!(
            enumerate_stopping_rules(&t, t.node("u").unwrap(), 4),
            Err(Error::Depth(_))
        ));
        let deep = tree(1.0, 6);
        assert!(matches!(enumerate_stopping_rules(&deep, root, 6), Err(Error::Depth(_))));
    }

    /// Independent listing: a rule is a set of stopping nodes forming an antichain
    /// that covers every leaf of the depth-d subtree.
    fn brute_force_rules(d: usize) -> Vec<Vec<(usize, u32)>> {
        if d == 0 {
            return vec![vec![(0, 0)]];
        }
        let sub = brute_force_rules(d - 1);
        let mut out = vec![vec![(0, 0)]];
        for a in &sub {
            for b in &sub {
                let mut r: Vec<(usize, u32)> = a.iter().map(|&(l, w)| (l + 1, w | (1 << l))).collect();
                r.extend(b.iter().map(|&(l, w)| (l + 1, w)));
                r.sort();
                out.push(r);
            }
        }
        out
    }

    #[test]
    fn rule_decoding_matches_direct_listing() {
        for d in 0..=3 {
            let mut decoded: Vec<Vec<(usize, u32)>> = stopping_rules(d)
                .unwrap()
                .map(|r| {
                    let mut s: Vec<_> = r.stops().into_iter().map(|(n, _)| (n.level, n.word)).collect();
                    s.sort();
                    s
                })
                .collect();
            let mut listed = brute_force_rules(d);
            decoded.sort();
            listed.sort();
            assert_eq!(decoded, listed, "depth {d}");
            decoded.dedup();
            assert_eq!(decoded.len() as u64, rule_count(d));
        }
        // stopping probabilities of each rule sum to 1
        for r in stopping_rules(3).unwrap() {
            let total: f64 = r.stops().iter().map(|s| s.1).sum();
            assert_eq!(total, 1.0);
        }
    }

    #[test]
    fn position_lattice_is_binomial() {
        let g = TimeGrid::new(0.1, 12).unwrap();
        let l = StateLattice::new(g, StateKind::Position);
        let graph = l.graph();
        for k in 0..=12 {
            let r = graph.level_range(k);
            assert_eq!(r.len(), k + 1);
            for (j, v) in r.enumerate() {
                let binom = (0..j).fold(1.0, |acc, i| acc * (k - i) as f64 / (i + 1) as f64) / 2f64.powi(k as i32);
                assert!((graph.prob(v) - binom).abs() < 1e-15);
                assert!((graph.value(v) - g.step() * (2 * j as i32 - k as i32) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_lattice_marginalizes_to_position() {
        let g = TimeGrid::new(0.1, 14).unwrap();
        let pos = StateLattice::new(g, StateKind::Position);
        let aug = StateLattice::new(g, StateKind::PositionAndMax);
        let ga = aug.graph();
        for k in 0..=14 {
            let mut acc = std::collections::BTreeMap::<i32, f64>::new();
            for v in ga.level_range(k) {
                let (b, m) = (ga.b(v), ga.m(v).unwrap());
                assert!(m >= b && m >= 0 && b >= 2 * m - k as i32);
                *acc.entry(b).or_default() += ga.prob(v);
            }
            for (b, p) in acc {
                let v = pos.find(k, b, None).unwrap();
                assert!((pos.graph().prob(v) - p).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn max_lattice_matches_tree_counts() {
        // every tree path maps to the lattice node with its (b, m)
        let g = TimeGrid::new(0.25, 8).unwrap();
        let t = PathTree::new(g).unwrap();
        let l = StateLattice::new(g, StateKind::PositionAndMax);
        let mut mass = vec![0.0; l.graph().len()];
        for v in 0..t.graph().len() {
            let gt = t.graph();
            let k = gt.level(v);
            let w = l.find(k, gt.b(v), gt.m(v)).unwrap();
            mass[w] += gt.prob(v);
        }
        for w in 0..l.graph().len() {
            assert!((mass[w] - l.graph().prob(w)).abs() < 1e-14);
        }
    }

    #[test]
    fn representative_paths_reach_their_state() {
        let g = TimeGrid::new(0.25, 9).unwrap();
        for kind in [StateKind::Position, StateKind::PositionAndMax] {
            let l = StateLattice::new(g, kind);
            let gr = l.graph();
            for v in 0..gr.len() {
                let p = l.representative_path(v);
                assert_eq!(p.end_index(), gr.level(v));
                assert!((p.last() - gr.value(v)).abs() < 1e-12);
                assert!((p.running_max() - gr.max_value(v)).abs() < 1e-12);
                for w in p.values.windows(2) {
                    assert!(((w[1] - w[0]).abs() - gr.step()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weighted_roots() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let t = PathTree::with_roots(g, &[(0.0, 0.25), (1.0, 0.75)]).unwrap();
        let n = TreeNode {
            root: 1,
            level: 2,
            word: 0b11,
        };
        let id = t.node_id(n).unwrap();
        assert_eq!(t.tree_node(id), n);
        assert_eq!(t.graph().value(id), 3.0);
        assert!((t.graph().prob(id) - 0.75 / 4.0).abs() < 1e-15);
        assert_eq!(node_path(&t, n).unwrap().values, vec![1.0, 2.0, 3.0]);
        assert!(PathTree::with_roots(g, &[(0.0, 0.5)]).is_err());
    }

    proptest! {
        #[test]
        fn path_then_concatenate_reproduces_descendant(word in 0u32..64, level in 0usize..7, split in 0usize..7) {
            let t = tree(0.5, 6);
            let level = level.min(6);
            let node = TreeNode { root: 0, level, word: word & ((1u32 << level) - 1) };
            let split = split.min(level);
            let ancestor = TreeNode { root: 0, level: split, word: node.word >> (level - split) };
            let rel_level = level - split;
            let rel = TreeNode { root: 0, level: rel_level, word: node.word & ((1u32 << rel_level) - 1) };
            let head = node_path(&t, ancestor).unwrap();
            let tail_full = node_path(&tree(0.5, 6), rel).unwrap();
            let cont = PathPrefix { dt: 0.5, start: split, values: tail_full.values.clone(), horizon: None };
            let joined = concatenate(&head, &cont).unwrap();
            let direct = node_path(&t, node).unwrap();
            prop_assert_eq!(joined.values.len(), direct.values.len());
            for (a, b) in joined.values.iter().zip(&direct.values) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert_eq!(t.descend(ancestor, rel), node);
        }

        #[test]
        fn tree_ids_round_trip(level in 0usize..6, word in 0u32..32) {
            let t = tree(1.0, 5);
            let n = TreeNode { root: 0, level, word: word & ((1u32 << level) - 1) };
            let id = t.node_id(n).unwrap();
            prop_assert_eq!(t.tree_node(id), n);
            let g = t.graph();
            prop_assert_eq!(g.level(id), level);
            if let Some([u, d]) = g.children(id) {
                prop_assert_eq!(t.tree_node(u), n.up());
                prop_assert_eq!(t.tree_node(d), n.down());
                prop_assert_eq!(g.b(u), g.b(id) + 1);
                prop_assert_eq!(g.b(d), g.b(id) - 1);
            }
        }
    }
}
