//! Multi-scale geometry: scale count, window partitions, ancestor and
//! parent-group maps, and the single-block communication graph.
//!
//! Scales are indexed from 0 (finest) to `levels() - 1` (coarsest).
//! Windows and tokens are enumerated row-major within a scale.

use std::collections::VecDeque;

use crate::error::{config_err, Result};
use crate::tensor::{Matrix, TensorMap};

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutSpec {
    window_side: usize,
    stride: usize,
    grid_sides: Vec<usize>,
    windows_per_side: Vec<usize>,
    /// `[scale][window]` -> token ids (`y * side + x`), row-major.
    window_tokens: Vec<Vec<Vec<usize>>>,
    /// `[scale][window][m - scale - 1]` -> containing window at coarser scale `m`.
    ancestors: Vec<Vec<Vec<usize>>>,
    /// `[scale][group]` -> coarse token ids summarizing fine window `group` of
    /// `scale - 1`. Empty for scale 0.
    group_tokens: Vec<Vec<Vec<usize>>>,
}

impl LayoutSpec {
    /// Build the layout for a square scale-0 grid of `grid_side` tokens,
    /// windows of `window_side` tokens per side and pooling stride `stride`.
    ///
    /// Scales are added by exact division by `stride` until the grid is no
    /// larger than one window.
    pub fn build(grid_side: usize, window_side: usize, stride: usize) -> Result<Self> {
        if grid_side == 0 {
            return Err(config_err!("grid side must be >= 1"));
        }
        if window_side == 0 {
            return Err(config_err!("window side k must be >= 1"));
        }
        if stride < 2 {
            return Err(config_err!("stride s must be >= 2, got {stride}"));
        }
        let mut grid_sides = vec![grid_side];
        if grid_side > window_side {
            if grid_side % window_side != 0 {
                return Err(config_err!(
                    "grid side {grid_side} is not divisible by window side k={window_side} (H_1 mod k != 0)"
                ));
            }
            if window_side % stride != 0 {
                return Err(config_err!(
                    "window side k={window_side} is not divisible by stride s={stride} (k mod s != 0)"
                ));
            }
        }
        let mut side = grid_side;
        while side > window_side {
            if side % stride != 0 {
                return Err(config_err!(
                    "scale {} grid side {side} is not divisible by stride s={stride}",
                    grid_sides.len()
                ));
            }
            side /= stride;
            if side > window_side && side % window_side != 0 {
                return Err(config_err!(
                    "scale {} grid side {side} is not divisible by window side k={window_side}",
                    grid_sides.len() + 1
                ));
            }
            grid_sides.push(side);
        }

        let levels = grid_sides.len();
        let windows_per_side: Vec<usize> = grid_sides
            .iter()
            .map(|&h| if h > window_side { h / window_side } else { 1 })
            .collect();

        let mut window_tokens = Vec::with_capacity(levels);
        for l in 0..levels {
            let (h, wps) = (grid_sides[l], windows_per_side[l]);
            let ws = h / wps;
            let mut per_scale = Vec::with_capacity(wps * wps);
            for wy in 0..wps {
                for wx in 0..wps {
                    let mut ids = Vec::with_capacity(ws * ws);
                    for y in wy * ws..(wy + 1) * ws {
                        for x in wx * ws..(wx + 1) * ws {
                            ids.push(y * h + x);
                        }
                    }
                    per_scale.push(ids);
                }
            }
            window_tokens.push(per_scale);
        }

        let mut ancestors = Vec::with_capacity(levels);
        for l in 0..levels {
            let wps = windows_per_side[l];
            let mut per_scale = Vec::with_capacity(wps * wps);
            for wy in 0..wps {
                for wx in 0..wps {
                    let mut chain = Vec::with_capacity(levels - l - 1);
                    let (mut ay, mut ax) = (wy, wx);
                    for m in l + 1..levels {
                        ay /= stride;
                        ax /= stride;
                        chain.push(ay * windows_per_side[m] + ax);
                    }
                    per_scale.push(chain);
                }
            }
            ancestors.push(per_scale);
        }

        let mut group_tokens = vec![Vec::new()];
        let gs = window_side / stride;
        for l in 1..levels {
            let h = grid_sides[l];
            let fine_wps = windows_per_side[l - 1];
            let mut per_scale = Vec::with_capacity(fine_wps * fine_wps);
            for gy in 0..fine_wps {
                for gx in 0..fine_wps {
                    let mut ids = Vec::with_capacity(gs * gs);
                    for y in gy * gs..(gy + 1) * gs {
                        for x in gx * gs..(gx + 1) * gs {
                            ids.push(y * h + x);
                        }
                    }
                    per_scale.push(ids);
                }
            }
            group_tokens.push(per_scale);
        }

        Ok(Self { window_side, stride, grid_sides, windows_per_side, window_tokens, ancestors, group_tokens })
    }

    /// Number of scales `L`.
    pub fn levels(&self) -> usize {
        self.grid_sides.len()
    }

    pub fn window_side(&self) -> usize {
        self.window_side
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn grid_side(&self, scale: usize) -> usize {
        self.grid_sides[scale]
    }

    pub fn grid_sides(&self) -> &[usize] {
        &self.grid_sides
    }

    /// Tokens per batch element at `scale` (`N_l`).
    pub fn tokens(&self, scale: usize) -> usize {
        self.grid_sides[scale] * self.grid_sides[scale]
    }

    pub fn windows_per_side(&self, scale: usize) -> usize {
        self.windows_per_side[scale]
    }

    pub fn num_windows(&self, scale: usize) -> usize {
        self.windows_per_side[scale] * self.windows_per_side[scale]
    }

    /// Tokens in one window at `scale`; smaller than `k^2` only when the
    /// whole coarsest grid is smaller than a window.
    pub fn window_len(&self, scale: usize) -> usize {
        self.window_tokens[scale][0].len()
    }

    pub fn window_tokens(&self, scale: usize, window: usize) -> &[usize] {
        &self.window_tokens[scale][window]
    }

    pub fn window_of(&self, scale: usize, y: usize, x: usize) -> usize {
        let ws = self.grid_sides[scale] / self.windows_per_side[scale];
        (y / ws) * self.windows_per_side[scale] + x / ws
    }

    /// The unique window at coarser scale `coarse` containing window
    /// `window` of `scale`.
    pub fn ancestor_window(&self, scale: usize, window: usize, coarse: usize) -> usize {
        assert!(coarse > scale && coarse < self.levels(), "ancestor scale out of range");
        self.ancestors[scale][window][coarse - scale - 1]
    }

    /// Coarse-token groups at `scale >= 1`; one per window of `scale - 1`.
    pub fn num_groups(&self, scale: usize) -> usize {
        self.group_tokens[scale].len()
    }

    pub fn group_tokens(&self, scale: usize, group: usize) -> &[usize] {
        &self.group_tokens[scale][group]
    }

    /// The fine window (at `scale - 1`) whose pooled summary is `group`.
    pub fn parent_window(&self, scale: usize, group: usize) -> usize {
        debug_assert!(scale >= 1 && group < self.num_groups(scale));
        group
    }
}

fn check_divisible(x: &TensorMap, k: usize) -> Result<()> {
    if x.height() != x.width() {
        return Err(config_err!("only square grids are supported, got {}x{}", x.height(), x.width()));
    }
    if k == 0 || x.height() % k != 0 {
        return Err(config_err!("grid side {} is not divisible by window side {k}", x.height()));
    }
    Ok(())
}

/// Split a feature map into `k x k` windows ordered `(batch, window row,
/// window column)`, each window's tokens row-major.
pub fn window_partition(x: &TensorMap, k: usize) -> Result<Vec<Matrix>> {
    check_divisible(x, k)?;
    let (h, wps) = (x.height(), x.height() / k);
    let mut out = Vec::with_capacity(x.batch() * wps * wps);
    for b in 0..x.batch() {
        for wy in 0..wps {
            for wx in 0..wps {
                let ids: Vec<usize> = (0..k * k).map(|i| (wy * k + i / k) * h + wx * k + i % k).collect();
                out.push(x.gather(b, &ids));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`window_partition`].
pub fn window_merge(windows: &[Matrix], shape: [usize; 4], k: usize) -> Result<TensorMap> {
    let mut x = TensorMap::zeros(shape);
    check_divisible(&x, k)?;
    let (h, wps) = (shape[1], shape[1] / k);
    if windows.len() != shape[0] * wps * wps {
        return Err(config_err!("expected {} windows, got {}", shape[0] * wps * wps, windows.len()));
    }
    let mut it = windows.iter();
    for b in 0..shape[0] {
        for wy in 0..wps {
            for wx in 0..wps {
                let ids: Vec<usize> = (0..k * k).map(|i| (wy * k + i / k) * h + wx * k + i % k).collect();
                x.scatter(b, &ids, it.next().expect("counted above"));
            }
        }
    }
    Ok(x)
}

/// Which information-flow edges a single block creates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Summarize,
    IntraWindow,
    TopDown,
    BottomUp,
}

/// A complete bipartite set of edges: every source feeds every target.
#[derive(Clone, Debug)]
pub struct EdgeGroup {
    pub kind: EdgeKind,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Node {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
}

/// Which pathways contribute edges to the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphPathways {
    pub multi_scale: bool,
    pub summarize: bool,
    pub top_down: bool,
    pub bottom_up: bool,
}

impl GraphPathways {
    pub const MSA: Self = Self { multi_scale: true, summarize: true, top_down: true, bottom_up: true };
    pub const WINDOW_ONLY: Self = Self { multi_scale: false, summarize: false, top_down: false, bottom_up: false };
}

/// Information-flow graph of one block over `(scale, token)` nodes of a
/// single batch element. Edges point from the token that is read to the
/// token that is updated.
#[derive(Clone, Debug)]
pub struct CommGraph {
    grid_sides: Vec<usize>,
    offsets: Vec<usize>,
    groups: Vec<EdgeGroup>,
}

/// Build the single-block communication graph with every MSA pathway on.
pub fn communication_graph(layout: &LayoutSpec) -> CommGraph {
    communication_graph_with(layout, GraphPathways::MSA)
}

pub fn communication_graph_with(layout: &LayoutSpec, paths: GraphPathways) -> CommGraph {
    let levels = if paths.multi_scale { layout.levels() } else { 1 };
    let mut offsets = Vec::with_capacity(levels);
    let mut total = 0;
    for l in 0..levels {
        offsets.push(total);
        total += layout.tokens(l);
    }
    let node_ids = |l: usize, ids: &[usize]| -> Vec<usize> { ids.iter().map(|t| offsets[l] + t).collect() };

    let mut groups = Vec::new();
    if paths.summarize {
        let s = layout.stride();
        for l in 1..levels {
            let (h, fh) = (layout.grid_side(l), layout.grid_side(l - 1));
            for y in 0..h {
                for x in 0..h {
                    let mut sources = Vec::with_capacity(s * s);
                    for dy in 0..s {
                        for dx in 0..s {
                            sources.push(offsets[l - 1] + (y * s + dy) * fh + x * s + dx);
                        }
                    }
                    groups.push(EdgeGroup {
                        kind: EdgeKind::Summarize,
                        sources,
                        targets: vec![offsets[l] + y * h + x],
                    });
                }
            }
        }
    }
    for l in 0..levels {
        for w in 0..layout.num_windows(l) {
            let ids = node_ids(l, layout.window_tokens(l, w));
            groups.push(EdgeGroup { kind: EdgeKind::IntraWindow, sources: ids.clone(), targets: ids });
        }
    }
    if paths.top_down {
        for l in 0..levels {
            for w in 0..layout.num_windows(l) {
                let targets = node_ids(l, layout.window_tokens(l, w));
                for m in l + 1..levels {
                    let a = layout.ancestor_window(l, w, m);
                    groups.push(EdgeGroup {
                        kind: EdgeKind::TopDown,
                        sources: node_ids(m, layout.window_tokens(m, a)),
                        targets: targets.clone(),
                    });
                }
            }
        }
    }
    if paths.bottom_up {
        for l in 1..levels {
            for g in 0..layout.num_groups(l) {
                groups.push(EdgeGroup {
                    kind: EdgeKind::BottomUp,
                    sources: node_ids(l - 1, layout.window_tokens(l - 1, layout.parent_window(l, g))),
                    targets: node_ids(l, layout.group_tokens(l, g)),
                });
            }
        }
    }
    CommGraph { grid_sides: layout.grid_sides()[..levels].to_vec(), offsets, groups }
}

impl CommGraph {
    pub fn num_nodes(&self) -> usize {
        let l = self.grid_sides.len() - 1;
        self.offsets[l] + self.grid_sides[l] * self.grid_sides[l]
    }

    pub fn levels(&self) -> usize {
        self.grid_sides.len()
    }

    pub fn groups(&self) -> &[EdgeGroup] {
        &self.groups
    }

    pub fn node_id(&self, node: Node) -> usize {
        self.offsets[node.scale] + node.row * self.grid_sides[node.scale] + node.col
    }

    pub fn node(&self, id: usize) -> Node {
        let scale = self.offsets.iter().rposition(|&o| o <= id).expect("offset 0 exists");
        let t = id - self.offsets[scale];
        let h = self.grid_sides[scale];
        Node { scale, row: t / h, col: t % h }
    }

    /// Distinct directed edges, sorted by `(source, target)` node id.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for g in &self.groups {
            for &s in &g.sources {
                for &t in &g.targets {
                    edges.push((s, t));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.groups.iter().filter(|g| g.kind == kind).map(|g| g.sources.len() * g.targets.len()).sum()
    }

    /// Hop distances from `source` to every node; `None` when unreachable.
    ///
    /// Each edge group is routed through a virtual hub (cost 1 in, cost 0
    /// out), so a 0-1 BFS explores `O(sum of group sizes)` instead of the
    /// expanded edge count.
    pub fn distances_from(&self, source: usize) -> Vec<Option<u32>> {
        let n = self.num_nodes();
        let mut out_groups: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (gi, g) in self.groups.iter().enumerate() {
            for &s in &g.sources {
                out_groups[s].push(gi);
            }
        }
        self.bfs(source, &out_groups)
    }

    fn bfs(&self, source: usize, out_groups: &[Vec<usize>]) -> Vec<Option<u32>> {
        let n = self.num_nodes();
        let hubs = self.groups.len();
        let mut dist = vec![u32::MAX; n + hubs];
        let mut deque = VecDeque::new();
        dist[source] = 0;
        deque.push_back(source);
        while let Some(v) = deque.pop_front() {
            let d = dist[v];
            if v < n {
                for &gi in &out_groups[v] {
                    let hub = n + gi;
                    if d + 1 < dist[hub] {
                        dist[hub] = d + 1;
                        deque.push_back(hub);
                    }
                }
            } else {
                for &t in &self.groups[v - n].targets {
                    if d < dist[t] {
                        dist[t] = d;
                        deque.push_front(t);
                    }
                }
            }
        }
        dist.truncate(n);
        dist.into_iter().map(|d| (d != u32::MAX).then_some(d)).collect()
    }

    /// Largest directed hop distance between two distinct scale-0 tokens,
    /// or `None` if some pair is disconnected.
    pub fn max_fine_distance(&self) -> Option<u32> {
        let n = self.num_nodes();
        let mut out_groups: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (gi, g) in self.groups.iter().enumerate() {
            for &s in &g.sources {
                out_groups[s].push(gi);
            }
        }
        let fine = self.grid_sides[0] * self.grid_sides[0];
        let mut worst = 0;
        for src in 0..fine {
            let dist = self.bfs(src, &out_groups);
            for (t, d) in dist[..fine].iter().enumerate() {
                if t == src {
                    continue;
                }
                worst = worst.max((*d)?);
            }
        }
        Some(worst)
    }

    /// Text dump, one edge per line: `scale,row,col -> scale,row,col`
    /// (scales numbered from 1 = finest).
    pub fn write_edge_list<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for (s, t) in self.edge_list() {
            let (a, b) = (self.node(s), self.node(t));
            writeln!(w, "{},{},{} -> {},{},{}", a.scale + 1, a.row, a.col, b.scale + 1, b.row, b.col)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn build_layout_examples() {
        let l = LayoutSpec::build(64, 16, 4).unwrap();
        assert_eq!(l.levels(), 2);
        assert_eq!(l.grid_sides(), &[64, 16]);
        assert_eq!((l.windows_per_side(0), l.windows_per_side(1)), (4, 1));

        let l = LayoutSpec::build(16, 16, 4).unwrap();
        assert_eq!(l.levels(), 1);
        assert_eq!(l.num_windows(0), 1);
        assert_eq!(l.window_len(0), 256);

        let l = LayoutSpec::build(256, 16, 4).unwrap();
        assert_eq!(l.grid_sides(), &[256, 64, 16]);
    }

    #[test]
    fn coarsest_grid_may_be_smaller_than_a_window() {
        let l = LayoutSpec::build(32, 16, 4).unwrap();
        assert_eq!(l.grid_sides(), &[32, 8]);
        assert_eq!(l.window_len(1), 64);
        assert_eq!(l.num_groups(1), 4);
        assert_eq!(l.group_tokens(1, 3), &[36, 37, 38, 39, 44, 45, 46, 47, 52, 53, 54, 55, 60, 61, 62, 63]);
    }

    #[test]
    fn divisibility_violations_name_the_constraint() {
        let e = LayoutSpec::build(60, 16, 4).unwrap_err().to_string();
        assert!(e.contains("H_1 mod k"), "{e}");
        let e = LayoutSpec::build(64, 16, 3).unwrap_err().to_string();
        assert!(e.contains("k mod s"), "{e}");
        let e = LayoutSpec::build(96, 16, 4).unwrap_err().to_string();
        assert!(e.contains("not divisible by window side"), "{e}");
        assert!(LayoutSpec::build(8, 4, 1).is_err());
    }

    #[test]
    fn ancestors_follow_floor_division() {
        let l = LayoutSpec::build(32, 4, 2).unwrap();
        assert_eq!(l.grid_sides(), &[32, 16, 8, 4]);
        // window (5, 6) of an 8x8 window grid.
        let w = 5 * 8 + 6;
        assert_eq!(l.ancestor_window(0, w, 1), 2 * 4 + 3);
        assert_eq!(l.ancestor_window(0, w, 2), 2 + 1);
        assert_eq!(l.ancestor_window(0, w, 3), 0);
        assert_eq!(l.ancestor_window(1, 2 * 4 + 3, 2), 2 + 1);
    }

    #[test]
    fn partition_examples() {
        let x = TensorMap::from_fn([1, 4, 4, 1], |_, y, x, _| (y * 4 + x) as f64);
        let w = window_partition(&x, 2).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[0].as_slice(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(w[1].as_slice(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(w[3].as_slice(), &[10.0, 11.0, 14.0, 15.0]);

        let whole = window_partition(&x, 4).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].as_slice(), x.as_slice());
        assert!(window_partition(&x, 3).is_err());
    }

    #[test]
    fn partition_merge_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = TensorMap::random_normal([2, 8, 8, 3], 1.0, &mut rng);
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(window_merge(&w, x.shape(), 4).unwrap(), x);
    }

    #[test]
    fn single_scale_graph_has_only_intra_window_edges() {
        let g = communication_graph(&LayoutSpec::build(8, 8, 2).unwrap());
        assert!(g.groups().iter().all(|e| e.kind == EdgeKind::IntraWindow));
        assert_eq!(g.max_fine_distance(), Some(1));
    }

    #[test]
    fn top_down_key_count_per_fine_token_is_levels_times_window() {
        let layout = LayoutSpec::build(64, 16, 4).unwrap();
        let g = communication_graph(&layout);
        let target = g.node_id(Node { scale: 0, row: 17, col: 40 });
        let keys: usize = g
            .groups()
            .iter()
            .filter(|e| matches!(e.kind, EdgeKind::TopDown | EdgeKind::IntraWindow))
            .filter(|e| e.targets.contains(&target))
            .map(|e| e.sources.len())
            .sum();
        assert_eq!(keys, layout.levels() * 256);
    }

    #[test]
    fn window_only_graph_disconnects_windows() {
        let g = communication_graph_with(&LayoutSpec::build(8, 4, 2).unwrap(), GraphPathways::WINDOW_ONLY);
        assert_eq!(g.max_fine_distance(), None);
        let d = g.distances_from(0);
        assert_eq!(d[1], Some(1));
        assert_eq!(d[4], None);
    }
}
