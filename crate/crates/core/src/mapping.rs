//! Placement of core-ops onto the 2D mesh of physical cores.
//!
//! The communication graph has one node per core-op vertex (a shared-weight
//! group occupies one physical core) and undirected edges weighted by the
//! words exchanged per inference. Nodes are split by Kernighan–Lin
//! bipartitioning along recursive halves of the mesh (chip boundaries first),
//! then polished by pairwise cell swaps on the exact placement cost.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{CompGraph, OpKind};
use crate::hardware::{EdgeTrace, MeshSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MapError {
    #[error("{nodes} cores do not fit a {rows}x{cols} mesh")]
    Capacity { nodes: usize, rows: usize, cols: usize },
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("edge {0}-{1} names a missing node")]
    Node(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommNode {
    /// Graph vertex this core hosts.
    pub vertex: usize,
    /// Logical core-ops sharing the core's weights.
    pub logical: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommGraph {
    pub nodes: Vec<CommNode>,
    /// `(a, b, words per inference)` with `a < b`, one entry per pair.
    pub edges: Vec<(usize, usize, f64)>,
}

impl CommGraph {
    /// Builds a graph from raw undirected edges, merging repeated pairs.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self, MapError> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(a, b, w) in edges {
            if a >= n || b >= n {
                return Err(MapError::Node(a, b));
            }
            if a != b {
                *acc.entry((a.min(b), a.max(b))).or_default() += w.max(0.0);
            }
        }
        Ok(Self {
            nodes: (0..n).map(|v| CommNode { vertex: v, logical: 1 }).collect(),
            edges: acc.into_iter().map(|((a, b), w)| (a, b, w)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Dense symmetric weight matrix.
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.len();
        let mut a = vec![0.0; n * n];
        for &(x, y, w) in &self.edges {
            a[x * n + y] += w;
            a[y * n + x] += w;
        }
        a
    }
}

/// Communication graph of a core-op graph. Ingress, constant and egress
/// vertices live on the host and are not placed. A core-op edge with no
/// trace gets weight 0 and a warning.
pub fn build_comm_graph(graph: &CompGraph, traces: &[EdgeTrace]) -> (CommGraph, Vec<String>) {
    let mut node_of = BTreeMap::new();
    let mut nodes = Vec::new();
    for v in &graph.vertices {
        if let OpKind::CoreOp(op) = &v.kind {
            node_of.insert(v.id, nodes.len());
            nodes.push(CommNode {
                vertex: v.id,
                logical: op.logical_count(),
            });
        }
    }
    let words: BTreeMap<(usize, usize), f64> = traces.iter().map(|t| ((t.producer, t.consumer), t.words)).collect();
    let mut warnings = Vec::new();
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for v in &graph.vertices {
        let Some(&b) = node_of.get(&v.id) else { continue };
        for &p in &v.inputs {
            let Some(&a) = node_of.get(&p) else { continue };
            let w = match words.get(&(p, v.id)) {
                Some(&w) => w,
                None => {
                    warnings.push(alloc::format!("no trace for edge {p} -> {}; weight 0", v.id));
                    0.0
                }
            };
            *acc.entry((a.min(b), a.max(b))).or_default() += w;
        }
    }
    let edges = acc.into_iter().map(|((a, b), w)| (a, b, w)).collect();
    (CommGraph { nodes, edges }, warnings)
}

/// Chip tiling and link costs of a mesh.
#[derive(Debug, Clone)]
pub struct MeshCost {
    pub rows: usize,
    pub cols: usize,
    /// Chip tile `(rows, cols)` when chips are rectangles.
    pub tile: Option<(usize, usize)>,
    chip: Vec<usize>,
    intra: f64,
    inter: f64,
}

impl MeshCost {
    /// Chips are the most square `a × b = cores_per_chip` tiles that divide
    /// the mesh; without one, cells are dealt to chips in row-major runs.
    pub fn new(mesh: &MeshSpec) -> Result<Self, MapError> {
        if mesh.rows == 0 || mesh.cols == 0 || mesh.cores_per_chip == 0 {
            return Err(MapError::Mesh("dimensions must be positive".into()));
        }
        let cpc = mesh.cores_per_chip;
        let tile = (1..=cpc)
            .filter(|a| cpc % a == 0)
            .map(|a| (a, cpc / a))
            .filter(|&(a, b)| mesh.rows % a == 0 && mesh.cols % b == 0)
            .min_by_key(|&(a, b)| a.abs_diff(b));
        let chip = (0..mesh.rows * mesh.cols)
            .map(|c| {
                let (r, k) = (c / mesh.cols, c % mesh.cols);
                match tile {
                    Some((a, b)) => (r / a) * (mesh.cols / b) + k / b,
                    None => c / cpc,
                }
            })
            .collect();
        Ok(Self {
            rows: mesh.rows,
            cols: mesh.cols,
            tile,
            chip,
            intra: mesh.intra_cost,
            inter: mesh.inter_cost,
        })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn chip_of(&self, cell: usize) -> usize {
        self.chip[cell]
    }

    /// `(hops, chip crossings)` along the column-then-row route from the
    /// lower-numbered cell, so the cost is symmetric.
    pub fn route(&self, a: usize, b: usize) -> (usize, usize) {
        let (a, b) = (a.min(b), a.max(b));
        let (mut r, mut c) = (a / self.cols, a % self.cols);
        let (r1, c1) = (b / self.cols, b % self.cols);
        let hops = r.abs_diff(r1) + c.abs_diff(c1);
        let mut crossings = 0;
        let mut here = self.chip[a];
        while c != c1 {
            c = if c < c1 { c + 1 } else { c - 1 };
            let next = self.chip[r * self.cols + c];
            crossings += usize::from(next != here);
            here = next;
        }
        while r != r1 {
            r = if r < r1 { r + 1 } else { r - 1 };
            let next = self.chip[r * self.cols + c];
            crossings += usize::from(next != here);
            here = next;
        }
        (hops, crossings)
    }

    /// `(intra, inter)` cost of one word between two cells.
    pub fn link(&self, a: usize, b: usize) -> (f64, f64) {
        let (h, x) = self.route(a, b);
        (h as f64 * self.intra, x as f64 * self.inter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Cell (`row · cols + col`) of every node.
    pub cells: Vec<usize>,
    pub cols: usize,
    pub total: f64,
    pub intra: f64,
    pub inter: f64,
    /// Cost of every edge, aligned with `CommGraph::edges`.
    pub edge_costs: Vec<f64>,
}

impl Placement {
    pub fn coord(&self, node: usize) -> (usize, usize) {
        (self.cells[node] / self.cols, self.cells[node] % self.cols)
    }
}

/// Exact cost of placing every node at `cells[node]`.
pub fn placement(cg: &CommGraph, mesh: &MeshCost, cells: Vec<usize>) -> Placement {
    let mut intra = 0.0;
    let mut inter = 0.0;
    let mut edge_costs = Vec::with_capacity(cg.edges.len());
    for &(a, b, w) in &cg.edges {
        let (i, x) = mesh.link(cells[a], cells[b]);
        intra += w * i;
        inter += w * x;
        edge_costs.push(w * (i + x));
    }
    Placement {
        cells,
        cols: mesh.cols,
        total: intra + inter,
        intra,
        inter,
        edge_costs,
    }
}

/// Total weight of edges between `a` and `b` (`adj` is `n × n`).
pub fn cut_cost(adj: &[f64], n: usize, a: &[usize], b: &[usize]) -> f64 {
    a.iter().map(|&x| b.iter().map(|&y| adj[x * n + y]).sum::<f64>()).sum()
}

/// One Kernighan–Lin pass: tentative best-gain swaps of unlocked pairs, then
/// the prefix with the largest positive total gain is kept. Returns that gain.
fn kl_pass(adj: &[f64], n: usize, a: &mut [usize], b: &mut [usize]) -> f64 {
    // D = external − internal weight, per side.
    let d_of = |x: usize, own: &[usize], other: &[usize]| -> f64 {
        let ext: f64 = other.iter().map(|&y| adj[x * n + y]).sum();
        let int: f64 = own.iter().filter(|&&y| y != x).map(|&y| adj[x * n + y]).sum();
        ext - int
    };
    let mut da: Vec<f64> = a.iter().map(|&x| d_of(x, a, b)).collect();
    let mut db: Vec<f64> = b.iter().map(|&x| d_of(x, b, a)).collect();
    let mut la = vec![false; a.len()];
    let mut lb = vec![false; b.len()];
    let steps = a.len().min(b.len());
    let mut swaps = Vec::with_capacity(steps);
    let mut gains = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, &x) in a.iter().enumerate() {
            if la[i] {
                continue;
            }
            for (j, &y) in b.iter().enumerate() {
                if lb[j] {
                    continue;
                }
                let g = da[i] + db[j] - 2.0 * adj[x * n + y];
                if best.is_none_or(|b| g > b.0) {
                    best = Some((g, i, j));
                }
            }
        }
        let Some((g, i, j)) = best else { break };
        la[i] = true;
        lb[j] = true;
        let (x, y) = (a[i], b[j]);
        // Update D as if x and y had swapped sides.
        for (k, &u) in a.iter().enumerate() {
            if !la[k] {
                da[k] += 2.0 * adj[u * n + x] - 2.0 * adj[u * n + y];
            }
        }
        for (k, &u) in b.iter().enumerate() {
            if !lb[k] {
                db[k] += 2.0 * adj[u * n + y] - 2.0 * adj[u * n + x];
            }
        }
        swaps.push((i, j));
        gains.push(g);
    }
    let mut best_k = 0;
    let mut best_g = 0.0;
    let mut acc = 0.0;
    for (k, g) in gains.iter().enumerate() {
        acc += g;
        if acc > best_g + 1e-12 {
            best_g = acc;
            best_k = k + 1;
        }
    }
    for &(i, j) in &swaps[..best_k] {
        core::mem::swap(&mut a[i], &mut b[j]);
    }
    best_g
}

/// Kernighan–Lin split of `nodes` into halves of `size_a` and the rest:
/// `restarts` seeded random splits, passes until no positive gain, best cut
/// kept. `adj` is the `n × n` weight matrix.
pub fn kl_bipartition(
    adj: &[f64],
    n: usize,
    nodes: &[usize],
    size_a: usize,
    seed: u64,
    restarts: usize,
) -> (Vec<usize>, Vec<usize>, f64) {
    let size_a = size_a.min(nodes.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let mut order = nodes.to_vec();
        order.shuffle(&mut rng);
        let mut b = order.split_off(size_a);
        let mut a = order;
        while kl_pass(adj, n, &mut a, &mut b) > 0.0 {}
        let cut = cut_cost(adj, n, &a, &b);
        if best.as_ref().is_none_or(|x| cut < x.2) {
            best = Some((a, b, cut));
        }
    }
    let (mut a, mut b, cut) = best.expect("at least one restart");
    a.sort_unstable();
    b.sort_unstable();
    (a, b, cut)
}

/// Rectangle of cells `[r0, r1) × [c0, c1)`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

impl Rect {
    fn len(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }

    /// Halves along the most balanced chip boundary inside the rectangle,
    /// else along the longer axis.
    fn split(&self, tile: Option<(usize, usize)>) -> (Rect, Rect) {
        let (h, w) = (self.r1 - self.r0, self.c1 - self.c0);
        if let Some((a, b)) = tile {
            let rows = (self.r0 + 1..self.r1).filter(|r| r % a == 0).map(|r| (r.abs_diff(self.r0 + h / 2), true, r));
            let cols = (self.c0 + 1..self.c1).filter(|c| c % b == 0).map(|c| (c.abs_diff(self.c0 + w / 2), false, c));
            let best = rows
                .map(|(d, _, r)| (d * w, true, r))
                .chain(cols.map(|(d, _, c)| (d * h, false, c)))
                .min_by_key(|x| x.0);
            match best {
                Some((_, true, r)) => return (Rect { r1: r, ..*self }, Rect { r0: r, ..*self }),
                Some((_, false, c)) => return (Rect { c1: c, ..*self }, Rect { c0: c, ..*self }),
                None => {}
            }
        }
        if h >= w {
            let m = self.r0 + h / 2;
            (Rect { r1: m, ..*self }, Rect { r0: m, ..*self })
        } else {
            let m = self.c0 + w / 2;
            (Rect { c1: m, ..*self }, Rect { c0: m, ..*self })
        }
    }
}

/// Options of [`map_to_mesh`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub seed: u64,
    pub restarts: usize,
    /// Greedy pairwise cell swaps on the exact cost after bipartitioning.
    pub refine: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            restarts: 5,
            refine: true,
        }
    }
}

/// Places every node on its own mesh cell.
pub fn map_to_mesh(cg: &CommGraph, mesh: &MeshSpec, cfg: &MapConfig) -> Result<Placement, MapError> {
    let mc = MeshCost::new(mesh)?;
    let n = cg.len();
    if n > mc.cells() {
        return Err(MapError::Capacity {
            nodes: n,
            rows: mesh.rows,
            cols: mesh.cols,
        });
    }
    // Zero-traffic dummies fill the free cells so every split is exact.
    let total = mc.cells();
    let mut adj = vec![0.0; total * total];
    for &(a, b, w) in &cg.edges {
        adj[a * total + b] += w;
        adj[b * total + a] += w;
    }
    // Whole placements are restarted too: the final swap search is local.
    let mut best: Option<Placement> = None;
    for round in 0..cfg.restarts.max(1) as u64 {
        let seed = cfg.seed.wrapping_add(round.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut cell_of = bisect(&adj, total, mesh, mc.tile, seed, cfg.restarts);
        if cfg.refine {
            refine(cg, &mc, &mut cell_of);
        }
        cell_of.truncate(n);
        let p = placement(cg, &mc, cell_of);
        if best.as_ref().is_none_or(|b| p.total < b.total) {
            best = Some(p);
        }
    }
    Ok(best.expect("at least one round"))
}

/// Recursive KL over mesh halves; returns the cell of every (padded) node.
fn bisect(
    adj: &[f64],
    total: usize,
    mesh: &MeshSpec,
    tile: Option<(usize, usize)>,
    seed: u64,
    restarts: usize,
) -> Vec<usize> {
    let mut cell_of = vec![0usize; total];
    let root = Rect {
        r0: 0,
        r1: mesh.rows,
        c0: 0,
        c1: mesh.cols,
    };
    let mut stack = vec![((0..total).collect::<Vec<_>>(), root, 0u64)];
    while let Some((nodes, rect, depth)) = stack.pop() {
        if rect.len() == 1 {
            cell_of[nodes[0]] = rect.r0 * mesh.cols + rect.c0;
            continue;
        }
        let (ra, rb) = rect.split(tile);
        let s = seed ^ (depth << 32) ^ (rect.r0 * mesh.cols + rect.c0) as u64;
        let (a, b, _) = kl_bipartition(adj, total, &nodes, ra.len(), s, restarts);
        stack.push((b, rb, depth + 1));
        stack.push((a, ra, depth + 1));
    }
    cell_of
}

/// First-improvement swaps of any two cells (occupied or not) until none
/// lowers the cost. `cells` covers every cell, real nodes first.
fn refine(cg: &CommGraph, mc: &MeshCost, cells: &mut [usize]) {
    let n = cg.len();
    let mut nbrs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(a, b, w) in &cg.edges {
        if w > 0.0 {
            nbrs[a].push((b, w));
            nbrs[b].push((a, w));
        }
    }
    let node_cost = |cells: &[usize], x: usize, at: usize, skip: usize| -> f64 {
        nbrs[x]
            .iter()
            .filter(|&&(y, _)| y != skip)
            .map(|&(y, w)| {
                let (i, e) = mc.link(at, cells[y]);
                w * (i + e)
            })
            .sum()
    };
    // Bounded sweeps keep the worst case polynomial on large meshes.
    for _ in 0..50 {
        let mut improved = false;
        for x in 0..n {
            for y in x + 1..cells.len() {
                let (cx, cy) = (cells[x], cells[y]);
                let mut delta = node_cost(cells, x, cy, y) - node_cost(cells, x, cx, y);
                if y < n {
                    delta += node_cost(cells, y, cx, x) - node_cost(cells, y, cy, x);
                }
                if delta < -1e-9 {
                    cells.swap(x, y);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(rows: usize, cols: usize, cpc: usize) -> MeshSpec {
        MeshSpec {
            rows,
            cols,
            cores_per_chip: cpc,
            intra_cost: 1.0,
            inter_cost: 10.0,
        }
    }

    #[test]
    fn chip_tiles_and_routes() {
        let m = MeshCost::new(&mesh(12, 8, 6)).unwrap();
        // 3×2 tiles: cells (0,0) and (2,1) share a chip, (0,2) does not.
        assert_eq!(m.chip_of(0), m.chip_of(2 * 8 + 1));
        assert_ne!(m.chip_of(0), m.chip_of(2));
        assert_eq!(m.route(0, 1), (1, 0));
        assert_eq!(m.route(0, 2), (2, 1));
        assert_eq!(m.route(0, 3 * 8), (3, 1));
    }

    #[test]
    fn four_node_split() {
        // A–B:10, C–D:10, A–C:1.
        let cg = CommGraph::from_edges(4, &[(0, 1, 10.0), (2, 3, 10.0), (0, 2, 1.0)]).unwrap();
        let (a, b, cut) = kl_bipartition(&cg.adjacency(), 4, &[0, 1, 2, 3], 2, 7, 5);
        assert_eq!(cut, 1.0);
        assert!(a == [0, 1] && b == [2, 3] || a == [2, 3] && b == [0, 1]);
    }

    #[test]
    fn zero_weights_split_evenly() {
        let cg = CommGraph::from_edges(6, &[]).unwrap();
        let (a, b, cut) = kl_bipartition(&cg.adjacency(), 6, &[0, 1, 2, 3, 4, 5], 3, 1, 5);
        assert_eq!((a.len(), b.len(), cut), (3, 3, 0.0));
    }

    #[test]
    fn two_nodes_sit_adjacent() {
        let cg = CommGraph::from_edges(2, &[(0, 1, 256.0)]).unwrap();
        let p = map_to_mesh(&cg, &mesh(1, 2, 2), &MapConfig::default()).unwrap();
        assert_eq!(p.total, 256.0);
        assert_eq!(p.inter, 0.0);
    }

    #[test]
    fn capacity_is_checked() {
        let cg = CommGraph::from_edges(5, &[]).unwrap();
        assert!(matches!(
            map_to_mesh(&cg, &mesh(2, 2, 2), &MapConfig::default()),
            Err(MapError::Capacity { nodes: 5, .. })
        ));
    }
}
