//! Centerline graphs and their decomposition into indexed branches with
//! parent/child structure.

use std::cmp::Reverse;
use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::OFFSETS_26;
use crate::volume::{BinaryMask, VolumeDims, Voxel};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("skeleton graph has no nodes")]
    EmptyGraph,
    #[error("root voxel {0:?} is not a skeleton node")]
    RootNotInGraph(Voxel),
}

/// Centerline voxels joined by 26-neighborhood edges.
///
/// Nodes are stored in linear scan order of the source mask, so node ids
/// double as a deterministic ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGraph {
    nodes: Vec<Voxel>,
    adjacency: Vec<Vec<usize>>,
}

impl SkeletonGraph {
    pub fn nodes(&self) -> &[Voxel] {
        &self.nodes
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Undirected edges as `(lo, hi)` node-id pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn component_count(&self) -> usize {
        let mut uf = UnionFind::new(self.nodes.len());
        for (a, b) in self.edges() {
            uf.union(a, b);
        }
        uf.sets()
    }

    fn from_edges(nodes: Vec<Voxel>, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for &(a, b) in edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for ns in &mut adjacency {
            ns.sort_unstable();
        }
        Self { nodes, adjacency }
    }
}

pub fn build_skeleton_graph(cl: &BinaryMask) -> SkeletonGraph {
    let dims = cl.dims();
    let nodes: Vec<Voxel> = cl.voxels().collect();
    let mut id = vec![usize::MAX; dims.len()];
    for (n, v) in nodes.iter().enumerate() {
        id[dims.index(*v)] = n;
    }
    let adjacency = nodes
        .iter()
        .map(|&v| {
            let mut ns: Vec<usize> = OFFSETS_26
                .iter()
                .filter_map(|&o| dims.offset(v, o))
                .map(|n| id[dims.index(n)])
                .filter(|&n| n != usize::MAX)
                .collect();
            ns.sort_unstable();
            ns
        })
        .collect();
    SkeletonGraph { nodes, adjacency }
}

/// Cycle rank `E - V + C` of the graph.
pub fn detect_cycles(g: &SkeletonGraph) -> usize {
    g.edge_count() + g.component_count() - g.node_count()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
    fn sets(&mut self) -> usize {
        (0..self.parent.len()).filter(|&i| self.find(i) == i).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub index: usize,
    #[serde(rename = "parent")]
    pub parent_index: Option<usize>,
    #[serde(rename = "children")]
    pub children_indices: Vec<usize>,
    pub path: Vec<Voxel>,
}

impl Branch {
    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }

    pub fn is_leaf(&self) -> bool {
        self.children_indices.is_empty()
    }
}

/// Branch decomposition of a centerline. Branch `i` is stored at `branches[i - 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AirwayTree {
    pub branches: Vec<Branch>,
    pub root_index: usize,
    pub cycle_count: usize,
}

impl AirwayTree {
    pub fn branch(&self, index: usize) -> &Branch {
        &self.branches[index - 1]
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Union of all branch paths.
    pub fn voxel_mask(&self, dims: VolumeDims) -> BinaryMask {
        BinaryMask::from_voxels(dims, self.branches.iter().flat_map(|b| b.path.iter().copied()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootPolicy {
    /// The endpoint with the largest z coordinate.
    #[default]
    HighestZ,
    Explicit(Voxel),
}

/// Orders candidate roots: largest z first, then smallest y, then smallest x.
fn root_key(v: Voxel) -> (Reverse<usize>, usize, usize) {
    (Reverse(v[2]), v[1], v[0])
}

/// Drops, for every independent cycle, the smallest edge in node order: edges are
/// admitted largest-first and any edge that would close a cycle is discarded.
fn break_cycles(g: &SkeletonGraph) -> Vec<(usize, usize)> {
    let mut edges = g.edges();
    edges.reverse();
    let mut uf = UnionFind::new(g.node_count());
    edges.retain(|&(a, b)| uf.union(a, b));
    edges.sort_unstable();
    edges
}

/// Splits an acyclic graph into maximal chains, breadth-first from each
/// component root. `roots[0]` is the main root; other components follow.
fn decompose(forest: &SkeletonGraph, roots: &[usize]) -> Vec<Branch> {
    let n = forest.node_count();
    let mut visited = vec![false; n];
    let mut branches: Vec<Branch> = Vec::new();
    // (start node, first step, parent branch index)
    let mut queue: VecDeque<(usize, Option<usize>, Option<usize>)> = VecDeque::new();

    for &root in roots {
        if visited[root] {
            continue;
        }
        queue.push_back((root, None, None));
        while let Some((start, step, parent)) = queue.pop_front() {
            let index = branches.len() + 1;
            let mut path = vec![start];
            visited[start] = true;
            let mut prev = start;
            let mut cur = match step {
                Some(s) => Some(s),
                None => forest.neighbors(start).iter().copied().find(|&x| !visited[x]),
            };
            while let Some(c) = cur {
                path.push(c);
                visited[c] = true;
                if forest.degree(c) != 2 {
                    break;
                }
                let next = forest.neighbors(c).iter().copied().find(|&x| x != prev);
                prev = c;
                cur = next;
            }
            let end = *path.last().unwrap();
            // Chains leave from the end junction; a root in the middle of the
            // graph also spawns its remaining chains.
            let mut spawn = |from: usize, queue: &mut VecDeque<_>| {
                for &x in forest.neighbors(from) {
                    if !visited[x] {
                        visited[x] = true;
                        queue.push_back((from, Some(x), Some(index)));
                    }
                }
            };
            if path.len() > 1 {
                spawn(end, &mut queue);
            }
            if step.is_none() {
                spawn(start, &mut queue);
            }
            if let Some(p) = parent {
                branches[p - 1].children_indices.push(index);
            }
            branches.push(Branch {
                index,
                parent_index: parent,
                children_indices: Vec::new(),
                path: path.iter().map(|&i| forest.nodes[i]).collect(),
            });
        }
    }
    branches
}

/// Picks one root per connected component; the main root comes first.
fn component_roots(forest: &SkeletonGraph, main: usize) -> Vec<usize> {
    let n = forest.node_count();
    let mut uf = UnionFind::new(n);
    for (a, b) in forest.edges() {
        uf.union(a, b);
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        if forest.degree(i) > 1 {
            continue;
        }
        let c = uf.find(i);
        let e = best.entry(c).or_insert(i);
        if root_key(forest.nodes[i]) < root_key(forest.nodes[*e]) {
            *e = i;
        }
    }
    let main_comp = uf.find(main);
    let mut others: Vec<usize> = best
        .into_iter()
        .filter(|&(c, _)| c != main_comp)
        .map(|(_, r)| r)
        .collect();
    others.sort_by_key(|&r| root_key(forest.nodes[r]));
    let mut roots = vec![main];
    roots.extend(others);
    roots
}

fn highest_endpoint(forest: &SkeletonGraph) -> usize {
    (0..forest.node_count())
        .filter(|&i| forest.degree(i) <= 1)
        .min_by_key(|&i| root_key(forest.nodes[i]))
        .expect("an acyclic non-empty graph has an endpoint")
}

pub fn parse_tree(g: &SkeletonGraph, root_policy: RootPolicy) -> Result<AirwayTree, TreeError> {
    if g.node_count() == 0 {
        return Err(TreeError::EmptyGraph);
    }
    let cycle_count = detect_cycles(g);
    let forest = SkeletonGraph::from_edges(g.nodes.clone(), &break_cycles(g));
    let root = match root_policy {
        RootPolicy::HighestZ => highest_endpoint(&forest),
        RootPolicy::Explicit(v) => forest
            .nodes
            .iter()
            .position(|&n| n == v)
            .ok_or(TreeError::RootNotInGraph(v))?,
    };
    let roots = component_roots(&forest, root);
    Ok(AirwayTree {
        branches: decompose(&forest, &roots),
        root_index: 1,
        cycle_count,
    })
}

/// Rebuilds the acyclic graph underlying a parsed tree from its branch paths.
fn tree_forest(t: &AirwayTree) -> (SkeletonGraph, Vec<usize>) {
    let mut nodes: Vec<Voxel> = t.branches.iter().flat_map(|b| b.path.iter().copied()).collect();
    nodes.sort_unstable_by_key(|v| (v[2], v[1], v[0]));
    nodes.dedup();
    let id: HashMap<Voxel, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut edges: Vec<(usize, usize)> = t
        .branches
        .iter()
        .flat_map(|b| b.path.windows(2).map(|w| (id[&w[0]], id[&w[1]])))
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    let roots = t
        .branches
        .iter()
        .filter(|b| b.parent_index.is_none())
        .map(|b| id[&b.path[0]])
        .collect();
    (SkeletonGraph::from_edges(nodes, &edges), roots)
}

/// Removes leaf branches shorter than `min_len` voxels (the shared junction voxel
/// counts toward the length), repeating until no such leaf remains. Top-level
/// branches are never removed.
pub fn prune_short_branches(t: &AirwayTree, min_len: usize) -> AirwayTree {
    let (mut forest, root_nodes) = tree_forest(t);
    let root_voxels: Vec<Voxel> = root_nodes.iter().map(|&r| forest.nodes[r]).collect();
    let mut branches = t.branches.clone();
    loop {
        let doomed: Vec<Voxel> = branches
            .iter()
            .filter(|b| b.parent_index.is_some() && b.is_leaf() && b.len() < min_len)
            .flat_map(|b| b.path[1..].iter().copied())
            .collect();
        if doomed.is_empty() {
            break;
        }
        let keep: Vec<bool> = forest.nodes.iter().map(|v| !doomed.contains(v)).collect();
        let mut remap = vec![usize::MAX; forest.node_count()];
        let mut nodes = Vec::new();
        for (i, &v) in forest.nodes.iter().enumerate() {
            if keep[i] {
                remap[i] = nodes.len();
                nodes.push(v);
            }
        }
        let edges: Vec<(usize, usize)> = forest
            .edges()
            .into_iter()
            .filter(|&(a, b)| keep[a] && keep[b])
            .map(|(a, b)| (remap[a], remap[b]))
            .collect();
        forest = SkeletonGraph::from_edges(nodes, &edges);
        let roots: Vec<usize> = root_voxels
            .iter()
            .filter_map(|v| forest.nodes.iter().position(|n| n == v))
            .collect();
        branches = decompose(&forest, &roots);
    }
    AirwayTree {
        branches,
        root_index: t.root_index,
        cycle_count: t.cycle_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(dims: usize, voxels: &[Voxel]) -> SkeletonGraph {
        build_skeleton_graph(&BinaryMask::from_voxels(VolumeDims::cube(dims), voxels.iter().copied()))
    }

    /// Trunk down the z axis from z=9 to z=5, then two diagonal arms.
    fn y_shape(arm: usize) -> Vec<Voxel> {
        let mut v: Vec<Voxel> = (5..=9).map(|z| [5, 5, z]).collect();
        for k in 1..=arm {
            v.push([5 - k, 5, 5 - k]);
            v.push([5 + k, 5, 5 - k]);
        }
        v
    }

    #[test]
    fn empty_graph() {
        let g = graph(3, &[]);
        assert_eq!(g.node_count(), 0);
        assert_eq!(parse_tree(&g, RootPolicy::HighestZ), Err(TreeError::EmptyGraph));
    }

    #[test]
    fn straight_line() {
        let g = graph(8, &(0..5).map(|z| [1, 1, z]).collect::<Vec<_>>());
        assert_eq!(g.edge_count(), 4);
        assert_eq!(detect_cycles(&g), 0);
        let t = parse_tree(&g, RootPolicy::HighestZ).unwrap();
        assert_eq!(t.branch_count(), 1);
        assert_eq!(t.branch(1).path[0], [1, 1, 4]);
        assert!(t.branch(1).is_leaf());
    }

    #[test]
    fn y_shape_decomposition() {
        let g = graph(12, &y_shape(4));
        let t = parse_tree(&g, RootPolicy::HighestZ).unwrap();
        assert_eq!(t.branch_count(), 3);
        let trunk = t.branch(1);
        assert_eq!(trunk.path.first(), Some(&[5, 5, 9]));
        assert_eq!(trunk.path.last(), Some(&[5, 5, 5]));
        assert_eq!(trunk.children_indices, vec![2, 3]);
        for i in [2, 3] {
            let arm = t.branch(i);
            assert_eq!(arm.parent_index, Some(1));
            assert_eq!(arm.path[0], [5, 5, 5]);
            assert_eq!(arm.len(), 5);
        }
    }

    #[test]
    fn rings() {
        // Diamond of diagonal steps: no chords under 26-adjacency.
        let ring: Vec<Voxel> = [[2, 0], [3, 1], [4, 2], [3, 3], [2, 4], [1, 3], [0, 2], [1, 1]]
            .iter()
            .map(|&[x, y]| [x, y, 1])
            .collect();
        let g = graph(10, &ring);
        assert_eq!((g.node_count(), g.edge_count()), (8, 8));
        assert_eq!(detect_cycles(&g), 1);
        let mut two = ring.clone();
        two.extend(ring.iter().map(|v| [v[0] + 5, v[1] + 5, v[2] + 5]));
        assert_eq!(detect_cycles(&graph(10, &two)), 2);
    }

    #[test]
    fn ring_on_stem_is_deterministic() {
        let mut v: Vec<Voxel> = (4..=9).map(|z| [3, 3, z]).collect();
        v.extend([[2, 3, 3], [4, 3, 3], [2, 3, 2], [4, 3, 2], [3, 3, 1]]);
        let g = graph(10, &v);
        assert_eq!(detect_cycles(&g), 1);
        let a = parse_tree(&g, RootPolicy::HighestZ).unwrap();
        let b = parse_tree(&graph(10, &v), RootPolicy::HighestZ).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cycle_count, 1);
        let covered = a.voxel_mask(VolumeDims::cube(10));
        assert_eq!(covered.count(), v.len());
    }

    #[test]
    fn prune_y_with_short_arm() {
        let mut v: Vec<Voxel> = (5..=9).map(|z| [5, 5, z]).collect();
        v.extend((1..=4).map(|k| [5 - k, 5, 5 - k]));
        v.push([6, 5, 4]); // 2-voxel arm counting the junction
        let g = graph(12, &v);
        let t = parse_tree(&g, RootPolicy::HighestZ).unwrap();
        assert!(t.branch_count() > 1);
        let p = prune_short_branches(&t, 3);
        assert_eq!(p.branch_count(), 1);
        assert_eq!(p.branch(1).len(), 9);
        assert_eq!(prune_short_branches(&p, 3), p);
        assert_eq!(prune_short_branches(&t, 1), t);
    }

    #[test]
    fn explicit_root_mid_chain() {
        let v: Vec<Voxel> = (0..7).map(|z| [1, 1, z]).collect();
        let g = graph(8, &v);
        let t = parse_tree(&g, RootPolicy::Explicit([1, 1, 3])).unwrap();
        assert_eq!(t.branch_count(), 2);
        assert!(t.branch(1).path.contains(&[1, 1, 3]));
        assert_eq!(t.branch(2).parent_index, Some(1));
        assert_eq!(
            parse_tree(&g, RootPolicy::Explicit([0, 0, 0])),
            Err(TreeError::RootNotInGraph([0, 0, 0]))
        );
    }

    #[test]
    fn separate_components_all_covered() {
        let mut v: Vec<Voxel> = (0..4).map(|z| [1, 1, z]).collect();
        v.extend((0..3).map(|z| [6, 6, z]));
        let t = parse_tree(&graph(8, &v), RootPolicy::HighestZ).unwrap();
        assert_eq!(t.branch_count(), 2);
        assert_eq!(t.branch(1).path[0], [1, 1, 3]);
        assert_eq!(t.branch(2).parent_index, None);
    }

    #[test]
    fn json_shape() {
        let t = parse_tree(&graph(12, &y_shape(2)), RootPolicy::HighestZ).unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v["root_index"], 1);
        assert_eq!(v["branches"][1]["parent"], 1);
        assert_eq!(v["branches"][0]["children"], serde_json::json!([2, 3]));
        assert_eq!(v["branches"][0]["path"][0], serde_json::json!([5, 5, 9]));
    }
}
