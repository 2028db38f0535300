use std::collections::{BTreeMap, BTreeSet};

use super::{ImageId, RelativePoseEdge, SceneError, UnitId, ViewGraph};

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Kruskal's algorithm maximizing total weight.
///
/// Ties are broken by the smaller `(min, max)` endpoint pair first, which
/// makes the tree unique. Returns indices into `edges`.
pub fn maximum_spanning_tree<K: Ord + Copy + Into<u32>>(
    nodes: &[K],
    edges: &[(K, K, u64)],
) -> Result<Vec<usize>, SceneError> {
    let index: BTreeMap<K, usize> = nodes.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let mut order: Vec<usize> = (0..edges.len())
        .filter(|&e| edges[e].0 != edges[e].1)
        .collect();
    let key = |e: usize| {
        let (a, b, _) = edges[e];
        if a < b {
            (a, b)
        } else {
            (b, a)
        }
    };
    order.sort_by(|&x, &y| edges[y].2.cmp(&edges[x].2).then(key(x).cmp(&key(y))));

    let mut uf = UnionFind::new(nodes.len());
    let mut tree = Vec::with_capacity(nodes.len().saturating_sub(1));
    for e in order {
        let (a, b, _) = edges[e];
        let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
            continue;
        };
        if uf.union(ia, ib) {
            tree.push(e);
        }
    }
    if nodes.len() > 1 && tree.len() + 1 != nodes.len() {
        let mut comps: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (i, &k) in nodes.iter().enumerate() {
            comps.entry(uf.find(i)).or_default().push(k.into());
        }
        let mut components: Vec<Vec<u32>> = comps.into_values().collect();
        components.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        return Err(SceneError::Disconnected { components });
    }
    Ok(tree)
}

impl From<ImageId> for u32 {
    fn from(v: ImageId) -> u32 {
        v.0
    }
}

impl From<UnitId> for u32 {
    fn from(v: UnitId) -> u32 {
        v.0
    }
}

impl From<super::SlotId> for u32 {
    fn from(v: super::SlotId) -> u32 {
        v.0
    }
}

/// Image-level maximum spanning tree weighted by inlier counts.
pub fn maximum_spanning_tree_images(
    graph: &ViewGraph,
) -> Result<Vec<RelativePoseEdge>, SceneError> {
    let nodes: Vec<ImageId> = graph.images.keys().copied().collect();
    let edges: Vec<_> = graph
        .edges
        .iter()
        .map(|e| (e.i, e.j, u64::from(e.inliers)))
        .collect();
    let tree = maximum_spanning_tree(&nodes, &edges)?;
    Ok(tree.into_iter().map(|e| graph.edges[e].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitEdge {
    pub a: UnitId,
    pub b: UnitId,
    pub weight: u64,
}

/// Units as nodes; edge weight is the summed inlier count of all image
/// edges joining two distinct units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitGraph {
    pub units: Vec<UnitId>,
    pub edges: BTreeMap<(UnitId, UnitId), u64>,
}

pub fn unit_quotient_graph(graph: &ViewGraph) -> UnitGraph {
    let units: BTreeSet<UnitId> = graph.images.values().map(|n| n.unit).collect();
    let mut edges = BTreeMap::new();
    for e in &graph.edges {
        let (Some(a), Some(b)) = (graph.images.get(&e.i), graph.images.get(&e.j)) else {
            continue;
        };
        if a.unit == b.unit {
            continue;
        }
        let key = if a.unit < b.unit {
            (a.unit, b.unit)
        } else {
            (b.unit, a.unit)
        };
        *edges.entry(key).or_insert(0) += u64::from(e.inliers);
    }
    UnitGraph {
        units: units.into_iter().collect(),
        edges,
    }
}

pub fn maximum_spanning_tree_units(graph: &ViewGraph) -> Result<Vec<UnitEdge>, SceneError> {
    let q = unit_quotient_graph(graph);
    let edges: Vec<(UnitId, UnitId, u64)> = q.edges.iter().map(|(&(a, b), &w)| (a, b, w)).collect();
    let tree = maximum_spanning_tree(&q.units, &edges)?;
    Ok(tree
        .into_iter()
        .map(|e| UnitEdge {
            a: edges[e].0,
            b: edges[e].1,
            weight: edges[e].2,
        })
        .collect())
}

/// Restricts the graph to its largest connected component.
///
/// Connectivity is computed on units: images of one unit are implicitly
/// connected. The largest component is the one with the most images
/// (ties: lowest unit id). Track observations in dropped images are removed
/// and tracks left with fewer than two observations are discarded.
pub fn largest_connected_component(graph: &ViewGraph) -> Result<ViewGraph, SceneError> {
    if graph.images.is_empty() {
        return Err(SceneError::Empty);
    }
    let units: Vec<UnitId> = graph
        .images
        .values()
        .map(|n| n.unit)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<UnitId, usize> = units.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let mut uf = UnionFind::new(units.len());
    for e in &graph.edges {
        if let (Some(a), Some(b)) = (graph.images.get(&e.i), graph.images.get(&e.j)) {
            uf.union(index[&a.unit], index[&b.unit]);
        }
    }
    let mut sizes: BTreeMap<usize, (usize, UnitId)> = BTreeMap::new();
    for n in graph.images.values() {
        let root = uf.find(index[&n.unit]);
        let entry = sizes.entry(root).or_insert((0, n.unit));
        entry.0 += 1;
        entry.1 = entry.1.min(n.unit);
    }
    let (&best_root, _) = sizes
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .expect("non-empty");

    let mut out = ViewGraph::default();
    for (&id, n) in &graph.images {
        if uf.find(index[&n.unit]) == best_root {
            out.images.insert(id, *n);
        }
    }
    let used_intr: BTreeSet<_> = out.images.values().map(|n| n.intrinsics).collect();
    out.intrinsics = graph
        .intrinsics
        .iter()
        .filter(|(k, _)| used_intr.contains(k))
        .map(|(k, v)| (*k, *v))
        .collect();
    out.edges = graph
        .edges
        .iter()
        .filter(|e| out.images.contains_key(&e.i) && out.images.contains_key(&e.j))
        .cloned()
        .collect();
    for t in &graph.tracks {
        let obs: Vec<_> = t
            .observations
            .iter()
            .filter(|o| out.images.contains_key(&o.image))
            .copied()
            .collect();
        if obs.len() >= 2 {
            out.tracks.push(super::Track {
                point: t.point,
                observations: obs,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ImageNode, IntrinsicsId, SlotId};
    use crate::Rotation;
    use nalgebra::Vector3;

    fn graph_with_units(assign: &[(u32, u32, u32)], edges: &[(u32, u32, u32)]) -> ViewGraph {
        let mut g = ViewGraph::default();
        for &(id, unit, slot) in assign {
            g.images.insert(
                ImageId(id),
                ImageNode { id: ImageId(id), unit: UnitId(unit), slot: SlotId(slot), intrinsics: IntrinsicsId(0) },
            );
        }
        for &(i, j, w) in edges {
            g.edges.push(RelativePoseEdge::new(ImageId(i), ImageId(j), Rotation::identity(), Vector3::x(), w));
        }
        g
    }

    fn brute_force_max_tree(n: usize, edges: &[(usize, usize, u64)]) -> u64 {
        let m = edges.len();
        let mut best = 0;
        for mask in 0u32..(1 << m) {
            if mask.count_ones() as usize != n - 1 {
                continue;
            }
            let mut uf = UnionFind::new(n);
            let mut ok = true;
            let mut w = 0;
            for (k, &(a, b, wt)) in edges.iter().enumerate() {
                if mask & (1 << k) != 0 {
                    if !uf.union(a, b) {
                        ok = false;
                        break;
                    }
                    w += wt;
                }
            }
            if ok {
                best = best.max(w);
            }
        }
        best
    }

    #[test]
    fn path_graph_keeps_all_edges() {
        let g = graph_with_units(&[(0, 0, 0), (1, 1, 0), (2, 2, 0)], &[(0, 1, 5), (1, 2, 7)]);
        assert_eq!(maximum_spanning_tree_images(&g).unwrap().len(), 2);
    }

    #[test]
    fn triangle_drops_lightest_edge() {
        let g = graph_with_units(&[(0, 0, 0), (1, 1, 0), (2, 2, 0)], &[(0, 1, 10), (1, 2, 20), (0, 2, 30)]);
        let tree = maximum_spanning_tree_images(&g).unwrap();
        let mut w: Vec<_> = tree.iter().map(|e| e.inliers).collect();
        w.sort();
        assert_eq!(w, vec![20, 30]);
        assert_eq!(brute_force_max_tree(3, &[(0, 1, 10), (1, 2, 20), (0, 2, 30)]), 50);
    }

    #[test]
    fn equal_weights_give_lexicographic_tree() {
        let g = graph_with_units(
            &[(0, 0, 0), (1, 1, 0), (2, 2, 0)],
            &[(1, 2, 4), (0, 2, 4), (0, 1, 4)],
        );
        let tree = maximum_spanning_tree_images(&g).unwrap();
        let keys: Vec<_> = tree.iter().map(|e| e.key()).collect();
        assert_eq!(keys, vec![(ImageId(0), ImageId(1)), (ImageId(0), ImageId(2))]);
    }

    #[test]
    fn disconnected_tree_is_error() {
        let g = graph_with_units(&[(0, 0, 0), (1, 1, 0), (2, 2, 0)], &[(0, 1, 5)]);
        match maximum_spanning_tree_images(&g) {
            Err(SceneError::Disconnected { components }) => assert_eq!(components.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quotient_weights_sum_inliers() {
        let g = graph_with_units(
            &[(0, 0, 0), (1, 0, 1), (2, 1, 0), (3, 1, 1)],
            &[(0, 2, 50), (1, 3, 70), (0, 1, 99)],
        );
        let q = unit_quotient_graph(&g);
        assert_eq!(q.edges.len(), 1);
        assert_eq!(q.edges[&(UnitId(0), UnitId(1))], 120);

        let intra = graph_with_units(&[(0, 0, 0), (1, 0, 1)], &[(0, 1, 10)]);
        assert!(unit_quotient_graph(&intra).edges.is_empty());
    }

    #[test]
    fn quotient_matches_double_loop() {
        let assign: Vec<_> = (0..9).map(|i| (i, i / 3, i % 3)).collect();
        let mut edges = vec![];
        let mut w = 3u32;
        for i in 0..9u32 {
            for j in (i + 1)..9 {
                w = (w * 31 + 7) % 97;
                if w % 3 != 0 {
                    edges.push((i, j, w));
                }
            }
        }
        let g = graph_with_units(&assign, &edges);
        let q = unit_quotient_graph(&g);
        for a in 0..3u32 {
            for b in (a + 1)..3 {
                let mut expect = 0u64;
                for &(i, j, w) in &edges {
                    let (ui, uj) = (i / 3, j / 3);
                    if (ui == a && uj == b) || (ui == b && uj == a) {
                        expect += w as u64;
                    }
                }
                let got = q.edges.get(&(UnitId(a), UnitId(b))).copied().unwrap_or(0);
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn unit_tree_cases() {
        // weights 120 / 80 / 200 on the quotient triangle
        let g = graph_with_units(
            &[(0, 0, 0), (1, 1, 0), (2, 2, 0)],
            &[(0, 1, 120), (1, 2, 80), (0, 2, 200)],
        );
        let mut w: Vec<_> = maximum_spanning_tree_units(&g).unwrap().iter().map(|e| e.weight).collect();
        w.sort();
        assert_eq!(w, vec![120, 200]);

        let single = graph_with_units(&[(0, 0, 0), (1, 0, 1)], &[(0, 1, 3)]);
        assert!(maximum_spanning_tree_units(&single).unwrap().is_empty());
    }

    #[test]
    fn largest_component_by_units() {
        // component A: units 0..5, component B: units 5..8
        let assign: Vec<_> = (0..8).map(|i| (i, i, 0)).collect();
        let edges = [(0, 1, 1), (1, 2, 1), (2, 3, 1), (3, 4, 1), (5, 6, 1), (6, 7, 1)];
        let g = graph_with_units(&assign, &edges);
        let lcc = largest_connected_component(&g).unwrap();
        assert_eq!(lcc.images.len(), 5);
        assert_eq!(lcc.edges.len(), 4);
        assert_eq!(largest_connected_component(&lcc).unwrap(), lcc);
    }

    #[test]
    fn shared_unit_links_components() {
        // images 0 and 1 share unit 1; edges 0-2 and 1-3 only meet through that unit
        let g = graph_with_units(&[(0, 1, 0), (1, 1, 1), (2, 0, 0), (3, 2, 1)], &[(0, 2, 5), (1, 3, 5)]);
        let lcc = largest_connected_component(&g).unwrap();
        assert_eq!(lcc.images.len(), 4);
    }

    #[test]
    fn empty_graph_is_error() {
        assert!(matches!(largest_connected_component(&ViewGraph::default()), Err(SceneError::Empty)));
    }

    #[test]
    fn mst_matches_brute_force_on_small_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let n = rng.random_range(2..=6);
            let mut edges = vec![];
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.random_bool(0.7) {
                        edges.push((a, b, rng.random_range(1..20u64)));
                    }
                }
            }
            // ensure connectivity with a path
            for a in 1..n {
                if !edges.iter().any(|&(x, y, _)| (x, y) == (a - 1, a)) {
                    edges.push((a - 1, a, 1));
                }
            }
            let nodes: Vec<UnitId> = (0..n as u32).map(UnitId).collect();
            let keyed: Vec<_> = edges.iter().map(|&(a, b, w)| (UnitId(a as u32), UnitId(b as u32), w)).collect();
            let tree = maximum_spanning_tree(&nodes, &keyed).unwrap();
            let w: u64 = tree.iter().map(|&e| keyed[e].2).sum();
            assert_eq!(w, brute_force_max_tree(n, &edges));
        }
    }
}
