//! Decoupled rotation averaging for rigs.
//!
//! Camera rotations are averaged first, internal rig rotations are read off
//! per unit and fused with the geodesic median, then unit rotations are
//! averaged with the rig held fixed and composed back into cameras.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::graph::UnionFind;
use crate::scene::{maximum_spanning_tree, ImageId, ImageNode, SceneError, SlotId, UnitId, ViewGraph};
use crate::so3::{geodesic_median, MEDIAN_DEFAULT_MAX_ITER, MEDIAN_DEFAULT_TOL};
use crate::solver::{SolverError, SparseSpd};
use crate::Rotation;

pub type RotationField = BTreeMap<ImageId, Rotation>;
pub type UnitRotationField = BTreeMap<UnitId, Rotation>;

#[derive(Debug, Error)]
pub enum RotationError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("slot {0} shares no unit with the reference slot, directly or through other slots")]
    UnreachableSlot(SlotId),
    #[error("no rotation for {0}")]
    Missing(String),
    #[error("nothing to average")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationOptions {
    /// Scale of the Cauchy-style IRLS weights, degrees.
    pub sigma_deg: f64,
    pub l1_outer_iterations: usize,
    pub l1_inner_iterations: usize,
    pub irls_max_iterations: usize,
    /// IRLS stops once every update is below this angle, degrees.
    pub irls_tolerance_deg: f64,
}

impl Default for RotationOptions {
    fn default() -> Self {
        Self {
            sigma_deg: 5.0,
            l1_outer_iterations: 5,
            l1_inner_iterations: 10,
            irls_max_iterations: 100,
            irls_tolerance_deg: 1e-3,
        }
    }
}

/// A measured `R_ij = R_j R_i^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeRotation<K> {
    pub i: K,
    pub j: K,
    pub rotation: Rotation,
    pub inliers: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AveragingReport {
    pub nodes: usize,
    pub measurements: usize,
    pub l1_iterations: usize,
    pub irls_iterations: usize,
    pub irls_converged: bool,
    pub final_update_deg: f64,
}

#[derive(Debug, Clone)]
pub struct Averaged<K> {
    pub rotations: BTreeMap<K, Rotation>,
    pub report: AveragingReport,
}

const L1_EPS: f64 = 1e-5;

/// Robust rotation averaging on a connected graph; `anchor` stays at identity.
///
/// Parallel measurements between the same pair are allowed and each one is
/// a separate residual. Initialization walks the maximum spanning tree
/// (weights summed over parallel measurements, their geodesic median used
/// as the tree edge).
pub fn average_rotations<K: Ord + Copy + Into<u32>>(
    nodes: &[K],
    edges: &[RelativeRotation<K>],
    anchor: K,
    opts: &RotationOptions,
) -> Result<Averaged<K>, RotationError> {
    let mut nodes: Vec<K> = nodes.to_vec();
    nodes.sort();
    nodes.dedup();
    if nodes.is_empty() {
        return Err(RotationError::Empty);
    }
    let index: BTreeMap<K, usize> = nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
    let anchor_idx = *index
        .get(&anchor)
        .ok_or_else(|| RotationError::Missing(format!("anchor {}", anchor.into())))?;
    let edges: Vec<RelativeRotation<K>> = edges
        .iter()
        .filter(|e| e.i != e.j && index.contains_key(&e.i) && index.contains_key(&e.j))
        .copied()
        .collect();

    let mut rot = initialize(&nodes, &index, &edges, anchor_idx)?;
    let mut report = AveragingReport {
        nodes: nodes.len(),
        measurements: edges.len(),
        ..AveragingReport::default()
    };
    if nodes.len() > 1 {
        let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (index[&e.i], index[&e.j])).collect();
        let system = Laplacian::new(nodes.len(), anchor_idx);

        for _ in 0..opts.l1_outer_iterations {
            report.l1_iterations += 1;
            let omega = residuals(&rot, &edges, &pairs);
            let delta = l1_step(&system, &pairs, &omega, opts.l1_inner_iterations)?;
            apply(&mut rot, &delta, anchor_idx);
        }

        let sigma2 = opts.sigma_deg.to_radians().powi(2);
        let tol = opts.irls_tolerance_deg.to_radians();
        for _ in 0..opts.irls_max_iterations {
            report.irls_iterations += 1;
            let omega = residuals(&rot, &edges, &pairs);
            let w: Vec<f64> = omega.iter().map(|o| 1.0 / (1.0 + o.norm_squared() / sigma2)).collect();
            let delta = system.solve_vector(&pairs, &w, &omega)?;
            let largest = delta.iter().map(|d| d.norm()).fold(0.0, f64::max);
            apply(&mut rot, &delta, anchor_idx);
            report.final_update_deg = largest.to_degrees();
            if largest < tol {
                report.irls_converged = true;
                break;
            }
        }
    } else {
        report.irls_converged = true;
    }

    for (k, r) in rot.iter_mut().enumerate() {
        if k != anchor_idx && r.orthonormality_error() > 1e-12 {
            *r = Rotation::project(r.matrix()).map_err(|_| RotationError::Missing("projectable rotation".into()))?;
        }
    }
    Ok(Averaged {
        rotations: nodes.into_iter().zip(rot).collect(),
        report,
    })
}

fn initialize<K: Ord + Copy + Into<u32>>(
    nodes: &[K],
    index: &BTreeMap<K, usize>,
    edges: &[RelativeRotation<K>],
    anchor: usize,
) -> Result<Vec<Rotation>, RotationError> {
    // group parallel measurements, oriented from the smaller to the larger node
    let mut groups: BTreeMap<(K, K), (u64, Vec<Rotation>)> = BTreeMap::new();
    for e in edges {
        let (key, r) = if e.i < e.j {
            ((e.i, e.j), e.rotation)
        } else {
            ((e.j, e.i), e.rotation.transpose())
        };
        let g = groups.entry(key).or_insert((0, Vec::new()));
        g.0 += e.inliers;
        g.1.push(r);
    }
    let keys: Vec<(K, K)> = groups.keys().copied().collect();
    let weighted: Vec<(K, K, u64)> = keys.iter().map(|&(a, b)| (a, b, groups[&(a, b)].0)).collect();
    let tree = maximum_spanning_tree(nodes, &weighted)?;

    let mut adj: Vec<Vec<(usize, Rotation)>> = vec![Vec::new(); nodes.len()];
    for t in tree {
        let (a, b) = keys[t];
        let samples = &groups[&(a, b)].1;
        let r = geodesic_median(samples, MEDIAN_DEFAULT_TOL, MEDIAN_DEFAULT_MAX_ITER)
            .map_err(|_| RotationError::Empty)?
            .rotation;
        let (ia, ib) = (index[&a], index[&b]);
        adj[ia].push((ib, r));
        adj[ib].push((ia, r.transpose()));
    }
    let mut rot = vec![None; nodes.len()];
    rot[anchor] = Some(Rotation::identity());
    let mut queue = VecDeque::from([anchor]);
    while let Some(u) = queue.pop_front() {
        let ru = rot[u].unwrap();
        for &(v, r_uv) in &adj[u] {
            if rot[v].is_none() {
                // R_v = R_uv R_u
                rot[v] = Some(r_uv.compose(&ru));
                queue.push_back(v);
            }
        }
    }
    Ok(rot.into_iter().map(|r| r.expect("spanning tree reaches every node")).collect())
}

/// `log(R_j^T R_ij R_i)`, which is `delta_j - delta_i` to first order under `R <- R exp(delta)`.
fn residuals<K>(rot: &[Rotation], edges: &[RelativeRotation<K>], pairs: &[(usize, usize)]) -> Vec<Vector3<f64>> {
    edges
        .iter()
        .zip(pairs)
        .map(|(e, &(i, j))| {
            let m = rot[j].matrix().transpose() * e.rotation.matrix() * rot[i].matrix();
            Rotation::from_matrix_unchecked(m).log()
        })
        .collect()
}

fn apply(rot: &mut [Rotation], delta: &[Vector3<f64>], anchor: usize) {
    for (k, d) in delta.iter().enumerate() {
        if k != anchor {
            rot[k] = rot[k].compose(&Rotation::exp(d));
        }
    }
}

/// Weighted graph Laplacian with the anchor row and column removed.
struct Laplacian {
    n: usize,
    anchor: usize,
}

impl Laplacian {
    fn new(n: usize, anchor: usize) -> Self {
        Self { n, anchor }
    }

    fn var(&self, k: usize) -> Option<usize> {
        match k.cmp(&self.anchor) {
            std::cmp::Ordering::Less => Some(k),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(k - 1),
        }
    }

    /// Minimizes `sum_e w_e (b_e - (x_j - x_i))^2` with `x_anchor = 0`.
    fn solve(&self, pairs: &[(usize, usize)], w: &[f64], b: &[f64]) -> Result<Vec<f64>, SolverError> {
        let m = self.n - 1;
        let mut trip = Vec::with_capacity(pairs.len() * 4);
        let mut rhs = DVector::zeros(m);
        for ((&(i, j), &we), &be) in pairs.iter().zip(w).zip(b) {
            let (vi, vj) = (self.var(i), self.var(j));
            if let Some(a) = vi {
                trip.push((a, a, we));
                rhs[a] -= we * be;
            }
            if let Some(c) = vj {
                trip.push((c, c, we));
                rhs[c] += we * be;
            }
            if let (Some(a), Some(c)) = (vi, vj) {
                trip.push((a, c, -we));
                trip.push((c, a, -we));
            }
        }
        let f = SparseSpd::factor(m, &trip)?;
        let x = f.solve(&rhs);
        let mut out = vec![0.0; self.n];
        for k in 0..self.n {
            if let Some(v) = self.var(k) {
                out[k] = x[v];
            }
        }
        Ok(out)
    }

    fn solve_vector(
        &self,
        pairs: &[(usize, usize)],
        w: &[f64],
        b: &[Vector3<f64>],
    ) -> Result<Vec<Vector3<f64>>, SolverError> {
        let mut out = vec![Vector3::zeros(); self.n];
        for c in 0..3 {
            let bc: Vec<f64> = b.iter().map(|v| v[c]).collect();
            for (o, x) in out.iter_mut().zip(self.solve(pairs, w, &bc)?) {
                o[c] = x;
            }
        }
        Ok(out)
    }
}

/// IRLS for `min sum_e |omega_e - (delta_j - delta_i)|_1`, coordinates independent.
fn l1_step(
    system: &Laplacian,
    pairs: &[(usize, usize)],
    omega: &[Vector3<f64>],
    inner: usize,
) -> Result<Vec<Vector3<f64>>, SolverError> {
    let mut delta = vec![Vector3::zeros(); system.n];
    for c in 0..3 {
        let b: Vec<f64> = omega.iter().map(|o| o[c]).collect();
        let mut x = vec![0.0; system.n];
        for _ in 0..inner {
            let w: Vec<f64> = pairs
                .iter()
                .zip(&b)
                .map(|(&(i, j), be)| 1.0 / (be - (x[j] - x[i])).abs().max(L1_EPS))
                .collect();
            x = system.solve(pairs, &w, &b)?;
        }
        for (d, v) in delta.iter_mut().zip(x) {
            d[c] = v;
        }
    }
    Ok(delta)
}

/// Image rotations, one averaging run per connected component of the image
/// graph (edges only). Each component is anchored at its lowest image id.
/// Returns the rotations and the component index of every estimated image.
pub fn average_rotations_by_component(
    graph: &ViewGraph,
    opts: &RotationOptions,
) -> Result<(RotationField, BTreeMap<ImageId, usize>, Vec<AveragingReport>), RotationError> {
    let ids: Vec<ImageId> = graph.images.keys().copied().collect();
    let index: BTreeMap<ImageId, usize> = ids.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut uf = UnionFind::new(ids.len());
    for e in &graph.edges {
        if let (Some(&a), Some(&b)) = (index.get(&e.i), index.get(&e.j)) {
            uf.union(a, b);
        }
    }
    let mut members: BTreeMap<usize, Vec<ImageId>> = BTreeMap::new();
    for (k, &id) in ids.iter().enumerate() {
        members.entry(uf.find(k)).or_default().push(id);
    }
    let mut comps: Vec<Vec<ImageId>> = members.into_values().filter(|c| c.len() > 1).collect();
    comps.sort();
    let mut field = RotationField::new();
    let mut component = BTreeMap::new();
    let mut reports = Vec::new();
    for (c, imgs) in comps.iter().enumerate() {
        let set: BTreeSet<ImageId> = imgs.iter().copied().collect();
        let edges: Vec<RelativeRotation<ImageId>> = graph
            .edges
            .iter()
            .filter(|e| set.contains(&e.i))
            .map(|e| RelativeRotation {
                i: e.i,
                j: e.j,
                rotation: *e.rotation(),
                inliers: u64::from(e.inliers),
            })
            .collect();
        let out = average_rotations(imgs, &edges, imgs[0], opts)?;
        for (id, r) in out.rotations {
            field.insert(id, r);
            component.insert(id, c);
        }
        reports.push(out.report);
    }
    Ok((field, component, reports))
}

/// Internal rotations `R^r_j` relative to the reference (lowest) slot, all
/// images treated as one gauge.
pub fn estimate_internal_rotations(
    global: &RotationField,
    nodes: &BTreeMap<ImageId, ImageNode>,
) -> Result<BTreeMap<SlotId, Rotation>, RotationError> {
    let component: BTreeMap<ImageId, usize> = global.keys().map(|&k| (k, 0)).collect();
    estimate_internal_rotations_in_components(global, &component, nodes)
}

/// As [`estimate_internal_rotations`], but a relative rotation `R_b R_a^T`
/// is only formed when both images belong to the same component (and so
/// share a gauge).
pub fn estimate_internal_rotations_in_components(
    global: &RotationField,
    component: &BTreeMap<ImageId, usize>,
    nodes: &BTreeMap<ImageId, ImageNode>,
) -> Result<BTreeMap<SlotId, Rotation>, RotationError> {
    let slots: BTreeSet<SlotId> = nodes.values().map(|n| n.slot).collect();
    let Some(&reference) = slots.first() else {
        return Err(RotationError::Empty);
    };
    // samples[(a, b)] holds R_b R_a^T for a < b
    let mut by_unit: BTreeMap<UnitId, Vec<(SlotId, ImageId)>> = BTreeMap::new();
    for n in nodes.values() {
        if global.contains_key(&n.id) {
            by_unit.entry(n.unit).or_default().push((n.slot, n.id));
        }
    }
    let mut samples: BTreeMap<(SlotId, SlotId), Vec<Rotation>> = BTreeMap::new();
    for members in by_unit.values_mut() {
        members.sort();
        for (x, &(sa, ia)) in members.iter().enumerate() {
            for &(sb, ib) in &members[x + 1..] {
                if sa == sb || component.get(&ia) != component.get(&ib) {
                    continue;
                }
                let r = global[&ib].matrix() * global[&ia].matrix().transpose();
                samples
                    .entry((sa, sb))
                    .or_default()
                    .push(Rotation::from_matrix_unchecked(r));
            }
        }
    }
    let median = |s: &[Rotation]| -> Result<Rotation, RotationError> {
        Ok(geodesic_median(s, MEDIAN_DEFAULT_TOL, MEDIAN_DEFAULT_MAX_ITER)
            .map_err(|_| RotationError::Empty)?
            .rotation)
    };

    let mut out = BTreeMap::new();
    out.insert(reference, Rotation::identity());
    for (&(a, b), s) in &samples {
        if a == reference {
            out.insert(b, median(s)?);
        }
    }
    if out.len() < slots.len() {
        // chain the rest through a maximum spanning tree of slot co-occurrence
        let slot_list: Vec<SlotId> = slots.iter().copied().collect();
        let pairs: Vec<(SlotId, SlotId)> = samples.keys().copied().collect();
        let weighted: Vec<(SlotId, SlotId, u64)> =
            pairs.iter().map(|&(a, b)| (a, b, samples[&(a, b)].len() as u64)).collect();
        let tree = match maximum_spanning_tree(&slot_list, &weighted) {
            Ok(t) => t,
            Err(SceneError::Disconnected { components }) => {
                let unreachable = components
                    .iter()
                    .find(|c| !c.contains(&reference.0))
                    .and_then(|c| c.first().copied())
                    .unwrap_or(0);
                return Err(RotationError::UnreachableSlot(SlotId(unreachable)));
            }
            Err(e) => return Err(e.into()),
        };
        let mut adj: BTreeMap<SlotId, Vec<(SlotId, Rotation)>> = BTreeMap::new();
        for t in tree {
            let (a, b) = pairs[t];
            let m = median(&samples[&(a, b)])?;
            adj.entry(a).or_default().push((b, m));
            adj.entry(b).or_default().push((a, m.transpose()));
        }
        let mut chained = BTreeMap::from([(reference, Rotation::identity())]);
        let mut queue = VecDeque::from([reference]);
        while let Some(u) = queue.pop_front() {
            let ru = chained[&u];
            for &(v, r_uv) in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
                if let std::collections::btree_map::Entry::Vacant(e) = chained.entry(v) {
                    let rv = out.get(&v).copied().unwrap_or_else(|| r_uv.compose(&ru));
                    e.insert(rv);
                    queue.push_back(v);
                }
            }
        }
        for (s, r) in chained {
            out.entry(s).or_insert(r);
        }
    }
    Ok(out)
}

/// Unit-level measurements `R^g_ij = R^r_j^T R_ij R^r_i` from every image
/// edge joining two different units.
pub fn unit_measurements(
    graph: &ViewGraph,
    rig: &BTreeMap<SlotId, Rotation>,
) -> Result<Vec<RelativeRotation<UnitId>>, RotationError> {
    let mut out = Vec::new();
    for e in &graph.edges {
        let (Some(ni), Some(nj)) = (graph.images.get(&e.i), graph.images.get(&e.j)) else {
            continue;
        };
        if ni.unit == nj.unit {
            continue;
        }
        let ri = rig
            .get(&ni.slot)
            .ok_or_else(|| RotationError::Missing(format!("slot {}", ni.slot)))?;
        let rj = rig
            .get(&nj.slot)
            .ok_or_else(|| RotationError::Missing(format!("slot {}", nj.slot)))?;
        let m = rj.matrix().transpose() * e.rotation().matrix() * ri.matrix();
        out.push(RelativeRotation {
            i: ni.unit,
            j: nj.unit,
            rotation: Rotation::from_matrix_unchecked(m),
            inliers: u64::from(e.inliers),
        });
    }
    Ok(out)
}

/// Unit rotations `R^g` with the rig rotations held fixed.
pub fn average_unit_rotations(
    graph: &ViewGraph,
    rig: &BTreeMap<SlotId, Rotation>,
    anchor_unit: UnitId,
    opts: &RotationOptions,
) -> Result<Averaged<UnitId>, RotationError> {
    let units: Vec<UnitId> = graph.units().into_keys().collect();
    let edges = unit_measurements(graph, rig)?;
    average_rotations(&units, &edges, anchor_unit, opts)
}

/// `R_i = R^r_i R^g_i` for every image.
pub fn compose_camera_rotations(
    rig: &BTreeMap<SlotId, Rotation>,
    units: &UnitRotationField,
    nodes: &BTreeMap<ImageId, ImageNode>,
) -> Result<RotationField, RotationError> {
    nodes
        .values()
        .map(|n| {
            let rr = rig
                .get(&n.slot)
                .ok_or_else(|| RotationError::Missing(format!("slot {}", n.slot)))?;
            let rg = units
                .get(&n.unit)
                .ok_or_else(|| RotationError::Missing(format!("unit {}", n.unit)))?;
            Ok((n.id, rr.compose(rg)))
        })
        .collect()
}

/// Everything the rotation stage produces.
#[derive(Debug, Clone)]
pub struct RotationStage {
    pub camera_initial: RotationField,
    pub rig: BTreeMap<SlotId, Rotation>,
    pub units: UnitRotationField,
    pub cameras: RotationField,
    pub reports: Vec<AveragingReport>,
}

/// Camera averaging, rig extraction, unit averaging and composition.
pub fn decoupled_rotation_averaging(
    graph: &ViewGraph,
    opts: &RotationOptions,
) -> Result<RotationStage, RotationError> {
    let anchor = graph.anchor_unit().ok_or(RotationError::Empty)?;
    let (camera_initial, component, mut reports) = average_rotations_by_component(graph, opts)?;
    let rig = estimate_internal_rotations_in_components(&camera_initial, &component, &graph.images)?;
    let units = average_unit_rotations(graph, &rig, anchor, opts)?;
    reports.push(units.report.clone());
    let cameras = compose_camera_rotations(&rig, &units.rotations, &graph.images)?;
    Ok(RotationStage {
        camera_initial,
        rig,
        units: units.rotations,
        cameras,
        reports,
    })
}
