use std::collections::BTreeMap;

use crate::rotation::RotationField;
use crate::scene::{SceneError, SlotId, UnitId, ViewGraph};
use crate::solver::{admm_l1, AdmmL1Problem, AdmmOptions};

use super::{BaselineScale, PositionField, StageReport, TranslationError};
use crate::scene::graph::UnionFind;

/// L1 distance initialization
/// `min sum |s_ij R_j^T t_ij - C_ij|_1, s_ij >= 1` with
/// `C_ij = c^g_i - c^g_j + R_j^T t^r_j - R_i^T t^r_i`.
///
/// The anchor unit and the reference slot are fixed at zero. Every edge
/// with both rotations known contributes, including edges inside one unit.
pub fn init_positions_l1(
    graph: &ViewGraph,
    rotations: &RotationField,
    opts: &AdmmOptions,
) -> Result<(PositionField, BaselineScale, StageReport), TranslationError> {
    let anchor = graph.anchor_unit().ok_or(TranslationError::Empty("view graph has no units"))?;
    let reference = graph.reference_slot().ok_or(TranslationError::Empty("view graph has no slots"))?;
    let units: Vec<UnitId> = graph.units().into_keys().collect();
    let slots: Vec<SlotId> = graph.slots().into_iter().collect();

    let mut p = AdmmL1Problem::new();
    let mut unit_var: BTreeMap<UnitId, usize> = BTreeMap::new();
    for &u in &units {
        if u != anchor {
            let v = p.add_variable();
            p.add_variable();
            p.add_variable();
            unit_var.insert(u, v);
        }
    }
    let mut slot_var: BTreeMap<SlotId, usize> = BTreeMap::new();
    for &s in &slots {
        if s != reference {
            let v = p.add_variable();
            p.add_variable();
            p.add_variable();
            slot_var.insert(s, v);
        }
    }

    let unit_index: BTreeMap<UnitId, usize> = units.iter().enumerate().map(|(k, &u)| (u, k)).collect();
    let mut uf = UnionFind::new(units.len());
    let mut scale_var = Vec::new();
    for (e_idx, e) in graph.edges.iter().enumerate() {
        let (Some(ni), Some(nj)) = (graph.images.get(&e.i), graph.images.get(&e.j)) else {
            continue;
        };
        let (Some(ri), Some(rj)) = (rotations.get(&e.i), rotations.get(&e.j)) else {
            continue;
        };
        uf.union(unit_index[&ni.unit], unit_index[&nj.unit]);
        let u = rj.transpose().act(&e.translation);
        let (ri_t, rj_t) = (ri.matrix().transpose(), rj.matrix().transpose());
        let s = p.add_bounded_variable(1.0);
        scale_var.push((e_idx, s));
        for a in 0..3 {
            // s u_a - (c_i - c_j + R_j^T t_j - R_i^T t_i)_a = 0
            let mut row = vec![(s, u[a])];
            if let Some(&v) = unit_var.get(&ni.unit) {
                row.push((v + a, -1.0));
            }
            if let Some(&v) = unit_var.get(&nj.unit) {
                row.push((v + a, 1.0));
            }
            if let Some(&v) = slot_var.get(&nj.slot) {
                for b in 0..3 {
                    row.push((v + b, -rj_t[(a, b)]));
                }
            }
            if let Some(&v) = slot_var.get(&ni.slot) {
                for b in 0..3 {
                    row.push((v + b, ri_t[(a, b)]));
                }
            }
            p.add_row(&row, 0.0);
        }
    }
    if scale_var.is_empty() {
        return Err(TranslationError::Empty("no edge with known rotations"));
    }
    let mut groups: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (k, u) in units.iter().enumerate() {
        groups.entry(uf.find(k)).or_default().push(u.0);
    }
    if groups.len() > 1 {
        let mut components: Vec<Vec<u32>> = groups.into_values().collect();
        components.sort_by_key(|c| std::cmp::Reverse(c.len()));
        return Err(SceneError::Disconnected { components }.into());
    }

    let mut z0 = vec![0.0; p.num_vars()];
    for &(_, s) in &scale_var {
        z0[s] = 1.0;
    }
    p.set_initial(z0);
    let result = admm_l1(&p, opts)?;
    let z = &result.solution;

    let mut field = PositionField::default();
    for &u in &units {
        let c = unit_var
            .get(&u)
            .map(|&v| nalgebra::Vector3::new(z[v], z[v + 1], z[v + 2]))
            .unwrap_or_else(nalgebra::Vector3::zeros);
        field.unit_position.insert(u, c);
    }
    for &s in &slots {
        let t = slot_var
            .get(&s)
            .map(|&v| nalgebra::Vector3::new(z[v], z[v + 1], z[v + 2]))
            .unwrap_or_else(nalgebra::Vector3::zeros);
        field.internal_translation.insert(s, t);
    }
    let scales = scale_var.iter().map(|&(e, s)| (e, z[s])).collect();
    let report = StageReport {
        objective_before: result.initial_objective,
        objective_after: result.objective,
        iterations: result.iterations,
        converged: result.converged,
        termination: if result.converged { "tolerance" } else { "max_iterations" }.to_string(),
        residuals: scale_var.len(),
        ..StageReport::new("init_l1")
    };
    Ok((field, scales, report))
}
