//! ADMM for `min sum_k |a_k . z - d_k|` subject to per-variable lower bounds.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::sparse::SparseSpd;
use super::SolverError;

const PROXIMAL: f64 = 1e-10;
const ADAPT_INTERVAL: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmOptions {
    pub rho: f64,
    pub max_iterations: usize,
    pub primal_tolerance: f64,
    pub dual_tolerance: f64,
    /// Residual balancing of `rho`.
    pub adaptive_rho: bool,
    /// Re-solve on the active set of the final iterate and keep it if better.
    pub polish: bool,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iterations: 1000,
            primal_tolerance: 1e-8,
            dual_tolerance: 1e-8,
            adaptive_rho: true,
            polish: true,
        }
    }
}

/// Sparse L1 residual rows over unknowns `z`, some of which carry a lower bound.
#[derive(Debug, Clone, Default)]
pub struct AdmmL1Problem {
    num_vars: usize,
    lower: BTreeMap<usize, f64>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    initial: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmResult {
    pub solution: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub polished: bool,
    /// `(primal, dual)` residual norms per iteration.
    pub residual_history: Vec<(f64, f64)>,
}

impl AdmmL1Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self) -> usize {
        self.num_vars += 1;
        self.num_vars - 1
    }

    /// A scale unknown constrained to `s >= lower`.
    pub fn add_bounded_variable(&mut self, lower: f64) -> usize {
        let v = self.add_variable();
        self.lower.insert(v, lower);
        v
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Adds the residual `|sum coeffs . z - rhs|`; repeated variables are summed.
    pub fn add_row(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        let mut row: BTreeMap<usize, f64> = BTreeMap::new();
        for &(v, c) in coeffs {
            assert!(v < self.num_vars, "unknown variable {v}");
            *row.entry(v).or_insert(0.0) += c;
        }
        self.rows.push(row.into_iter().filter(|&(_, c)| c != 0.0).collect());
        self.rhs.push(rhs);
    }

    /// Starting point; bounded entries below their bound are lifted onto it.
    pub fn set_initial(&mut self, z: Vec<f64>) {
        assert_eq!(z.len(), self.num_vars);
        self.initial = Some(z);
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, d)| (row.iter().map(|&(v, c)| c * z[v]).sum::<f64>() - d).abs())
            .sum()
    }

    pub fn is_feasible(&self, z: &[f64]) -> bool {
        self.lower.iter().all(|(&v, &l)| z[v] >= l)
    }

    fn clamp(&self, z: &mut [f64]) {
        for (&v, &l) in &self.lower {
            z[v] = z[v].max(l);
        }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(v, c)| c * z[v]).sum())
            .collect()
    }

    fn apply_transpose(&self, y: &[f64], bound: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_vars];
        for (row, &yk) in self.rows.iter().zip(y) {
            for &(v, c) in row {
                out[v] += c * yk;
            }
        }
        for ((&v, _), &b) in self.lower.iter().zip(bound) {
            out[v] += b;
        }
        out
    }

    /// Normal matrix of the selected rows and bounds plus `PROXIMAL * I`.
    fn normal_matrix(&self, rows: &[usize], bounds: &[usize]) -> Vec<(usize, usize, f64)> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &k in rows {
            let row = &self.rows[k];
            for &(a, ca) in row {
                for &(b, cb) in row {
                    *acc.entry((a, b)).or_insert(0.0) += ca * cb;
                }
            }
        }
        for &v in bounds {
            *acc.entry((v, v)).or_insert(0.0) += 1.0;
        }
        for v in 0..self.num_vars {
            *acc.entry((v, v)).or_insert(0.0) += PROXIMAL;
        }
        acc.into_iter().map(|((a, b), x)| (a, b, x)).collect()
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Splits `y1 = M z - d` (L1 part) and `y2 = z_B` (bounded part) and runs
/// scaled-form ADMM. The z-update matrix does not depend on `rho` and is
/// factored once. Returns the best feasible iterate seen.
pub fn admm_l1(p: &AdmmL1Problem, opts: &AdmmOptions) -> Result<AdmmResult, SolverError> {
    let n = p.num_vars;
    let m = p.rows.len();
    let mut covered = vec![false; n];
    for row in &p.rows {
        for &(v, _) in row {
            covered[v] = true;
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&v| !covered[v]).collect();
    if !missing.is_empty() {
        return Err(SolverError::UnderConstrained(missing));
    }
    let bounded: Vec<usize> = p.lower.keys().copied().collect();
    let lower: Vec<f64> = p.lower.values().copied().collect();
    let all_rows: Vec<usize> = (0..m).collect();
    let k = SparseSpd::factor(n, &p.normal_matrix(&all_rows, &bounded))?;

    let mut z = p.initial.clone().unwrap_or_else(|| vec![0.0; n]);
    if z.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::NonFinite("ADMM initial point"));
    }
    p.clamp(&mut z);
    let initial_objective = p.objective(&z);
    let mut best = z.clone();
    let mut best_objective = initial_objective;

    let mz = p.apply(&z);
    let mut y1: Vec<f64> = mz.iter().zip(&p.rhs).map(|(a, d)| a - d).collect();
    let mut y2: Vec<f64> = bounded.iter().map(|&v| z[v]).collect();
    let mut u1 = vec![0.0; m];
    let mut u2 = vec![0.0; bounded.len()];
    let mut rho = opts.rho;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let a: Vec<f64> = (0..m).map(|i| p.rhs[i] + y1[i] - u1[i]).collect();
        let b: Vec<f64> = (0..bounded.len()).map(|i| y2[i] - u2[i]).collect();
        let mut rhs = p.apply_transpose(&a, &b);
        for (r, zv) in rhs.iter_mut().zip(&z) {
            *r += PROXIMAL * zv;
        }
        z = k.solve(&DVector::from_vec(rhs)).data.into();
        if z.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::NonFinite("ADMM iterate"));
        }
        let mz = p.apply(&z);
        let mut dy1 = vec![0.0; m];
        let mut primal_sq = 0.0;
        for i in 0..m {
            let e = mz[i] - p.rhs[i];
            let y = soft_threshold(e + u1[i], 1.0 / rho);
            dy1[i] = y - y1[i];
            y1[i] = y;
            u1[i] += e - y;
            primal_sq += (e - y) * (e - y);
        }
        let mut dy2 = vec![0.0; bounded.len()];
        for i in 0..bounded.len() {
            let zb = z[bounded[i]];
            let y = (zb + u2[i]).max(lower[i]);
            dy2[i] = y - y2[i];
            y2[i] = y;
            u2[i] += zb - y;
            primal_sq += (zb - y) * (zb - y);
        }
        let primal = primal_sq.sqrt();
        let dual = rho * norm(p.apply_transpose(&dy1, &dy2).into_iter());
        history.push((primal, dual));

        let mut candidate = z.clone();
        p.clamp(&mut candidate);
        let obj = p.objective(&candidate);
        if obj < best_objective {
            best_objective = obj;
            best = candidate;
        }
        if primal <= opts.primal_tolerance && dual <= opts.dual_tolerance {
            converged = true;
            break;
        }
        if opts.adaptive_rho && iterations % ADAPT_INTERVAL == 0 {
            let scale = if primal > 10.0 * dual {
                0.5
            } else if dual > 10.0 * primal {
                2.0
            } else {
                1.0
            };
            if scale != 1.0 {
                rho /= scale;
                u1.iter_mut().chain(u2.iter_mut()).for_each(|u| *u *= scale);
            }
        }
    }

    let mut polished = false;
    if opts.polish {
        let mut candidates: Vec<(Vec<usize>, Vec<usize>)> = vec![(
            (0..m).filter(|&i| y1[i] == 0.0).collect(),
            (0..bounded.len())
                .filter(|&i| y2[i] == lower[i])
                .map(|i| bounded[i])
                .collect(),
        )];
        let e: Vec<f64> = p.apply(&best).iter().zip(&p.rhs).map(|(a, d)| a - d).collect();
        for tau in [1e-8, 1e-6, 1e-4] {
            candidates.push((
                (0..m).filter(|&i| e[i].abs() <= tau).collect(),
                (0..bounded.len())
                    .filter(|&i| best[bounded[i]] <= lower[i] + tau)
                    .map(|i| bounded[i])
                    .collect(),
            ));
        }
        // the n hyperplanes closest to tight: a vertex guess when the optimum is unique
        let mut slack: Vec<(f64, Option<usize>, Option<usize>)> = (0..m)
            .map(|i| (e[i].abs(), Some(i), None))
            .chain((0..bounded.len()).map(|i| (best[bounded[i]] - lower[i], None, Some(bounded[i]))))
            .collect();
        slack.sort_by(|a, b| a.0.total_cmp(&b.0));
        slack.truncate(n);
        candidates.push((
            slack.iter().filter_map(|s| s.1).collect(),
            slack.iter().filter_map(|s| s.2).collect(),
        ));
        candidates.iter_mut().for_each(|(r, b)| {
            r.sort_unstable();
            b.sort_unstable();
        });
        candidates.dedup();
        let anchor = best.clone();
        for (rows, bounds) in candidates {
            if let Some(zp) = polish(p, &rows, &bounds, &anchor) {
                let obj = p.objective(&zp);
                if obj <= best_objective {
                    best_objective = obj;
                    best = zp;
                    polished = true;
                }
            }
        }
    }

    Ok(AdmmResult {
        solution: best,
        objective: best_objective,
        initial_objective,
        iterations,
        converged,
        polished,
        residual_history: history,
    })
}

/// Least-squares solve with the given rows at zero residual and bounds active,
/// pulled towards `anchor` in the remaining directions.
fn polish(p: &AdmmL1Problem, rows: &[usize], bounds: &[usize], anchor: &[f64]) -> Option<Vec<f64>> {
    let n = p.num_vars;
    let kp = SparseSpd::factor(n, &p.normal_matrix(rows, bounds)).ok()?;
    let mut rhs = vec![0.0; n];
    for &i in rows {
        for &(v, c) in &p.rows[i] {
            rhs[v] += c * p.rhs[i];
        }
    }
    for &v in bounds {
        rhs[v] += p.lower[&v];
    }
    for (r, zv) in rhs.iter_mut().zip(anchor) {
        *r += PROXIMAL * zv;
    }
    let mut z: Vec<f64> = kp.solve(&DVector::from_vec(rhs)).data.into();
    if !z.iter().all(|x| x.is_finite()) {
        return None;
    }
    p.clamp(&mut z);
    Some(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_median() {
        let mut p = AdmmL1Problem::new();
        let x = p.add_variable();
        p.add_row(&[(x, 1.0)], 2.5);
        let r = admm_l1(&p, &AdmmOptions::default()).unwrap();
        assert!((r.solution[0] - 2.5).abs() < 1e-9);

        let mut p = AdmmL1Problem::new();
        let x = p.add_variable();
        for d in [1.0, 2.0, 7.0] {
            p.add_row(&[(x, 1.0)], d);
        }
        let r = admm_l1(&p, &AdmmOptions::default()).unwrap();
        assert!((r.solution[0] - 2.0).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn bound_is_active() {
        // min |s b - c1| with c2 = 0 anchored, b = (1, 0, 0)
        let mut p = AdmmL1Problem::new();
        let c: Vec<usize> = (0..3).map(|_| p.add_variable()).collect();
        let s = p.add_bounded_variable(1.0);
        let b = [1.0, 0.0, 0.0];
        for a in 0..3 {
            p.add_row(&[(s, b[a]), (c[a], -1.0)], 0.0);
        }
        let r = admm_l1(&p, &AdmmOptions::default()).unwrap();
        assert!(r.solution[s] >= 1.0);
        assert!((r.solution[s] - 1.0).abs() < 1e-9, "{r:?}");
        assert!((r.solution[c[0]] - 1.0).abs() < 1e-9);
        assert!(r.solution[c[1]].abs() < 1e-9 && r.solution[c[2]].abs() < 1e-9);
    }

    #[test]
    fn missing_variable_reported() {
        let mut p = AdmmL1Problem::new();
        let x = p.add_variable();
        let _y = p.add_variable();
        p.add_row(&[(x, 1.0)], 0.0);
        assert_eq!(admm_l1(&p, &AdmmOptions::default()), Err(SolverError::UnderConstrained(vec![1])));
    }
}
