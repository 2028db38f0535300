use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::problem::{Evaluation, Problem};
use super::sparse::BlockSparseMatrix;
use super::SolverError;

const DIAG_MIN: f64 = 1e-6;
const DIAG_MAX: f64 = 1e32;
const REGULARIZATION: f64 = 1e-10;
const MAX_DAMPING: f64 = 1e32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    pub initial_damping: f64,
    /// Evaluate residuals on the rayon pool.
    pub parallel: bool,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            function_tolerance: 1e-10,
            gradient_tolerance: 1e-12,
            parameter_tolerance: 1e-12,
            initial_damping: 1e-4,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmStatus {
    FunctionTolerance,
    GradientTolerance,
    ParameterTolerance,
    MaxIterations,
    /// Nothing to optimize: no variable blocks or no terms.
    Trivial,
}

impl LmStatus {
    pub fn converged(self) -> bool {
        !matches!(self, LmStatus::MaxIterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSummary {
    pub status: LmStatus,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub gradient_max_norm: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

struct Layout {
    /// variable index -> block id, ordered by (group, id)
    order: Vec<usize>,
    /// block id -> variable index
    var_of: Vec<Option<usize>>,
}

impl Layout {
    fn new(problem: &Problem) -> Self {
        let mut order: Vec<usize> = (0..problem.blocks.len())
            .filter(|&b| !problem.blocks[b].constant)
            .collect();
        order.sort_by_key(|&b| (problem.blocks[b].group, b));
        let mut var_of = vec![None; problem.blocks.len()];
        for (v, &b) in order.iter().enumerate() {
            var_of[b] = Some(v);
        }
        Self { order, var_of }
    }
}

fn evaluate_all(
    problem: &Problem,
    values: &[Vec<f64>],
    parallel: bool,
) -> Vec<Option<Evaluation>> {
    if parallel {
        problem
            .terms
            .par_iter()
            .map(|t| problem.evaluate_term(t, values, true))
            .collect()
    } else {
        problem
            .terms
            .iter()
            .map(|t| problem.evaluate_term(t, values, true))
            .collect()
    }
}

/// Minimizes `1/2 sum rho(|r_k|^2)` over the non-constant blocks of `problem`,
/// writing the solution back into it.
pub fn levenberg_marquardt(problem: &mut Problem, opts: &LmOptions) -> Result<LmSummary, SolverError> {
    let layout = Layout::new(problem);
    let mut values = problem.snapshot();
    let initial_cost = problem
        .cost_at(&values, opts.parallel)
        .ok_or(SolverError::NonFinite("residual at the initial point"))?;
    let mut summary = LmSummary {
        status: LmStatus::Trivial,
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        accepted_steps: 0,
        gradient_max_norm: 0.0,
        cost_history: vec![initial_cost],
    };
    if layout.order.is_empty() || problem.terms.is_empty() {
        return Ok(summary);
    }

    let dims: Vec<usize> = layout
        .order
        .iter()
        .map(|&b| problem.blocks[b].tangent_dim())
        .collect();
    let mut pairs = Vec::new();
    for t in &problem.terms {
        let vars: Vec<usize> = t.blocks.iter().filter_map(|&b| layout.var_of[b]).collect();
        for (k, &a) in vars.iter().enumerate() {
            for &b in &vars[k + 1..] {
                pairs.push((a, b));
            }
        }
    }
    let mut h = BlockSparseMatrix::new(dims.clone(), pairs);
    let mut offsets = Vec::with_capacity(dims.len());
    let mut n = 0;
    for &d in &dims {
        offsets.push(n);
        n += d;
    }

    let mut cost = initial_cost;
    let mut lambda = opts.initial_damping;
    let mut status = LmStatus::MaxIterations;

    'outer: while summary.iterations < opts.max_iterations {
        let evals = evaluate_all(problem, &values, opts.parallel);
        h.clear();
        let mut g = DVector::<f64>::zeros(n);
        for (term, eval) in problem.terms.iter().zip(&evals) {
            let e = eval
                .as_ref()
                .ok_or(SolverError::NonFinite("jacobian at an accepted point"))?;
            let r = DVector::from_column_slice(&e.residual);
            let w = term.kernel.weight(r.norm_squared());
            let vars: Vec<(usize, &DMatrix<f64>)> = term
                .blocks
                .iter()
                .zip(&e.jacobians)
                .filter_map(|(&b, j)| layout.var_of[b].map(|v| (v, j)))
                .collect();
            for &(a, ja) in &vars {
                let jtr = ja.tr_mul(&r) * w;
                let mut seg = g.rows_mut(offsets[a], dims[a]);
                seg += jtr;
                for &(b, jb) in &vars {
                    h.add_block(a, b, &(ja.tr_mul(jb) * w));
                }
            }
        }

        summary.gradient_max_norm = g.amax();
        if summary.gradient_max_norm <= opts.gradient_tolerance {
            status = LmStatus::GradientTolerance;
            break;
        }
        let base = h.values.clone();
        let diag: Vec<f64> = h.diagonal().iter().map(|d| d.clamp(DIAG_MIN, DIAG_MAX)).collect();
        let x_norm: f64 = layout
            .order
            .iter()
            .map(|&b| values[b].iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();

        loop {
            if summary.iterations >= opts.max_iterations {
                break 'outer;
            }
            summary.iterations += 1;
            h.values.copy_from_slice(&base);
            let add: Vec<f64> = diag.iter().map(|d| lambda * d + REGULARIZATION).collect();
            h.add_to_diagonal(&add);
            let step = match h.solve(&(-&g)) {
                Ok(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => {
                    lambda *= 2.0;
                    if lambda > MAX_DAMPING {
                        return Err(SolverError::DampingExceeded);
                    }
                    continue;
                }
            };
            if step.norm() <= opts.parameter_tolerance * (x_norm + opts.parameter_tolerance) {
                status = LmStatus::ParameterTolerance;
                break 'outer;
            }
            let mut candidate = values.clone();
            for (v, &b) in layout.order.iter().enumerate() {
                let d = &step.as_slice()[offsets[v]..offsets[v] + dims[v]];
                let mut block = problem.blocks[b].clone();
                block.values.clone_from(&values[b]);
                candidate[b] = block.plus(d, true);
            }
            match problem.cost_at(&candidate, opts.parallel) {
                Some(new_cost) if new_cost < cost => {
                    let decrease = cost - new_cost;
                    values = candidate;
                    cost = new_cost;
                    summary.accepted_steps += 1;
                    summary.cost_history.push(cost);
                    lambda = (lambda / 3.0).max(1e-16);
                    if decrease <= opts.function_tolerance * cost.max(f64::MIN_POSITIVE) {
                        status = LmStatus::FunctionTolerance;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= 2.0;
                    if lambda > MAX_DAMPING {
                        return Err(SolverError::DampingExceeded);
                    }
                }
            }
        }
    }

    for &b in &layout.order {
        problem.blocks[b].values.clone_from(&values[b]);
    }
    summary.status = status;
    summary.final_cost = cost;
    Ok(summary)
}

/// Central-difference check of the analytic Jacobians of every term.
///
/// Returns, per term, `max |analytic - numeric| / max(1, max |numeric|)`.
/// Constant blocks are checked too.
pub fn check_jacobian(problem: &Problem, step: f64) -> Vec<f64> {
    let values = problem.snapshot();
    problem
        .terms
        .iter()
        .map(|term| {
            let Some(eval) = problem.evaluate_term(term, &values, true) else {
                return f64::INFINITY;
            };
            let mut max_diff = 0.0f64;
            let mut max_num = 0.0f64;
            for (k, &b) in term.blocks.iter().enumerate() {
                let block = &problem.blocks[b];
                for d in 0..block.tangent_dim() {
                    let mut delta = vec![0.0; block.tangent_dim()];
                    delta[d] = step;
                    let mut plus = values.clone();
                    plus[b] = block.plus(&delta, false);
                    delta[d] = -step;
                    let mut minus = values.clone();
                    minus[b] = block.plus(&delta, false);
                    let (Some(rp), Some(rm)) = (
                        problem.evaluate_term(term, &plus, false),
                        problem.evaluate_term(term, &minus, false),
                    ) else {
                        return f64::INFINITY;
                    };
                    for i in 0..rp.residual.len() {
                        let num = (rp.residual[i] - rm.residual[i]) / (2.0 * step);
                        max_num = max_num.max(num.abs());
                        max_diff = max_diff.max((num - eval.jacobians[k][(i, d)]).abs());
                    }
                }
            }
            max_diff / max_num.max(1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{BlockKind, CostFunction, RobustKernel};

    struct Offset(f64);

    impl CostFunction for Offset {
        fn residual_dim(&self) -> usize {
            1
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> bool {
            r[0] = p[0][0] - self.0;
            if let Some(j) = j {
                j[0][(0, 0)] = 1.0;
            }
            true
        }
    }

    #[test]
    fn linear_residual_converges_quickly() {
        let mut p = Problem::new();
        let x = p.add_euclidean(&[0.0]);
        p.add_term(vec![x], Box::new(Offset(3.0)), RobustKernel::none()).unwrap();
        let s = levenberg_marquardt(&mut p, &LmOptions::default()).unwrap();
        assert!((p.values(x)[0] - 3.0).abs() < 1e-10);
        assert!(s.iterations <= 3, "{s:?}");
    }

    #[test]
    fn nonnegative_block_is_clamped() {
        let mut p = Problem::new();
        let x = p.add_block(&[2.0], BlockKind::NonNegative);
        p.add_term(vec![x], Box::new(Offset(-1.0)), RobustKernel::none()).unwrap();
        levenberg_marquardt(&mut p, &LmOptions::default()).unwrap();
        assert!(p.values(x)[0] >= 0.0);
        assert!(p.values(x)[0] < 1e-6);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut p = Problem::new();
        let x = p.add_euclidean(&[f64::NAN]);
        p.add_term(vec![x], Box::new(Offset(0.0)), RobustKernel::none()).unwrap();
        assert!(levenberg_marquardt(&mut p, &LmOptions::default()).is_err());
    }

    #[test]
    fn repeated_block_in_term_rejected() {
        let mut p = Problem::new();
        let x = p.add_euclidean(&[0.0]);
        assert!(p.add_term(vec![x, x], Box::new(Offset(0.0)), RobustKernel::none()).is_err());
    }
}
