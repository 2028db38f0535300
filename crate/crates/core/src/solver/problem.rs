use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{RobustKernel, SolverError};
use crate::Rotation;

pub type BlockId = usize;

/// How a parameter block is updated by a tangent-space increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Euclidean,
    /// 3x3 rotation stored column-major in 9 values; 3-dim increment applied as `R <- exp(d) R`.
    Rotation,
    /// Euclidean, projected back onto `x >= 0` after every update.
    NonNegative,
}

#[derive(Debug, Clone)]
pub struct ParameterBlock {
    pub(crate) values: Vec<f64>,
    pub(crate) kind: BlockKind,
    pub(crate) constant: bool,
    pub(crate) group: u32,
}

impl ParameterBlock {
    pub fn tangent_dim(&self) -> usize {
        match self.kind {
            BlockKind::Rotation => 3,
            _ => self.values.len(),
        }
    }

    pub(crate) fn plus(&self, delta: &[f64], project: bool) -> Vec<f64> {
        match self.kind {
            BlockKind::Euclidean => self.values.iter().zip(delta).map(|(x, d)| x + d).collect(),
            BlockKind::NonNegative => self
                .values
                .iter()
                .zip(delta)
                .map(|(x, d)| if project { (x + d).max(0.0) } else { x + d })
                .collect(),
            BlockKind::Rotation => {
                let r = Matrix3::from_column_slice(&self.values);
                let d = Vector3::new(delta[0], delta[1], delta[2]);
                let out = Rotation::exp(&d).matrix() * r;
                out.as_slice().to_vec()
            }
        }
    }
}

/// A residual function of a few parameter blocks.
///
/// `params[k]` holds the values of the k-th referenced block. When
/// `jacobians` is given, `jacobians[k]` is pre-sized to
/// `residual_dim x tangent_dim(k)` and must be filled with the derivative
/// with respect to that block's tangent increment. Returns `false` when the
/// residual cannot be evaluated at this point.
pub trait CostFunction: Send + Sync {
    fn residual_dim(&self) -> usize;

    fn evaluate(
        &self,
        params: &[&[f64]],
        residual: &mut [f64],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> bool;
}

pub struct ResidualTerm {
    pub(crate) blocks: Vec<BlockId>,
    pub(crate) cost: Box<dyn CostFunction>,
    pub(crate) kernel: RobustKernel,
}

/// Robustified nonlinear least squares: `1/2 sum rho(|r_k|^2)`.
#[derive(Default)]
pub struct Problem {
    pub(crate) blocks: Vec<ParameterBlock>,
    pub(crate) terms: Vec<ResidualTerm>,
}

pub(crate) struct Evaluation {
    pub residual: Vec<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, values: &[f64], kind: BlockKind) -> BlockId {
        if kind == BlockKind::Rotation {
            assert_eq!(values.len(), 9, "rotation blocks hold 9 values");
        }
        self.blocks.push(ParameterBlock {
            values: values.to_vec(),
            kind,
            constant: false,
            group: 1,
        });
        self.blocks.len() - 1
    }

    pub fn add_euclidean(&mut self, values: &[f64]) -> BlockId {
        self.add_block(values, BlockKind::Euclidean)
    }

    pub fn add_rotation(&mut self, r: &Rotation) -> BlockId {
        self.add_block(r.matrix().as_slice(), BlockKind::Rotation)
    }

    pub fn set_constant(&mut self, id: BlockId, constant: bool) {
        self.blocks[id].constant = constant;
    }

    pub fn is_constant(&self, id: BlockId) -> bool {
        self.blocks[id].constant
    }

    /// Blocks in lower groups are ordered (and eliminated) first. Default group is 1.
    pub fn set_elimination_group(&mut self, id: BlockId, group: u32) {
        self.blocks[id].group = group;
    }

    pub fn add_term(
        &mut self,
        blocks: Vec<BlockId>,
        cost: Box<dyn CostFunction>,
        kernel: RobustKernel,
    ) -> Result<usize, SolverError> {
        for (k, &b) in blocks.iter().enumerate() {
            if b >= self.blocks.len() {
                return Err(SolverError::InvalidProblem(format!("unknown block {b}")));
            }
            if blocks[..k].contains(&b) {
                return Err(SolverError::InvalidProblem(format!("block {b} referenced twice by one term")));
            }
        }
        self.terms.push(ResidualTerm { blocks, cost, kernel });
        Ok(self.terms.len() - 1)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn values(&self, id: BlockId) -> &[f64] {
        &self.blocks[id].values
    }

    pub fn set_values(&mut self, id: BlockId, values: &[f64]) {
        assert_eq!(values.len(), self.blocks[id].values.len());
        self.blocks[id].values.copy_from_slice(values);
    }

    pub fn rotation(&self, id: BlockId) -> Rotation {
        assert_eq!(self.blocks[id].kind, BlockKind::Rotation);
        Rotation::from_matrix_unchecked(Matrix3::from_column_slice(&self.blocks[id].values))
    }

    pub fn vector3(&self, id: BlockId) -> Vector3<f64> {
        Vector3::from_column_slice(&self.blocks[id].values)
    }

    pub(crate) fn evaluate_term(
        &self,
        term: &ResidualTerm,
        values: &[Vec<f64>],
        with_jacobians: bool,
    ) -> Option<Evaluation> {
        let params: Vec<&[f64]> = term.blocks.iter().map(|&b| values[b].as_slice()).collect();
        let m = term.cost.residual_dim();
        let mut residual = vec![0.0; m];
        let mut jacobians: Vec<DMatrix<f64>> = if with_jacobians {
            term.blocks
                .iter()
                .map(|&b| DMatrix::zeros(m, self.blocks[b].tangent_dim()))
                .collect()
        } else {
            Vec::new()
        };
        let ok = term.cost.evaluate(
            &params,
            &mut residual,
            if with_jacobians { Some(&mut jacobians) } else { None },
        );
        if !ok || residual.iter().any(|r| !r.is_finite()) {
            return None;
        }
        if jacobians.iter().any(|j| j.iter().any(|x| !x.is_finite())) {
            return None;
        }
        Some(Evaluation { residual, jacobians })
    }

    pub(crate) fn snapshot(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.values.clone()).collect()
    }

    /// Robust cost `1/2 sum rho(|r|^2)` at the given values; `None` if any term fails.
    pub(crate) fn cost_at(&self, values: &[Vec<f64>], parallel: bool) -> Option<f64> {
        use rayon::prelude::*;
        let eval = |t: &ResidualTerm| -> Option<f64> {
            let e = self.evaluate_term(t, values, false)?;
            let s: f64 = e.residual.iter().map(|r| r * r).sum();
            Some(0.5 * t.kernel.rho(s))
        };
        let parts: Vec<Option<f64>> = if parallel {
            self.terms.par_iter().map(eval).collect()
        } else {
            self.terms.iter().map(eval).collect()
        };
        // sequential sum keeps the result independent of thread count
        parts.into_iter().try_fold(0.0, |acc, c| c.map(|c| acc + c))
    }

    /// Robust cost at the current values.
    pub fn cost(&self) -> Option<f64> {
        self.cost_at(&self.snapshot(), false)
    }

    /// Unweighted residual vector of one term at the current values.
    pub fn term_residual(&self, term: usize) -> Option<Vec<f64>> {
        let values = self.snapshot();
        self.evaluate_term(&self.terms[term], &values, false)
            .map(|e| e.residual)
    }
}
