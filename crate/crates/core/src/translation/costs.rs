use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::solver::CostFunction;

/// Below this norm a direction residual is switched off.
pub const MIN_DIRECTION_NORM: f64 = 1e-9;

/// Linear combination `C = sum_k A_k x_k` of 3-vector blocks.
#[derive(Debug, Clone)]
pub struct LinearCombination {
    pub coeffs: Vec<Matrix3<f64>>,
}

impl LinearCombination {
    fn eval(&self, params: &[&[f64]]) -> Vector3<f64> {
        self.coeffs
            .iter()
            .zip(params)
            .fold(Vector3::zeros(), |acc, (a, x)| acc + a * Vector3::new(x[0], x[1], x[2]))
    }
}

/// `r = u - C / |C|`: a measured unit direction against a normalized
/// difference of positions.
#[derive(Debug, Clone)]
pub struct DirectionCost {
    pub target: Vector3<f64>,
    pub combination: LinearCombination,
}

impl CostFunction for DirectionCost {
    fn residual_dim(&self) -> usize {
        3
    }

    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool {
        let c = self.combination.eval(params);
        let norm = c.norm();
        if !norm.is_finite() {
            return false;
        }
        if norm < MIN_DIRECTION_NORM {
            residual.fill(0.0);
            if let Some(jac) = jacobians {
                jac.iter_mut().for_each(|j| j.fill(0.0));
            }
            return true;
        }
        let n = c / norm;
        residual.copy_from_slice((self.target - n).as_slice());
        if let Some(jac) = jacobians {
            let p = (Matrix3::identity() - n * n.transpose()) / norm;
            for (j, a) in jac.iter_mut().zip(&self.combination.coeffs) {
                j.copy_from(&(-p * a));
            }
        }
        true
    }
}

/// `r = u - d C` with a nonnegative scalar `d` as the last block.
#[derive(Debug, Clone)]
pub struct ScaledDirectionCost {
    pub target: Vector3<f64>,
    pub combination: LinearCombination,
}

impl CostFunction for ScaledDirectionCost {
    fn residual_dim(&self) -> usize {
        3
    }

    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool {
        let k = self.combination.coeffs.len();
        let c = self.combination.eval(&params[..k]);
        let d = params[k][0];
        residual.copy_from_slice((self.target - c * d).as_slice());
        if let Some(jac) = jacobians {
            for (j, a) in jac.iter_mut().zip(&self.combination.coeffs) {
                j.copy_from(&(-a * d));
            }
            jac[k].copy_from(&(-c));
        }
        residual.iter().all(|r| r.is_finite())
    }
}

/// Collects `(block, A)` pairs, summing coefficients of repeated blocks and
/// dropping those that cancel exactly.
#[derive(Debug, Default)]
pub struct TermBuilder {
    pub blocks: Vec<usize>,
    pub coeffs: Vec<Matrix3<f64>>,
}

impl TermBuilder {
    pub fn add(&mut self, block: usize, a: Matrix3<f64>) -> &mut Self {
        if let Some(k) = self.blocks.iter().position(|&b| b == block) {
            self.coeffs[k] += a;
        } else {
            self.blocks.push(block);
            self.coeffs.push(a);
        }
        self
    }

    pub fn finish(self) -> (Vec<usize>, LinearCombination) {
        let (blocks, coeffs): (Vec<_>, Vec<_>) = self
            .blocks
            .into_iter()
            .zip(self.coeffs)
            .filter(|(_, a)| a.iter().any(|v| *v != 0.0))
            .unzip();
        (blocks, LinearCombination { coeffs })
    }
}
