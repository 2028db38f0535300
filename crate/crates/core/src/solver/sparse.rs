//! Symmetric block-sparse normal equations backed by a sparse Cholesky factorization.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::{CscCholesky, CscSymbolicCholesky};
use nalgebra_sparse::pattern::SparsityPattern;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use super::SolverError;

/// Fixed sparsity pattern of a symmetric matrix made of dense blocks.
///
/// Variables are addressed by block index; the scalar ordering follows
/// block order, so blocks that should be eliminated first must come first.
pub(crate) struct BlockSparseMatrix {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    n: usize,
    col_offsets: Vec<usize>,
    /// For each (row block, col block) pair: index of the first row of the
    /// row block inside each column of the col block.
    row_start: HashMap<(usize, usize), usize>,
    pattern: SparsityPattern,
    diag: Vec<usize>,
    pub(crate) values: Vec<f64>,
    symbolic: Option<CscSymbolicCholesky>,
}

impl BlockSparseMatrix {
    /// `pairs` lists the coupled block pairs (any orientation); the diagonal is implied.
    pub(crate) fn new(dims: Vec<usize>, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let nb = dims.len();
        let mut offsets = Vec::with_capacity(nb);
        let mut n = 0;
        for &d in &dims {
            offsets.push(n);
            n += d;
        }
        let mut neighbors: Vec<Vec<usize>> = (0..nb).map(|b| vec![b]).collect();
        for (a, b) in pairs {
            if a != b {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        let mut row_start = HashMap::new();
        let mut col_offsets = Vec::with_capacity(n + 1);
        let mut rows = Vec::new();
        for (b, nbrs) in neighbors.iter_mut().enumerate() {
            nbrs.sort_unstable();
            nbrs.dedup();
            let mut within = 0;
            for &a in nbrs.iter() {
                row_start.insert((a, b), within);
                within += dims[a];
            }
            for _ in 0..dims[b] {
                col_offsets.push(rows.len());
                for &a in nbrs.iter() {
                    rows.extend(offsets[a]..offsets[a] + dims[a]);
                }
            }
        }
        col_offsets.push(rows.len());
        let mut diag = Vec::with_capacity(n);
        for b in 0..nb {
            let start = row_start[&(b, b)];
            for j in 0..dims[b] {
                diag.push(col_offsets[offsets[b] + j] + start + j);
            }
        }
        let nnz = rows.len();
        let pattern = SparsityPattern::try_from_offsets_and_indices(n, n, col_offsets.clone(), rows)
            .expect("valid block pattern");
        Self {
            dims,
            offsets,
            n,
            col_offsets,
            row_start,
            pattern,
            diag,
            values: vec![0.0; nnz],
            symbolic: None,
        }
    }

    pub(crate) fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `m` (dims[a] x dims[b]) to block (a, b).
    pub(crate) fn add_block(&mut self, a: usize, b: usize, m: &DMatrix<f64>) {
        let start = self.row_start[&(a, b)];
        for j in 0..self.dims[b] {
            let col = self.col_offsets[self.offsets[b] + j] + start;
            for i in 0..self.dims[a] {
                self.values[col + i] += m[(i, j)];
            }
        }
    }

    pub(crate) fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.values[self.diag[k]]).collect()
    }

    pub(crate) fn add_to_diagonal(&mut self, add: &[f64]) {
        for (k, a) in add.iter().enumerate() {
            self.values[self.diag[k]] += a;
        }
    }

    /// Solves `self * x = rhs` by sparse Cholesky, reusing the symbolic factorization.
    pub(crate) fn solve(&mut self, rhs: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        let symbolic = self
            .symbolic
            .get_or_insert_with(|| CscSymbolicCholesky::factor(self.pattern.clone()))
            .clone();
        let chol = CscCholesky::factor_numerical(symbolic, &self.values)
            .map_err(|_| SolverError::NotPositiveDefinite)?;
        let x = chol.solve(rhs);
        Ok(x.column(0).into_owned())
    }
}

/// Factorization of a sparse SPD matrix assembled from triplets.
pub(crate) struct SparseSpd {
    chol: CscCholesky<f64>,
    n: usize,
}

impl SparseSpd {
    /// Assembles from (row, col, value) triplets; both triangles must be supplied.
    pub(crate) fn factor(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, SolverError> {
        let mut coo = CooMatrix::new(n, n);
        for &(r, c, v) in triplets {
            coo.push(r, c, v);
        }
        for k in 0..n {
            coo.push(k, k, 0.0);
        }
        let csc = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&csc).map_err(|_| SolverError::NotPositiveDefinite)?;
        Ok(Self { chol, n })
    }

    pub(crate) fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(rhs.len(), self.n);
        self.chol.solve(rhs).column(0).into_owned()
    }
}
