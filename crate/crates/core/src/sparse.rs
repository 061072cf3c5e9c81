//! Sparse containers and the factorizations the model needs.
//!
//! Assembly happens in two small owned formats: [`CsrMatrix`] for general
//! row-oriented operators (the SAR matrix `B`, basis matrices) and
//! [`SymMatrix`] for symmetric matrices stored with both triangles in
//! sorted compressed-column form. Factorizations are delegated to `faer`:
//! a fill-reducing (AMD) sparse Cholesky for SPD systems and a sparse LU for
//! the nonsymmetric SAR operator. All numeric kernels run sequentially so
//! results are bit-reproducible.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::LltRegularization;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, supernodal::SupernodalLltRef, LltRef, SymbolicCholesky,
    SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::linalg::lu::{factorize_symbolic_lu, LuRef, NumericLu, SymbolicLu};
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::{Conj, Mat, MatMut, Par, Side};

use crate::error::{Error, Result};

/// Row-compressed sparse matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from per-row `(column, value)` lists. Entries within a
    /// row are sorted; duplicate columns are summed.
    pub fn from_rows<I>(ncols: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = Vec<(usize, f64)>>,
    {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            let start = col_idx.len();
            for (j, v) in row {
                assert!(j < ncols, "column index {j} out of bounds ({ncols})");
                if col_idx.len() > start && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            nrows: row_ptr.len() - 1,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    /// `Aᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[j] += v * xi;
            }
        }
        out
    }

    /// `Aᵀ X` for a dense `X` with `nrows` rows.
    pub fn tr_mul_mat(&self, x: &Mat<f64>) -> Mat<f64> {
        assert_eq!(x.nrows(), self.nrows);
        let mut out = Mat::<f64>::zeros(self.ncols, x.ncols());
        for c in 0..x.ncols() {
            for i in 0..self.nrows {
                let xi = x[(i, c)];
                if xi == 0.0 {
                    continue;
                }
                let (cols, vals) = self.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    out[(j, c)] += v * xi;
                }
            }
        }
        out
    }

    /// `A X` for a dense `X` with `ncols` rows.
    pub fn mul_mat(&self, x: &Mat<f64>) -> Mat<f64> {
        assert_eq!(x.nrows(), self.ncols);
        Mat::from_fn(self.nrows, x.ncols(), |i, c| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(|(&j, &v)| v * x[(j, c)]).sum()
        })
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let k = next[j];
                col_idx[k] = i;
                values[k] = v;
                next[j] += 1;
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Rows `idx` of this matrix, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> CsrMatrix {
        CsrMatrix::from_rows(
            self.ncols,
            idx.iter().map(|&i| {
                let (c, v) = self.row(i);
                c.iter().copied().zip(v.iter().copied()).collect()
            }),
        )
    }

    /// `s · AᵀA` as a symmetric matrix (Gustavson accumulation over the
    /// transpose).
    pub fn gram(&self, scale: f64) -> SymMatrix {
        let at = self.transpose();
        let n = self.ncols;
        let mut acc = vec![0.0; n];
        let mut mark = vec![usize::MAX; n];
        let mut touched = Vec::new();
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for j in 0..n {
            touched.clear();
            let (rows, avals) = at.row(j);
            for (&i, &aij) in rows.iter().zip(avals) {
                let (cols, vals) = self.row(i);
                for (&k, &aik) in cols.iter().zip(vals) {
                    if mark[k] != j {
                        mark[k] = j;
                        acc[k] = 0.0;
                        touched.push(k);
                    }
                    acc[k] += aij * aik;
                }
            }
            touched.sort_unstable();
            for &k in &touched {
                row_idx.push(k);
                values.push(scale * acc[k]);
            }
            col_ptr.push(row_idx.len());
        }
        SymMatrix {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut out = Mat::<f64>::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// Column-compressed copy for faer.
    pub(crate) fn to_faer(&self) -> SparseColMat<usize, f64> {
        let t = self.transpose();
        let symbolic = SymbolicSparseColMat::new_checked(
            self.nrows,
            self.ncols,
            t.row_ptr,
            None,
            t.col_idx,
        );
        SparseColMat::new(symbolic, t.values)
    }
}

/// Symmetric sparse matrix, both triangles stored, compressed by column
/// with sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row indices and values of column `j`.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.col(j);
        rows.binary_search(&i).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.get(j, j)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for j in 0..self.n {
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                out[i] += v * x[j];
            }
        }
        out
    }

    /// `self + s · other`, merging patterns.
    pub fn add_scaled(&self, other: &SymMatrix, s: f64) -> SymMatrix {
        assert_eq!(self.n, other.n);
        let mut col_ptr = Vec::with_capacity(self.n + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut values = Vec::with_capacity(row_idx.capacity());
        for j in 0..self.n {
            let (ra, va) = self.col(j);
            let (rb, vb) = other.col(j);
            let (mut a, mut b) = (0, 0);
            while a < ra.len() || b < rb.len() {
                let ia = ra.get(a).copied().unwrap_or(usize::MAX);
                let ib = rb.get(b).copied().unwrap_or(usize::MAX);
                if ia < ib {
                    row_idx.push(ia);
                    values.push(va[a]);
                    a += 1;
                } else if ib < ia {
                    row_idx.push(ib);
                    values.push(s * vb[b]);
                    b += 1;
                } else {
                    row_idx.push(ia);
                    values.push(va[a] + s * vb[b]);
                    a += 1;
                    b += 1;
                }
            }
            col_ptr.push(row_idx.len());
        }
        SymMatrix {
            n: self.n,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Adds `d` to every diagonal entry (structural diagonal required).
    pub fn shifted(&self, d: f64) -> SymMatrix {
        let mut out = self.clone();
        for j in 0..self.n {
            let r = out.col_ptr[j]..out.col_ptr[j + 1];
            match out.row_idx[r.clone()].binary_search(&j) {
                Ok(k) => out.values[r.start + k] += d,
                Err(_) => panic!("missing structural diagonal at {j}"),
            }
        }
        out
    }

    pub fn same_pattern(&self, other: &SymMatrix) -> bool {
        self.n == other.n && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut out = Mat::<f64>::zeros(self.n, self.n);
        for j in 0..self.n {
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// Upper triangle (diagonal included) in faer's compressed-column form.
    fn upper_to_faer(&self) -> SparseColMat<usize, f64> {
        let mut col_ptr = Vec::with_capacity(self.n + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::with_capacity(self.nnz() / 2 + self.n);
        let mut values = Vec::with_capacity(row_idx.capacity());
        for j in 0..self.n {
            let (rows, vals) = self.col(j);
            let end = rows.partition_point(|&i| i <= j);
            row_idx.extend_from_slice(&rows[..end]);
            values.extend_from_slice(&vals[..end]);
            col_ptr.push(row_idx.len());
        }
        let symbolic = SymbolicSparseColMat::new_checked(self.n, self.n, col_ptr, None, row_idx);
        SparseColMat::new(symbolic, values)
    }
}

/// Fill-reducing ordering for the Cholesky factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    #[default]
    Amd,
    /// Natural order. Only sensible for small test instances.
    Identity,
}

/// Sparse `LLᵀ` factorization of an SPD [`SymMatrix`].
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    symbolic: Arc<SymbolicCholesky<usize>>,
    pattern: Arc<(Vec<usize>, Vec<usize>)>,
    values: Vec<f64>,
    n: usize,
}

impl SparseCholesky {
    pub fn factor(a: &SymMatrix) -> Result<Self> {
        Self::factor_ordered(a, Ordering::Amd)
    }

    pub fn factor_ordered(a: &SymMatrix, ordering: Ordering) -> Result<Self> {
        let fa = a.upper_to_faer();
        let ord = match ordering {
            Ordering::Amd => SymmetricOrdering::Amd,
            Ordering::Identity => SymmetricOrdering::Identity,
        };
        let symbolic =
            factorize_symbolic_cholesky(fa.symbolic(), Side::Upper, ord, Default::default())
                .map_err(|e| Error::Numerical(format!("symbolic Cholesky failed: {e:?}")))?;
        let symbolic = Arc::new(symbolic);
        let pattern = Arc::new((a.col_ptr.clone(), a.row_idx.clone()));
        Self::numeric(symbolic, pattern, &fa)
    }

    /// Factors `a`, reusing this factor's symbolic analysis when the
    /// sparsity pattern is unchanged.
    pub fn refactor(&self, a: &SymMatrix) -> Result<Self> {
        if a.n == self.n && self.pattern.0 == a.col_ptr && self.pattern.1 == a.row_idx {
            Self::numeric(self.symbolic.clone(), self.pattern.clone(), &a.upper_to_faer())
        } else {
            Self::factor(a)
        }
    }

    fn numeric(
        symbolic: Arc<SymbolicCholesky<usize>>,
        pattern: Arc<(Vec<usize>, Vec<usize>)>,
        fa: &SparseColMat<usize, f64>,
    ) -> Result<Self> {
        let par = Par::Seq;
        let mut values = vec![0.0; symbolic.len_val()];
        let mut buf =
            MemBuffer::new(symbolic.factorize_numeric_llt_scratch::<f64>(par, Default::default()));
        symbolic
            .factorize_numeric_llt(
                &mut values,
                fa.as_ref(),
                Side::Upper,
                LltRegularization::default(),
                par,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| {
                Error::Numerical(format!("matrix is not positive definite: {e:?}"))
            })?;
        Ok(SparseCholesky {
            n: fa.nrows(),
            symbolic,
            pattern,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored values in the factor.
    pub fn factor_nnz(&self) -> usize {
        self.values.len()
    }

    pub fn solve_in_place(&self, rhs: MatMut<'_, f64>) {
        assert_eq!(rhs.nrows(), self.n);
        let par = Par::Seq;
        let mut buf = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(rhs.ncols(), par));
        LltRef::new(&self.symbolic, &self.values).solve_in_place_with_conj(
            Conj::No,
            rhs,
            par,
            MemStack::new(&mut buf),
        );
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.solve_in_place(rhs.as_mut());
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    pub fn solve_mat(&self, b: &Mat<f64>) -> Mat<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut());
        x
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        let half = match self.symbolic.raw() {
            SymbolicCholeskyRaw::Simplicial(s) => {
                let cp = s.col_ptr();
                (0..self.n).map(|k| self.values[cp[k]].ln()).sum::<f64>()
            }
            SymbolicCholeskyRaw::Supernodal(s) => {
                let l = SupernodalLltRef::new(s, &self.values);
                let mut acc = 0.0;
                for k in 0..s.n_supernodes() {
                    let v = l.supernode(k).val();
                    for j in 0..v.ncols() {
                        acc += v[(j, j)].ln();
                    }
                }
                acc
            }
        };
        2.0 * half
    }
}

/// Sparse LU of a general square matrix.
#[derive(Debug)]
pub struct SparseLu {
    symbolic: SymbolicLu<usize>,
    numeric: NumericLu<usize, f64>,
    n: usize,
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Validation(format!(
                "LU needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let fa = a.to_faer();
        let symbolic = factorize_symbolic_lu(fa.symbolic(), Default::default())
            .map_err(|e| Error::Numerical(format!("symbolic LU failed: {e:?}")))?;
        let par = Par::Seq;
        let mut numeric = NumericLu::new();
        let mut buf =
            MemBuffer::new(symbolic.factorize_numeric_lu_scratch::<f64>(par, Default::default()));
        symbolic
            .factorize_numeric_lu(
                &mut numeric,
                fa.as_ref(),
                par,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| Error::Numerical(format!("LU factorization failed: {e:?}")))?;
        Ok(SparseLu {
            symbolic,
            numeric,
            n: a.nrows(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, rhs: MatMut<'_, f64>) {
        assert_eq!(rhs.nrows(), self.n);
        let par = Par::Seq;
        let mut buf = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(rhs.ncols(), par));
        LuRef::new_unchecked(&self.symbolic, &self.numeric).solve_in_place_with_conj(
            Conj::No,
            rhs,
            par,
            MemStack::new(&mut buf),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> CsrMatrix {
        CsrMatrix::from_rows(
            n,
            (0..n).map(|i| {
                let mut r = vec![(i, 3.0 + 0.1 * i as f64)];
                if i > 0 {
                    r.push((i - 1, -1.0));
                }
                if i + 1 < n {
                    r.push((i + 1, -0.5));
                }
                r
            }),
        )
    }

    #[test]
    fn gram_matches_dense_product() {
        let a = tridiag(7);
        let g = a.gram(2.0).to_dense();
        let d = a.to_dense();
        let expect = d.transpose() * &d;
        for i in 0..7 {
            for j in 0..7 {
                assert!((g[(i, j)] - 2.0 * expect[(i, j)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn duplicate_row_entries_are_summed() {
        let a = CsrMatrix::from_rows(3, vec![vec![(2, 1.0), (0, 1.0), (2, 2.0)]]);
        assert_eq!(a.row(0), (&[0usize, 2][..], &[1.0, 3.0][..]));
    }

    #[test]
    fn cholesky_solves_and_log_det() {
        let a = tridiag(40).gram(1.0);
        let chol = SparseCholesky::factor(&a).unwrap();
        let b: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let x = chol.solve(&b);
        let r = a.mul_vec(&x);
        for i in 0..40 {
            assert!((r[i] - b[i]).abs() < 1e-10);
        }
        let dense = a.to_dense();
        let llt = dense.llt(Side::Lower).unwrap();
        let ld: f64 = (0..40).map(|i| 2.0 * llt.L()[(i, i)].ln()).sum();
        assert!((chol.log_det() - ld).abs() < 1e-10);
        let ident = SparseCholesky::factor_ordered(&a, Ordering::Identity).unwrap();
        assert!((ident.log_det() - ld).abs() < 1e-10);
        let re = chol.refactor(&a.shifted(1.0)).unwrap();
        assert!(re.log_det() > ld);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = tridiag(5).gram(1.0).shifted(-100.0);
        assert!(matches!(SparseCholesky::factor(&a), Err(Error::Numerical(_))));
    }

    #[test]
    fn lu_solves_nonsymmetric() {
        let a = tridiag(30);
        let lu = SparseLu::factor(&a).unwrap();
        let b: Vec<f64> = (0..30).map(|i| 1.0 + i as f64).collect();
        let mut x = Mat::from_fn(30, 1, |i, _| b[i]);
        lu.solve_in_place(x.as_mut());
        let xv: Vec<f64> = (0..30).map(|i| x[(i, 0)]).collect();
        let r = a.mul_vec(&xv);
        for i in 0..30 {
            assert!((r[i] - b[i]).abs() < 1e-10);
        }
    }
}
