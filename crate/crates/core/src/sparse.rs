//! Compressed sparse row matrices.

use crate::error::{Error, Result};

/// Entries with magnitude below this are not stored.
pub const DROP_TOLERANCE: f64 = 1e-15;

/// Canonical CSR matrix: column indices strictly increasing within each row,
/// no explicit entries below [`DROP_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from raw CSR arrays, validating every structural invariant.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != n_rows + 1 {
            return Err(Error::Format(format!(
                "row_ptr has length {}, expected {}",
                row_ptr.len(),
                n_rows + 1
            )));
        }
        if row_ptr[0] != 0 || row_ptr[n_rows] != col_idx.len() || col_idx.len() != values.len() {
            return Err(Error::Format("inconsistent CSR array lengths".into()));
        }
        for r in 0..n_rows {
            let (a, b) = (row_ptr[r], row_ptr[r + 1]);
            if b < a || b > col_idx.len() {
                return Err(Error::Format("row_ptr is not nondecreasing".into()));
            }
            let cols = &col_idx[a..b];
            if cols.iter().any(|&c| c >= n_cols) {
                return Err(Error::Format("column index out of range".into()));
            }
            if cols.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Format(
                    "column indices not strictly increasing".into(),
                ));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite stored value".into()));
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Assembles from unordered `(row, col, value)` triplets. Duplicates are
    /// summed in input order, then negligible entries are dropped.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut builder = RowBuilder::new(n_cols);
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::invalid(format!(
                    "triplet ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            rows[r].push((c, v));
        }
        for row in rows {
            for (c, v) in row {
                builder.add(c, v);
            }
            builder.finish_row();
        }
        Ok(builder.build())
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Stored `(column, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[a..b]
            .iter()
            .copied()
            .zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        match self.col_idx[a..b].binary_search(&c) {
            Ok(k) => self.values[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.n_rows];
        self.apply_into(x, &mut y)?;
        Ok(y)
    }

    /// `y = A x`, overwriting `y`.
    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        Error::check_len(self.n_cols, x.len())?;
        Error::check_len(self.n_rows, y.len())?;
        for (r, out) in y.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = 0.0;
            for k in a..b {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
        Ok(())
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.n_cols];
        self.apply_transpose_add(y, &mut x)?;
        Ok(x)
    }

    /// `x += Aᵀ y`.
    pub fn apply_transpose_add(&self, y: &[f64], x: &mut [f64]) -> Result<()> {
        Error::check_len(self.n_rows, y.len())?;
        Error::check_len(self.n_cols, x.len())?;
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            for k in a..b {
                x[self.col_idx[k]] += self.values[k] * yr;
            }
        }
        Ok(())
    }

    /// Fraction of zero entries, `1 - nnz / (rows * cols)`.
    pub fn sparsity(&self) -> f64 {
        let total = self.n_rows as f64 * self.n_cols as f64;
        if total == 0.0 {
            1.0
        } else {
            1.0 - self.nnz() as f64 / total
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(_, v)| v).sum())
            .collect()
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        Error::check_len(self.n_cols, other.n_rows)?;
        let mut builder = RowBuilder::new(other.n_cols);
        for r in 0..self.n_rows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    builder.add(c, a * b);
                }
            }
            builder.finish_row();
        }
        Ok(builder.build())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        out
    }
}

/// Row-by-row CSR assembly with a dense scatter accumulator.
///
/// Contributions to a row may arrive in any column order; they are summed per
/// column in arrival order and emitted sorted when the row is finished.
pub(crate) struct RowBuilder {
    n_cols: usize,
    acc: Vec<f64>,
    touched: Vec<usize>,
    mark: Vec<bool>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl RowBuilder {
    pub(crate) fn new(n_cols: usize) -> Self {
        Self {
            n_cols,
            acc: vec![0.0; n_cols],
            touched: Vec::new(),
            mark: vec![false; n_cols],
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, col: usize, value: f64) {
        if !self.mark[col] {
            self.mark[col] = true;
            self.touched.push(col);
        }
        self.acc[col] += value;
    }

    pub(crate) fn finish_row(&mut self) {
        self.touched.sort_unstable();
        for &c in &self.touched {
            let v = self.acc[c];
            if v.abs() >= DROP_TOLERANCE {
                self.col_idx.push(c);
                self.values.push(v);
            }
            self.acc[c] = 0.0;
            self.mark[c] = false;
        }
        self.touched.clear();
        self.row_ptr.push(self.col_idx.len());
    }

    pub(crate) fn build(self) -> SparseMatrix {
        SparseMatrix {
            n_rows: self.row_ptr.len() - 1,
            n_cols: self.n_cols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            values: self.values,
        }
    }
}
