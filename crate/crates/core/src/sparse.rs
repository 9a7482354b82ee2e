//! Compressed sparse row matrices over f64.

use ndarray::Array2;

/// Square or rectangular CSR matrix. Column indices within a row are strictly
/// increasing; explicit zeros are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        CsrMatrix {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from COO triplets. Duplicates are summed; entries are sorted.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            debug_assert!(r < n_rows && c < n_cols);
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut indptr = vec![0usize; n_rows + 1];
        for &(r, _, _) in &merged {
            indptr[r + 1] += 1;
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        let (indices, values) = merged.into_iter().map(|(_, c, v)| (c, v)).unzip();
        CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(i) => vals[i],
            Err(_) => 0.0,
        }
    }

    /// Dense product: self [m×n] · rhs [n×k].
    pub fn matmul_dense(&self, rhs: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.n_cols, rhs.nrows(), "spmm shape mismatch");
        let k = rhs.ncols();
        let mut out = Array2::<f64>::zeros((self.n_rows, k));
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let mut acc = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let src = rhs.row(c);
                for j in 0..k {
                    acc[j] += v * src[j];
                }
            }
        }
        out
    }

    /// Transposed product: selfᵀ [n×m] · rhs [m×k], computed by scatter.
    pub fn matmul_dense_transposed(&self, rhs: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.n_rows, rhs.nrows(), "spmm^T shape mismatch");
        let k = rhs.ncols();
        let mut out = Array2::<f64>::zeros((self.n_cols, k));
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let src = rhs.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let mut acc = out.row_mut(c);
                for j in 0..k {
                    acc[j] += v * src[j];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.n_rows, self.n_cols));
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c]] += v;
            }
        }
        out
    }
}
