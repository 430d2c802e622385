//! Compressed sparse column storage and triplet assembly.

/// Column-compressed sparse matrix. Row indices inside a column are sorted
/// and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let (pattern, slots) = Self::pattern_from_entries(
            nrows,
            ncols,
            triplets.iter().map(|&(r, c, _)| (r, c)),
        );
        let mut m = pattern;
        for (k, &(_, _, v)) in triplets.iter().enumerate() {
            m.values[slots[k]] += v;
        }
        m
    }

    /// Builds the sparsity pattern (zero values) for a list of entries and
    /// returns, for each input entry, the index of its storage slot.
    pub fn pattern_from_entries<I>(nrows: usize, ncols: usize, entries: I) -> (Self, Vec<usize>)
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let entries: Vec<(usize, usize)> = entries.into_iter().collect();
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by_key(|&k| (entries[k].1, entries[k].0));
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut slots = vec![0usize; entries.len()];
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c) = entries[k];
            assert!(r < nrows && c < ncols, "entry ({r}, {c}) out of bounds");
            if last != Some((r, c)) {
                row_idx.push(r);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
            slots[k] = row_idx.len() - 1;
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        let nnz = row_idx.len();
        (
            Self {
                nrows,
                ncols,
                col_ptr,
                row_idx,
                values: vec![0.0; nnz],
            },
            slots,
        )
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// `y += A x`
    pub fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for (i, v) in self.col(j) {
                y[i] += v * xj;
            }
        }
    }

    /// `y += A^T x`
    pub fn mul_t_add(&self, x: &[f64], y: &mut [f64]) {
        for j in 0..self.ncols {
            let mut acc = 0.0;
            for (i, v) in self.col(j) {
                acc += v * x[i];
            }
            y[j] += acc;
        }
    }

    /// `y += A x` where `self` stores only the upper triangle of a
    /// symmetric matrix.
    pub fn sym_upper_mul_add(&self, x: &[f64], y: &mut [f64]) {
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                d[i][j] += v;
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = CscMatrix::from_triplets(3, 2, &[(2, 0, 1.0), (0, 0, 2.0), (2, 0, 3.0), (1, 1, -1.0)]);
        assert_eq!(m.col_ptr, vec![0, 2, 3]);
        assert_eq!(m.row_idx, vec![0, 2, 1]);
        assert_eq!(m.values, vec![2.0, 4.0, -1.0]);
    }

    #[test]
    fn products_match_dense() {
        let m = CscMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (1, 2, 2.0), (0, 1, -3.0)]);
        let mut y = vec![0.0; 2];
        m.mul_add(&[1.0, 2.0, 3.0], &mut y);
        assert_eq!(y, vec![-5.0, 6.0]);
        let mut z = vec![0.0; 3];
        m.mul_t_add(&[1.0, 1.0], &mut z);
        assert_eq!(z, vec![1.0, -3.0, 2.0]);
    }
}
