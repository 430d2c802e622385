//! Left-looking sparse LU factorization with threshold partial pivoting,
//! used for square nonsymmetric systems such as power-flow Newton steps.

use crate::ordering::minimum_degree;
use crate::sparse::CscMatrix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LuError {
    #[error("matrix is structurally or numerically singular at column {column}")]
    Singular { column: usize },
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
}

const NONE: usize = usize::MAX;

/// `A Q = L U` with `L` stored in original row indices.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    col_perm: Vec<usize>,
    // pivot row of step k
    pivot_row: Vec<usize>,
    // step at which a row was pivoted
    row_step: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    u_ptr: Vec<usize>,
    u_idx: Vec<usize>,
    u_val: Vec<f64>,
    u_diag: Vec<f64>,
}

impl SparseLu {
    /// Minimum-degree column ordering computed on the pattern of `A + Aᵀ`.
    pub fn ordering(a: &CscMatrix) -> Vec<usize> {
        let n = a.ncols;
        let mut adj = vec![Vec::new(); n];
        for j in 0..n {
            for (i, _) in a.col(j) {
                if i != j {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        minimum_degree(&adj)
    }

    pub fn factor(a: &CscMatrix) -> Result<Self, LuError> {
        let q = Self::ordering(a);
        Self::factor_with_ordering(a, q, 0.1)
    }

    /// Factorizes with a given column ordering. `threshold` in (0, 1]
    /// controls how strongly the diagonal is preferred as pivot.
    pub fn factor_with_ordering(a: &CscMatrix, col_perm: Vec<usize>, threshold: f64) -> Result<Self, LuError> {
        if a.nrows != a.ncols {
            return Err(LuError::NotSquare(a.nrows, a.ncols));
        }
        let n = a.ncols;
        let mut lu = SparseLu {
            n,
            col_perm,
            pivot_row: vec![NONE; n],
            row_step: vec![NONE; n],
            l_ptr: vec![0],
            l_idx: Vec::new(),
            l_val: Vec::new(),
            u_ptr: vec![0],
            u_idx: Vec::new(),
            u_val: Vec::new(),
            u_diag: vec![0.0; n],
        };
        let mut x = vec![0.0; n];
        let mut mark = vec![NONE; n];
        let mut reach: Vec<usize> = Vec::with_capacity(n);
        let mut stack: Vec<(usize, usize)> = Vec::new();

        for k in 0..n {
            let col = lu.col_perm[k];
            // depth-first search for the nonzero pattern of L \ A[:, col]
            reach.clear();
            for (i, _) in a.col(col) {
                if mark[i] == k {
                    continue;
                }
                stack.push((i, 0));
                mark[i] = k;
                while let Some(&(node, pos)) = stack.last() {
                    let step = lu.row_step[node];
                    let mut next = None;
                    if step != NONE {
                        let (s, e) = (lu.l_ptr[step], lu.l_ptr[step + 1]);
                        let mut p = s + pos;
                        while p < e {
                            let child = lu.l_idx[p];
                            p += 1;
                            if mark[child] != k {
                                next = Some((child, p - s));
                                break;
                            }
                        }
                    }
                    match next {
                        Some((child, new_pos)) => {
                            if let Some(top) = stack.last_mut() {
                                top.1 = new_pos;
                            }
                            mark[child] = k;
                            stack.push((child, 0));
                        }
                        None => {
                            stack.pop();
                            reach.push(node);
                        }
                    }
                }
            }
            // reach is in reverse topological order
            for (i, v) in a.col(col) {
                x[i] = v;
            }
            for &j in reach.iter().rev() {
                let step = lu.row_step[j];
                if step == NONE {
                    continue;
                }
                let xj = x[j];
                if xj == 0.0 {
                    continue;
                }
                for p in lu.l_ptr[step]..lu.l_ptr[step + 1] {
                    x[lu.l_idx[p]] -= lu.l_val[p] * xj;
                }
            }
            // choose pivot among not-yet-pivoted rows
            let mut best = NONE;
            let mut best_abs = 0.0;
            let mut diag_abs = -1.0;
            for &i in &reach {
                if lu.row_step[i] == NONE {
                    let v = x[i].abs();
                    if v > best_abs || (v == best_abs && best != NONE && i < best) {
                        best_abs = v;
                        best = i;
                    }
                    if i == col {
                        diag_abs = v;
                    }
                }
            }
            if best == NONE || best_abs == 0.0 || !best_abs.is_finite() {
                return Err(LuError::Singular { column: k });
            }
            let piv = if diag_abs >= threshold * best_abs && diag_abs > 0.0 { col } else { best };
            let pivot = x[piv];
            lu.pivot_row[k] = piv;
            lu.row_step[piv] = k;
            lu.u_diag[k] = pivot;
            for &i in reach.iter().rev() {
                let v = x[i];
                x[i] = 0.0;
                if i == piv || v == 0.0 {
                    continue;
                }
                let step = lu.row_step[i];
                if step != NONE && step < k {
                    lu.u_idx.push(step);
                    lu.u_val.push(v);
                } else {
                    lu.l_idx.push(i);
                    lu.l_val.push(v / pivot);
                }
            }
            lu.l_ptr.push(lu.l_idx.len());
            lu.u_ptr.push(lu.u_idx.len());
        }
        Ok(lu)
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut w = vec![0.0; n];
        for k in 0..n {
            let wk = b[self.pivot_row[k]];
            w[k] = wk;
            if wk != 0.0 {
                for p in self.l_ptr[k]..self.l_ptr[k + 1] {
                    b[self.l_idx[p]] -= self.l_val[p] * wk;
                }
            }
        }
        for k in (0..n).rev() {
            let yk = w[k] / self.u_diag[k];
            w[k] = yk;
            if yk != 0.0 {
                for p in self.u_ptr[k]..self.u_ptr[k + 1] {
                    w[self.u_idx[p]] -= self.u_val[p] * yk;
                }
            }
        }
        for k in 0..n {
            b[self.col_perm[k]] = w[k];
        }
    }

    /// Smallest and largest pivot magnitudes; a cheap conditioning hint.
    pub fn pivot_range(&self) -> (f64, f64) {
        self.u_diag.iter().fold((f64::INFINITY, 0.0), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())))
    }

    /// Column (in original numbering) of the smallest pivot.
    pub fn weakest_column(&self) -> usize {
        let mut best = 0;
        for k in 0..self.n {
            if self.u_diag[k].abs() < self.u_diag[best].abs() {
                best = k;
            }
        }
        self.col_perm.get(best).copied().unwrap_or(0)
    }
}
