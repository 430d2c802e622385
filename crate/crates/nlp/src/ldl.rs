//! Sparse LDLᵀ factorization of symmetric (possibly indefinite) matrices
//! without pivoting, with inertia counting.
//!
//! The factorization is stable for symmetric quasi-definite matrices, which
//! is the form the regularized KKT systems take. The symbolic analysis
//! (ordering, elimination tree, column counts) is computed once per pattern
//! and reused for every numeric factorization.

use crate::ordering::{invert, minimum_degree};
use crate::sparse::CscMatrix;

/// Signs of the pivots of the last factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

/// Outcome of [`Ldl::factor_signed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SignedFactor {
    pub inertia: Inertia,
    /// pivots replaced because they were too small
    pub regularized: usize,
    /// pivots whose sign disagreed with the expected sign
    pub wrong_sign: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LdlError {
    #[error("zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("non-finite pivot at column {0}")]
    NonFinite(usize),
}

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct Ldl {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    // permuted upper-triangular pattern
    cp: Vec<usize>,
    ci: Vec<usize>,
    // storage slot in the permuted pattern for each input entry
    src_to_dst: Vec<usize>,
    parent: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    // work arrays
    y: Vec<f64>,
    pattern: Vec<usize>,
    flag: Vec<usize>,
    lnz: Vec<usize>,
    cx: Vec<f64>,
    /// pivots with magnitude at or below this threshold count as zero
    pub pivot_tol: f64,
}

impl Ldl {
    /// Symbolic analysis of a symmetric matrix given by its upper triangle
    /// (entries with `row <= col`).
    pub fn analyze(upper: &CscMatrix) -> Self {
        assert_eq!(upper.nrows, upper.ncols);
        let n = upper.ncols;
        let mut adj = vec![Vec::new(); n];
        for j in 0..n {
            for (i, _) in upper.col(j) {
                assert!(i <= j, "matrix must be upper triangular");
                if i != j {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        let perm = minimum_degree(&adj);
        Self::with_ordering(upper, perm)
    }

    pub fn with_ordering(upper: &CscMatrix, perm: Vec<usize>) -> Self {
        let n = upper.ncols;
        let iperm = invert(&perm);
        let entries = (0..n).flat_map(|j| {
            let iperm = &iperm;
            upper.col(j).map(move |(i, _)| {
                let (a, b) = (iperm[i], iperm[j]);
                (a.min(b), a.max(b))
            })
        });
        let (c, src_to_dst) = CscMatrix::pattern_from_entries(n, n, entries);

        // elimination tree and column counts
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for &i0 in &c.row_idx[c.col_ptr[k]..c.col_ptr[k + 1]] {
                let mut i = i0;
                if i < k {
                    while flag[i] != k {
                        if parent[i] == NONE {
                            parent[i] = k;
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let nnz_l = lp[n];
        let nnz_c = c.nnz();
        Self {
            n,
            perm,
            iperm,
            cp: c.col_ptr,
            ci: c.row_idx,
            src_to_dst,
            parent,
            lp,
            li: vec![0; nnz_l],
            lx: vec![0.0; nnz_l],
            d: vec![0.0; n],
            y: vec![0.0; n],
            pattern: vec![0; n],
            flag,
            lnz,
            cx: vec![0.0; nnz_c],
            pivot_tol: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization. `values` are the entries of the matrix the
    /// symbolic analysis was built from, in its storage order.
    pub fn factor(&mut self, values: &[f64]) -> Result<Inertia, LdlError> {
        self.factor_impl(values, None).map(|r| r.inertia)
    }

    fn factor_impl(
        &mut self,
        values: &[f64],
        signs: Option<(&[i8], f64, f64)>,
    ) -> Result<SignedFactor, LdlError> {
        let n = self.n;
        let mut report = SignedFactor::default();
        assert_eq!(values.len(), self.src_to_dst.len());
        self.cx.iter_mut().for_each(|v| *v = 0.0);
        for (k, &v) in values.iter().enumerate() {
            self.cx[self.src_to_dst[k]] += v;
        }
        for k in 0..n {
            self.y[k] = 0.0;
            let mut top = n;
            self.flag[k] = k;
            self.lnz[k] = 0;
            for p in self.cp[k]..self.cp[k + 1] {
                let mut i = self.ci[p];
                self.y[i] += self.cx[p];
                let mut len = 0;
                while self.flag[i] != k {
                    self.pattern[len] = i;
                    len += 1;
                    self.flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    self.pattern[top] = self.pattern[len];
                }
            }
            let mut dk = self.y[k];
            self.y[k] = 0.0;
            while top < n {
                let i = self.pattern[top];
                top += 1;
                let yi = self.y[i];
                self.y[i] = 0.0;
                let p2 = self.lp[i] + self.lnz[i];
                for p in self.lp[i]..p2 {
                    self.y[self.li[p]] -= self.lx[p] * yi;
                }
                let l_ki = yi / self.d[i];
                dk -= l_ki * yi;
                self.li[p2] = k;
                self.lx[p2] = l_ki;
                self.lnz[i] += 1;
            }
            if !dk.is_finite() {
                return Err(LdlError::NonFinite(k));
            }
            if let Some((expected, eps, delta)) = signs {
                let s = expected[self.perm[k]] as f64;
                if dk.abs() <= eps {
                    dk = s * delta;
                    report.regularized += 1;
                } else if dk * s < 0.0 {
                    report.wrong_sign += 1;
                }
            }
            if dk == 0.0 {
                return Err(LdlError::ZeroPivot(k));
            }
            if dk.abs() <= self.pivot_tol {
                report.inertia.zero += 1;
            } else if dk > 0.0 {
                report.inertia.positive += 1;
            } else {
                report.inertia.negative += 1;
            }
            self.d[k] = dk;
        }
        Ok(report)
    }

    /// Numeric factorization with dynamic regularization for matrices whose
    /// pivot signs are known in advance (quasi-definite KKT systems).
    ///
    /// `expected[i]` is `+1` or `-1` for row `i` in the original ordering.
    /// Pivots with magnitude below `eps` are replaced by `expected * delta`;
    /// pivots of the wrong sign are kept and counted so the caller can
    /// correct the matrix and refactor.
    pub fn factor_signed(
        &mut self,
        values: &[f64],
        expected: &[i8],
        eps: f64,
        delta: f64,
    ) -> Result<SignedFactor, LdlError> {
        self.factor_impl(values, Some((expected, eps, delta)))
    }

    /// Solves `A x = b` in place using the last numeric factorization.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.perm[k]]).collect();
        for j in 0..n {
            let xj = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut acc = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[p] * x[self.li[p]];
            }
            x[j] = acc;
        }
        for k in 0..n {
            b[self.perm[k]] = x[k];
        }
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_permutation(&self) -> &[usize] {
        &self.iperm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn upper_from_dense(a: &[Vec<f64>]) -> CscMatrix {
        let n = a.len();
        let mut t = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if a[i][j] != 0.0 {
                    t.push((i, j, a[i][j]));
                }
            }
        }
        CscMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn solves_quasidefinite_kkt() {
        // [[4, 1, 1], [1, 3, 2], [1, 2, -1]]
        let a = vec![vec![4.0, 1.0, 1.0], vec![1.0, 3.0, 2.0], vec![1.0, 2.0, -1.0]];
        let m = upper_from_dense(&a);
        let mut ldl = Ldl::analyze(&m);
        let inertia = ldl.factor(&m.values).unwrap();
        assert_eq!(inertia, Inertia { positive: 2, negative: 1, zero: 0 });
        let x_true = [1.0, -2.0, 0.5];
        let mut b: Vec<f64> = a.iter().map(|r| r.iter().zip(&x_true).map(|(p, q)| p * q).sum()).collect();
        ldl.solve(&mut b);
        for (u, v) in b.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let m = upper_from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        // with identity ordering the first pivot is exactly zero
        let mut ldl = Ldl::with_ordering(&m, vec![0, 1]);
        assert_eq!(ldl.factor(&m.values), Err(LdlError::ZeroPivot(0)));
    }

    proptest! {
        #[test]
        fn random_quasidefinite_systems(seed in 0u64..500, n1 in 1usize..8, n2 in 0usize..6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = n1 + n2;
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n1 {
                a[i][i] = 2.0 + rng.random::<f64>() * n as f64;
                for j in 0..i {
                    if rng.random::<f64>() < 0.4 {
                        let v = rng.random::<f64>() - 0.5;
                        a[i][j] = v;
                        a[j][i] = v;
                    }
                }
            }
            for i in n1..n {
                a[i][i] = -1.0 - rng.random::<f64>();
                for j in 0..n1 {
                    if rng.random::<f64>() < 0.5 {
                        let v = rng.random::<f64>() * 2.0 - 1.0;
                        a[i][j] = v;
                        a[j][i] = v;
                    }
                }
            }
            let m = upper_from_dense(&a);
            let mut ldl = Ldl::analyze(&m);
            let inertia = ldl.factor(&m.values).unwrap();
            prop_assert_eq!(inertia.positive, n1);
            prop_assert_eq!(inertia.negative, n2);
            let x_true: Vec<f64> = (0..n).map(|i| i as f64 - 1.5).collect();
            let mut b: Vec<f64> = a.iter().map(|r| r.iter().zip(&x_true).map(|(p, q)| p * q).sum()).collect();
            ldl.solve(&mut b);
            for (u, v) in b.iter().zip(&x_true) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
