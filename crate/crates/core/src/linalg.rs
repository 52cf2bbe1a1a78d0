//! Small linear-algebra kernels: grounded path (tridiagonal) and banded solves.
//!
//! Dense fallbacks go through nalgebra.

use nalgebra::DMatrix;

/// Solves `(diag(s) + L) u = rhs` where `L` is the Laplacian of the path
/// with weight `c_t` on edge `(t, t + 1)` plus `c_{T−1}` grounding the last
/// node. Elimination tracks each pivot's excess over its forward edge, so
/// every pivot is a sum of non-negative terms and no cancellation occurs.
pub(crate) fn solve_grounded_path(s: &[f64], c: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = s.len();
    if n == 0 {
        return vec![];
    }
    let mut pivot = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut excess = s[0];
    y[0] = rhs[0];
    pivot[0] = excess + c[0];
    for t in 1..n {
        let keep = c[t - 1] / pivot[t - 1];
        excess = s[t] + keep * excess;
        pivot[t] = excess + c[t];
        y[t] = rhs[t] + keep * y[t - 1];
    }
    let mut u = vec![0.0; n];
    u[n - 1] = y[n - 1] / pivot[n - 1];
    for t in (0..n - 1).rev() {
        u[t] = (y[t] + c[t] * u[t + 1]) / pivot[t];
    }
    u
}

/// Lower and upper bandwidth of a dense matrix (entries exactly zero outside).
pub fn bandwidths(a: &DMatrix<f64>) -> (usize, usize) {
    let (mut kl, mut ku) = (0usize, 0usize);
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if a[(i, j)] != 0.0 {
                if i > j {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
    }
    (kl, ku)
}

/// Outcome of a banded LU factorization.
pub enum BandedSolve {
    Solved(DMatrix<f64>),
    /// A pivot fell below the singularity threshold.
    Singular,
}

/// Square matrix stored by rows over the band `[i − kl, i + kl + ku]`; the
/// extra `kl` superdiagonals hold fill-in from partial pivoting.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn width(kl: usize, ku: usize) -> usize {
        2 * kl + ku + 1
    }

    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            data: vec![0.0; n * Self::width(kl, ku)],
        }
    }

    /// Sums `(row, col, value)` entries; bandwidths come from the entries.
    pub fn from_triplets(n: usize, entries: &[(usize, usize, f64)]) -> Self {
        let (mut kl, mut ku) = (0, 0);
        for &(i, j, _) in entries {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        let mut m = Self::zeros(n, kl, ku);
        for &(i, j, v) in entries {
            *m.at(i, j) += v;
        }
        m
    }

    pub fn from_dense(a: &DMatrix<f64>, kl: usize, ku: usize) -> Self {
        let mut m = Self::zeros(a.nrows(), kl, ku);
        for i in 0..m.n {
            for j in i.saturating_sub(kl)..=(i + ku).min(m.n - 1) {
                *m.at(i, j) = a[(i, j)];
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * Self::width(self.kl, self.ku) + (j + self.kl - i)
    }

    #[inline]
    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.idx(i, j);
        &mut self.data[k]
    }

    /// Entry `(i, j)`; zero outside the stored band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.kl + self.ku {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n, self.ku, self.kl);
        for i in 0..self.n {
            for j in i.saturating_sub(self.kl)..=(i + self.ku).min(self.n - 1) {
                *t.at(j, i) = self.get(i, j);
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |s, v| s.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `A X`.
    pub fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            for i in 0..self.n {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                out[(i, c)] = (lo..=hi).map(|j| self.get(i, j) * x[(j, c)]).sum();
            }
        }
        out
    }

    /// Gaussian elimination with partial pivoting within the band. A pivot at
    /// or below `1e-13 · max|A|` reports singularity.
    pub fn lu_solve(&self, rhs: &DMatrix<f64>) -> BandedSolve {
        self.lu_solve_with_floor(rhs, 1e-13)
    }

    pub fn lu_solve_with_floor(&self, rhs: &DMatrix<f64>, rel_floor: f64) -> BandedSolve {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let mut m = self.clone();
        let mut x = rhs.clone();
        let nrhs = x.ncols();
        let pivot_floor = rel_floor * m.max_abs().max(f64::MIN_POSITIVE);
        let ubw = kl + ku;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ubw).min(n - 1);
            let mut piv = k;
            let mut best = m.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = m.get(i, k).abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best <= pivot_floor {
                return BandedSolve::Singular;
            }
            if piv != k {
                for j in k..=last_col {
                    let (a, b) = (m.idx(k, j), m.idx(piv, j));
                    m.data.swap(a, b);
                }
                x.swap_rows(k, piv);
            }
            let pivot = m.get(k, k);
            for i in k + 1..=last_row {
                let f = m.get(i, k) / pivot;
                if f == 0.0 {
                    continue;
                }
                *m.at(i, k) = 0.0;
                let (rk, ri) = (m.idx(k, k), m.idx(i, k));
                for d in 1..=last_col - k {
                    let v = m.data[rk + d];
                    if v != 0.0 {
                        m.data[ri + d] -= f * v;
                    }
                }
                for c in 0..nrhs {
                    let v = x[(k, c)];
                    x[(i, c)] -= f * v;
                }
            }
        }
        for c in 0..nrhs {
            for k in (0..n).rev() {
                let last_col = (k + ubw).min(n - 1);
                let mut s = x[(k, c)];
                for j in k + 1..=last_col {
                    s -= m.get(k, j) * x[(j, c)];
                }
                x[(k, c)] = s / m.get(k, k);
            }
        }
        BandedSolve::Solved(x)
    }

    /// Tikhonov-regularized least squares `(AᵀA + δI) X = Aᵀ rhs` with
    /// `δ = rel_delta · max|A|²`. As `δ → 0` the result tends to the
    /// minimum-norm least-squares solution.
    pub fn regularized_lstsq(&self, rhs: &DMatrix<f64>, rel_delta: f64) -> Option<DMatrix<f64>> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let bw = kl + ku;
        let scale = self.max_abs();
        let mut gram = Self::zeros(n, bw, bw);
        let mut atb = DMatrix::zeros(n, rhs.ncols());
        for k in 0..n {
            let lo = k.saturating_sub(kl);
            let hi = (k + ku).min(n - 1);
            for i in lo..=hi {
                let aki = self.get(k, i);
                if aki == 0.0 {
                    continue;
                }
                for j in lo..=hi {
                    *gram.at(i, j) += aki * self.get(k, j);
                }
                for c in 0..rhs.ncols() {
                    atb[(i, c)] += aki * rhs[(k, c)];
                }
            }
        }
        let delta = rel_delta * scale * scale;
        for i in 0..n {
            *gram.at(i, i) += delta;
        }
        match gram.lu_solve_with_floor(&atb, 0.0) {
            BandedSolve::Solved(x) => Some(x),
            BandedSolve::Singular => None,
        }
    }
}

/// Minimum-norm least-squares solution through the SVD.
pub fn least_squares_min_norm(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
    let eps = smax * 1e-12 * a.nrows().max(1) as f64;
    svd.solve(rhs, eps)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), rhs.ncols()))
}
