//! Least squares via Householder QR with column pivoting.
//!
//! The pivoted factorization is rank-revealing: a pivot `r_kk` counts as zero
//! when `|r_kk| <= RANK_TOL * |r_11|`. Full-rank systems are solved from the
//! factorization; rank-deficient ones get the minimum-norm solution from an SVD.

use nalgebra::{DMatrix, DVector};

pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Upper triangle holds R (in pivoted column order).
    r: DMatrix<f64>,
    /// Householder vectors, one per step, each of length `m - k`.
    reflectors: Vec<(DVector<f64>, f64)>,
    /// `perm[k]` is the original column sitting at position `k`.
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let mut r = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let steps = m.min(n);
        let mut reflectors = Vec::with_capacity(steps);
        let mut norms: Vec<f64> = (0..n).map(|j| r.column(j).norm_squared()).collect();

        for k in 0..steps {
            // Recompute trailing norms exactly; downdating loses accuracy
            // right where rank decisions are made.
            for (j, norm) in norms.iter_mut().enumerate().skip(k) {
                *norm = r.view((k, j), (m - k, 1)).norm_squared();
            }
            let pivot = (k..n).max_by(|&i, &j| norms[i].total_cmp(&norms[j]).then(j.cmp(&i))).unwrap();
            if pivot != k {
                r.swap_columns(k, pivot);
                perm.swap(k, pivot);
                norms.swap(k, pivot);
            }

            let x = r.view((k, k), (m - k, 1)).clone_owned();
            let alpha = x.norm();
            if alpha == 0.0 {
                reflectors.push((DVector::zeros(m - k), 0.0));
                continue;
            }
            let alpha = if x[0] > 0.0 { -alpha } else { alpha };
            let mut v = DVector::from_column_slice(x.as_slice());
            v[0] -= alpha;
            let vtv = v.norm_squared();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            for j in k..n {
                let mut col = r.view_mut((k, j), (m - k, 1));
                let s = beta * v.dot(&col);
                for (c, vi) in col.iter_mut().zip(v.iter()) {
                    *c -= s * vi;
                }
            }
            r[(k, k)] = alpha;
            for i in (k + 1)..m {
                r[(i, k)] = 0.0;
            }
            reflectors.push((v, beta));
        }

        let r11 = if steps > 0 { r[(0, 0)].abs() } else { 0.0 };
        let rank = (0..steps).filter(|&k| r11 > 0.0 && r[(k, k)].abs() > RANK_TOL * r11).count();
        Self { r, reflectors, perm, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.ncols()
    }

    fn apply_qt(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        let m = out.len();
        for (k, (v, beta)) in self.reflectors.iter().enumerate() {
            let mut seg = out.rows_mut(k, m - k);
            let s = beta * v.dot(&seg);
            seg.axpy(-s, v, 1.0);
        }
        out
    }

    /// Least-squares solution; only meaningful when full rank.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.ncols();
        let qtb = self.apply_qt(b);
        let mut z = DVector::zeros(n);
        for i in (0..n).rev() {
            let mut s = qtb[i];
            for j in (i + 1)..n {
                s -= self.r[(i, j)] * z[j];
            }
            z[i] = s / self.r[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (k, &orig) in self.perm.iter().enumerate() {
            x[orig] = z[k];
        }
        x
    }

    /// `(A'A)^{-1}` in original column order; `None` when rank deficient.
    pub fn gram_inverse(&self) -> Option<DMatrix<f64>> {
        if !self.is_full_rank() {
            return None;
        }
        let n = self.ncols();
        // R^{-1} by back substitution, then R^{-1} R^{-T}.
        let mut rinv = DMatrix::<f64>::zeros(n, n);
        for c in 0..n {
            for i in (0..=c).rev() {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for j in (i + 1)..=c {
                    s -= self.r[(i, j)] * rinv[(j, c)];
                }
                rinv[(i, c)] = s / self.r[(i, i)];
            }
        }
        let inner = &rinv * rinv.transpose();
        let mut out = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                out[(self.perm[a], self.perm[b])] = inner[(a, b)];
            }
        }
        Some(out)
    }
}

/// Minimum-norm least-squares solution (pseudo-inverse applied to `b`).
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (RANK_TOL * smax).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub beta: DVector<f64>,
    pub rank: usize,
    qr: PivotedQr,
}

impl LeastSquares {
    pub fn full_rank(&self) -> bool {
        self.qr.is_full_rank()
    }

    /// `(X'WX)^{-1}` when the weighted design has full column rank.
    pub fn bread(&self) -> Option<DMatrix<f64>> {
        self.qr.gram_inverse()
    }
}

/// Solves `min sum_i w_i (y_i - x_i'b)^2`.
pub fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, weights: Option<&DVector<f64>>) -> LeastSquares {
    let (xs, ys) = match weights {
        Some(w) => {
            let sw = w.map(f64::sqrt);
            let mut xs = x.clone();
            for (i, mut row) in xs.row_iter_mut().enumerate() {
                row *= sw[i];
            }
            (xs, y.component_mul(&sw))
        }
        None => (x.clone(), y.clone()),
    };
    let qr = PivotedQr::new(&xs);
    let beta = if qr.is_full_rank() { qr.solve(&ys) } else { min_norm_solve(&xs, &ys) };
    LeastSquares { beta, rank: qr.rank(), qr }
}
