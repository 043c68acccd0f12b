//! Small dense linear algebra: 2x2 systems and a one-sided Jacobi SVD used
//! for least squares and rank tests.

use crate::scalar::{lit, Real};

/// Solve the 2x2 system `m x = b`. Returns `None` when the determinant vanishes.
pub fn solve2<T: Real>(m: [[T; 2]; 2], b: [T; 2]) -> Option<[T; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    Some([
        (b[0] * m[1][1] - m[0][1] * b[1]) / det,
        (m[0][0] * b[1] - m[1][0] * b[0]) / det,
    ])
}

/// Singular values of a 2x2 matrix, largest first.
pub fn singular_values2<T: Real>(m: [[T; 2]; 2]) -> [T; 2] {
    let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let s1 = a * a + b * b + c * c + d * d;
    let det = (a * d - b * c).abs();
    let two = lit::<T>(2.0);
    // s1 = σ₁² + σ₂², det = σ₁σ₂
    let root = (s1 * s1 - two * two * det * det).max(T::zero()).sqrt();
    let big = ((s1 + root) / two).sqrt();
    let small = if big > T::zero() { det / big } else { T::zero() };
    [big, small]
}

/// Thin SVD `A = U diag(s) Vᵀ` of a column-major `rows x cols` matrix with `rows >= cols`.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub rows: usize,
    pub cols: usize,
    /// Column-major `rows x cols`.
    pub u: Vec<T>,
    pub s: Vec<T>,
    /// Column-major `cols x cols`.
    pub v: Vec<T>,
}

/// One-sided Jacobi (Hestenes) SVD. `a` is column-major.
pub fn svd<T: Real>(a: &[T], rows: usize, cols: usize) -> Svd<T> {
    assert_eq!(a.len(), rows * cols);
    assert!(rows >= cols, "svd expects a tall matrix");
    let mut u = a.to_vec();
    let mut v = vec![T::zero(); cols * cols];
    for i in 0..cols {
        v[i * cols + i] = T::one();
    }
    let eps = T::epsilon();
    let two = lit::<T>(2.0);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for k in 0..rows {
                    let up = u[p * rows + k];
                    let uq = u[q * rows + k];
                    alpha = alpha + up * up;
                    beta = beta + uq * uq;
                    gamma = gamma + up * uq;
                }
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let up = u[p * rows + k];
                    let uq = u[q * rows + k];
                    u[p * rows + k] = c * up - s * uq;
                    u[q * rows + k] = s * up + c * uq;
                }
                for k in 0..cols {
                    let vp = v[p * cols + k];
                    let vq = v[q * cols + k];
                    v[p * cols + k] = c * vp - s * vq;
                    v[q * cols + k] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s = vec![T::zero(); cols];
    for j in 0..cols {
        let norm = (0..rows)
            .map(|k| u[j * rows + k] * u[j * rows + k])
            .fold(T::zero(), |acc, x| acc + x)
            .sqrt();
        s[j] = norm;
        if norm > T::zero() {
            for k in 0..rows {
                u[j * rows + k] = u[j * rows + k] / norm;
            }
        }
    }
    Svd { rows, cols, u, s, v }
}

/// Least-squares solution with its numerical rank.
#[derive(Debug, Clone)]
pub struct Lstsq<T> {
    pub x: Vec<T>,
    pub rank: usize,
}

/// Minimum-norm least squares `min |A x - b|` for a column-major `A`.
/// Singular values below `rcond * s_max` are treated as zero.
pub fn lstsq<T: Real>(a: &[T], rows: usize, cols: usize, b: &[T], rcond: T) -> Lstsq<T> {
    assert_eq!(b.len(), rows);
    let dec = svd(a, rows, cols);
    let s_max = dec.s.iter().cloned().fold(T::zero(), T::max);
    let cutoff = rcond * s_max;
    let mut x = vec![T::zero(); cols];
    let mut rank = 0;
    for j in 0..cols {
        let sj = dec.s[j];
        if sj <= cutoff || sj == T::zero() {
            continue;
        }
        rank += 1;
        let mut ub = T::zero();
        for k in 0..rows {
            ub = ub + dec.u[j * rows + k] * b[k];
        }
        let coef = ub / sj;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = *xi + dec.v[j * cols + i] * coef;
        }
    }
    Lstsq { x, rank }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve2_matches_inverse() {
        let m = [[2.0, 1.0], [-1.0, 3.0]];
        let x = solve2(m, [3.0, 2.0]).unwrap();
        assert!((2.0 * x[0] + x[1] - 3.0f64).abs() < 1e-15);
        assert!((-x[0] + 3.0 * x[1] - 2.0f64).abs() < 1e-15);
        assert!(solve2([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0]).is_none());
    }

    #[test]
    fn singular_values_of_diagonal() {
        let s = singular_values2([[3.0, 0.0], [0.0, -0.5]]);
        assert!((s[0] - 3.0f64).abs() < 1e-15);
        assert!((s[1] - 0.5f64).abs() < 1e-15);
        let z = singular_values2([[1.0, 2.0], [2.0, 4.0f64]]);
        assert!(z[1].abs() < 1e-12);
    }

    #[test]
    fn svd_reconstructs() {
        // column-major 4x3
        let a: Vec<f64> = vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0, 3.0, 2.0, 4.0, -2.0, 1.0, 0.25];
        let d = svd(&a, 4, 3);
        for c in 0..3 {
            for r in 0..4 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += d.u[j * 4 + r] * d.s[j] * d.v[j * 3 + c];
                }
                assert!((acc - a[c * 4 + r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lstsq_rank_deficient_is_min_norm() {
        // two identical columns: x1 + x2 = 1 fits b exactly; min-norm has x1 = x2 = 0.5
        let a = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let sol = lstsq(&a, 3, 2, &[1.0, 1.0, 1.0], 1e-12);
        assert_eq!(sol.rank, 1);
        assert!((sol.x[0] - 0.5f64).abs() < 1e-12);
        assert!((sol.x[1] - 0.5f64).abs() < 1e-12);
    }
}
