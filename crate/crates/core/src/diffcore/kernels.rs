//! Dense row-major kernels for single matrices. The graph ops loop these
//! over the batch dimension.

/// Pivot ratio above which a matrix is reported as singular.
pub const MAX_CONDITION: f64 = 1e13;

/// `out += a (r×k) · b (k×c)`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is k×r and `b` is k×c.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, r: usize, c: usize) {
    for p in 0..k {
        let b_row = &b[p * c..(p + 1) * c];
        for i in 0..r {
            let api = a[p * r + i];
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is r×k and `b` is c×k.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * c + j] += acc;
        }
    }
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// LU factorization with partial pivoting, `P A = L U`, packed in place.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    packed: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Returns `None` when a pivot vanishes or the pivot spread exceeds
    /// [`MAX_CONDITION`].
    pub fn factor(a: &[f64], n: usize) -> Option<Lu> {
        let mut m = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut best = col;
            let mut best_abs = m[col * n + col].abs();
            for row in col + 1..n {
                let v = m[row * n + col].abs();
                if v > best_abs {
                    best = row;
                    best_abs = v;
                }
            }
            if !(best_abs > 0.0) || !best_abs.is_finite() {
                return None;
            }
            if best != col {
                for j in 0..n {
                    m.swap(col * n + j, best * n + j);
                }
                perm.swap(col, best);
            }
            let pivot = m[col * n + col];
            for row in col + 1..n {
                let f = m[row * n + col] / pivot;
                m[row * n + col] = f;
                if f != 0.0 {
                    for j in col + 1..n {
                        m[row * n + j] -= f * m[col * n + j];
                    }
                }
            }
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = m[i * n + i].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if n > 0 && hi / lo > MAX_CONDITION {
            return None;
        }
        Some(Lu { n, packed: m, perm })
    }

    /// Solves `A X = B` for `B` of shape n×c.
    pub fn solve(&self, b: &[f64], c: usize) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n * c];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * c..(i + 1) * c].copy_from_slice(&b[p * c..(p + 1) * c]);
        }
        for i in 0..n {
            for k in 0..i {
                let l = self.packed[i * n + k];
                if l != 0.0 {
                    for j in 0..c {
                        x[i * c + j] -= l * x[k * c + j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.packed[i * n + k];
                if u != 0.0 {
                    for j in 0..c {
                        x[i * c + j] -= u * x[k * c + j];
                    }
                }
            }
            let d = self.packed[i * n + i];
            for j in 0..c {
                x[i * c + j] /= d;
            }
        }
        x
    }

    /// Solves `Aᵀ X = B` reusing the factorization of `A`.
    pub fn solve_transposed(&self, b: &[f64], c: usize) -> Vec<f64> {
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ z = b, Lᵀ w = z, then x = Pᵀ w.
        let mut w = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let u = self.packed[k * n + i];
                if u != 0.0 {
                    for j in 0..c {
                        w[i * c + j] -= u * w[k * c + j];
                    }
                }
            }
            let d = self.packed[i * n + i];
            for j in 0..c {
                w[i * c + j] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.packed[k * n + i];
                if l != 0.0 {
                    for j in 0..c {
                        w[i * c + j] -= l * w[k * c + j];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * c];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * c..(p + 1) * c].copy_from_slice(&w[i * c..(i + 1) * c]);
        }
        x
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix. Reads the
/// lower triangle only.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L X = B` with `L` lower triangular n×n and `B` n×c.
pub fn solve_lower(l: &[f64], b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let v = l[i * n + k];
            if v != 0.0 {
                for j in 0..c {
                    x[i * c + j] -= v * x[k * c + j];
                }
            }
        }
        let d = l[i * n + i];
        for j in 0..c {
            x[i * c + j] /= d;
        }
    }
    x
}

/// Solves `Lᵀ X = B` with `L` lower triangular.
pub fn solve_lower_transposed(l: &[f64], b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = l[k * n + i];
            if v != 0.0 {
                for j in 0..c {
                    x[i * c + j] -= v * x[k * c + j];
                }
            }
        }
        let d = l[i * n + i];
        for j in 0..c {
            x[i * c + j] /= d;
        }
    }
    x
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_and_transposed_solves() {
        let a = [4.0, 1.0, 2.0, 0.5, 3.0, 1.0, 2.0, -1.0, 5.0];
        let b = [1.0, 2.0, 3.0];
        let lu = Lu::factor(&a, 3).unwrap();
        let x = lu.solve(&b, 1);
        let mut ax = vec![0.0; 3];
        matmul_acc(&a, &x, &mut ax, 3, 3, 1);
        for i in 0..3 {
            assert!((ax[i] - b[i]).abs() < 1e-12);
        }
        let xt = lu.solve_transposed(&b, 1);
        let at = transpose(&a, 3, 3);
        let mut atx = vec![0.0; 3];
        matmul_acc(&at, &xt, &mut atx, 3, 3, 1);
        for i in 0..3 {
            assert!((atx[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        assert!(Lu::factor(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
        assert!(Lu::factor(&[1.0, 0.0, 0.0, 1e-15], 2).is_none());
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let mut llt = vec![0.0; 4];
        matmul_nt_acc(&l, &l, &mut llt, 2, 2, 2);
        for i in 0..4 {
            assert!((llt[i] - a[i]).abs() < 1e-14);
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }
}
