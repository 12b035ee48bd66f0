//! Small dense factorizations: Householder QR and one-sided Jacobi SVD.

use ndarray::{s, Array1, Array2, Axis};

use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// Thin Householder QR of a tall matrix `a` (m x k, m >= k): returns `(Q, R)`
/// with `Q` m x k orthonormal and `R` k x k upper triangular.
pub fn householder_qr<T: Scalar>(mut a: Array2<T>) -> (Array2<T>, Array2<T>) {
    let (m, k) = a.dim();
    assert!(m >= k, "householder_qr expects a tall matrix");
    let mut reflectors: Vec<Array1<T>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = a.slice(s![j.., j]).to_owned();
        let norm = v.dot(&v).sqrt();
        if norm == T::zero() {
            reflectors.push(Array1::zeros(m - j));
            continue;
        }
        let alpha = if v[0] > T::zero() { -norm } else { norm };
        v[0] = v[0] - alpha;
        let vnorm = v.dot(&v).sqrt();
        if vnorm == T::zero() {
            reflectors.push(Array1::zeros(m - j));
            continue;
        }
        v.mapv_inplace(|x| x / vnorm);
        let mut block = a.slice_mut(s![j.., j..]);
        let proj = v.dot(&block);
        for (mut col, &pc) in block.axis_iter_mut(Axis(1)).zip(proj.iter()) {
            col.scaled_add(-(pc + pc), &v);
        }
        reflectors.push(v);
    }
    let r = a.slice(s![..k, ..]).to_owned();
    let mut r = r;
    for i in 0..k {
        for j in 0..i {
            r[[i, j]] = T::zero();
        }
    }
    // accumulate Q = H_0 H_1 ... H_{k-1} applied to the first k unit vectors
    let mut q = Array2::zeros((m, k));
    for i in 0..k {
        q[[i, i]] = T::one();
    }
    for j in (0..k).rev() {
        let v = &reflectors[j];
        let mut block = q.slice_mut(s![j.., ..]);
        let proj = v.dot(&block);
        for (mut col, &pc) in block.axis_iter_mut(Axis(1)).zip(proj.iter()) {
            col.scaled_add(-(pc + pc), v);
        }
    }
    (q, r)
}

/// Singular value decomposition `a = U diag(sigma) V^T` by one-sided Jacobi.
///
/// Columns of `U` with zero singular value are left at zero.
pub struct Svd<T> {
    pub u: Array2<T>,
    pub sigma: Array1<T>,
    pub v: Array2<T>,
}

pub fn jacobi_svd<T: Scalar>(a: Array2<T>) -> Svd<T> {
    let (_, k) = a.dim();
    let mut w = a;
    let mut v = Array2::eye(k);
    let tol = T::epsilon();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (alpha, beta, gamma) = {
                    let cp = w.column(p);
                    let cq = w.column(q);
                    (cp.dot(&cp), cq.dot(&cq), cp.dot(&cq))
                };
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let sn = c * t;
                rotate_columns(&mut w, p, q, c, sn);
                rotate_columns(&mut v, p, q, c, sn);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Array1<T> = w.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut u = w;
    for (mut col, &sv) in u.columns_mut().into_iter().zip(sigma.iter()) {
        if sv > T::zero() {
            col.mapv_inplace(|x| x / sv);
        }
    }
    Svd { u, sigma, v }
}

fn rotate_columns<T: Scalar>(m: &mut Array2<T>, p: usize, q: usize, c: T, s: T) {
    for mut row in m.rows_mut() {
        let xp = row[p];
        let xq = row[q];
        row[p] = c * xp - s * xq;
        row[q] = s * xp + c * xq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn max_abs<T: Scalar>(m: &Array2<T>) -> T {
        m.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    #[test]
    fn qr_reconstructs() {
        let a = array![[2.0, -1.0, 0.5], [1.0, 3.0, -2.0], [0.0, 1.0, 1.0], [4.0, 0.0, 2.0]];
        let (q, r) = householder_qr(a.clone());
        assert!(max_abs(&(q.dot(&r) - &a)) < 1e-13);
        assert!(max_abs(&(q.t().dot(&q) - Array2::<f64>::eye(3))) < 1e-14);
        assert_eq!(r[[2, 0]], 0.0);
    }

    #[test]
    fn svd_reconstructs_rank_deficient() {
        let a = array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
        let svd = jacobi_svd(a.clone());
        let recon = svd.u.dot(&Array2::from_diag(&svd.sigma)).dot(&svd.v.t());
        assert!(max_abs(&(recon - &a)) < 1e-12);
        let mut sv = svd.sigma.to_vec();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[2] < 1e-12 * sv[0]);
        assert!(sv[1] > 0.1);
    }
}
