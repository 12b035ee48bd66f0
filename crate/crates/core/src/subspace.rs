//! Feature-subspace projector `M` onto `span{x_i}` and the seminorm `|v|_M = |M v|`.
//!
//! Excess risk of private gradient descent on a GLM scales with the rank of
//! this subspace rather than the ambient dimension: gradients never leave it,
//! and noise outside it does not change any margin.

use ndarray::{s, Array1, Array2, ArrayView1};

use crate::error::{check_len, Error, Result};
use crate::glm::GlmDataset;
use crate::linalg::{householder_qr, jacobi_svd};
use crate::scalar::Scalar;

/// Default relative singular-value cutoff for `f64`.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

/// Default cutoff for a scalar type: [`DEFAULT_REL_TOL`], raised to a few
/// hundred ulps for low-precision scalars.
pub fn default_rel_tol<T: Scalar>() -> T {
    T::of(DEFAULT_REL_TOL).max(T::epsilon() * T::of(256.0))
}

/// Orthonormal basis of the span of the feature rows.
///
/// The basis lives in the stored coordinates of the dataset; structurally-zero
/// padding coordinates are orthogonal to it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSubspace<T> {
    basis: Array2<T>,
    dim: usize,
    rel_tol: T,
    singular_values: Array1<T>,
}

/// Computes the projector onto `span{x_i}` by QR followed by Jacobi SVD of the
/// triangular factor, dropping directions with `sigma_j <= rel_tol * sigma_max`.
pub fn feature_projector<T: Scalar>(data: &GlmDataset<T>, rel_tol: T) -> Result<FeatureSubspace<T>> {
    if !(rel_tol > T::zero() && rel_tol <= T::of(1e-3)) {
        return Err(Error::InvalidParameter(format!(
            "rel_tol must lie in (0, 1e-3], got {rel_tol}"
        )));
    }
    let x = data.features();
    let (n, stored) = x.dim();
    let (sigma, directions) = if n >= stored {
        // row space of X equals row space of R
        let (_, r) = householder_qr(x.to_owned());
        let svd = jacobi_svd(r);
        (svd.sigma, svd.v)
    } else {
        // column space of X^T = Q * column space of R
        let (q, r) = householder_qr(x.t().to_owned());
        let svd = jacobi_svd(r);
        (svd.sigma, q.dot(&svd.u))
    };
    let sigma_max = sigma.iter().fold(T::zero(), |m, &v| m.max(v));
    let mut order: Vec<usize> = (0..sigma.len())
        .filter(|&j| sigma_max > T::zero() && sigma[j] > rel_tol * sigma_max)
        .collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut basis = Array2::zeros((stored, order.len()));
    for (c, &j) in order.iter().enumerate() {
        basis.column_mut(c).assign(&directions.column(j));
    }
    let singular_values = order.iter().map(|&j| sigma[j]).collect();
    Ok(FeatureSubspace {
        basis,
        dim: data.dim(),
        rel_tol,
        singular_values,
    })
}

impl<T: Scalar> FeatureSubspace<T> {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Ambient model dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Basis restricted to the stored coordinates (stored_dim x rank).
    pub fn basis(&self) -> &Array2<T> {
        &self.basis
    }

    pub fn rel_tol(&self) -> T {
        self.rel_tol
    }

    /// Retained singular values of the feature matrix, descending.
    pub fn singular_values(&self) -> &Array1<T> {
        &self.singular_values
    }

    fn head<'a>(&self, v: ArrayView1<'a, T>) -> Result<ArrayView1<'a, T>> {
        check_len("model vector", self.dim, v.len())?;
        Ok(v.slice_move(s![..self.basis.nrows()]))
    }

    /// Coordinates `basis^T v` of the projection.
    pub fn coordinates(&self, v: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let head = self.head(v)?;
        Ok(self.basis.t().dot(&head))
    }

    /// `M v`.
    pub fn project(&self, v: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let coords = self.coordinates(v)?;
        let mut out = Array1::zeros(self.dim);
        out.slice_mut(s![..self.basis.nrows()]).assign(&self.basis.dot(&coords));
        Ok(out)
    }

    /// `|v|_M = |M v|_2`.
    pub fn seminorm(&self, v: ArrayView1<'_, T>) -> Result<T> {
        let coords = self.coordinates(v)?;
        Ok(coords.dot(&coords).sqrt())
    }

    /// `|v - M v|_2`.
    pub fn residual_norm(&self, v: ArrayView1<'_, T>) -> Result<T> {
        let mv = self.project(v)?;
        let d = &v - &mv;
        Ok(d.dot(&d).sqrt())
    }

    /// Dense `dim x dim` projector. Intended for small dimensions.
    pub fn projector_matrix(&self) -> Array2<T> {
        let stored = self.basis.nrows();
        let mut m = Array2::zeros((self.dim, self.dim));
        m.slice_mut(s![..stored, ..stored])
            .assign(&self.basis.dot(&self.basis.t()));
        m
    }

    /// `max |B^T B - I|` entrywise.
    pub fn orthonormality_error(&self) -> T {
        let gram = self.basis.t().dot(&self.basis) - Array2::eye(self.rank());
        gram.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}
