//! Datasets, scalar loss families and the GLM objective/subgradient machinery.
//!
//! A GLM loss depends on the model only through the margin `z = <theta, x>`,
//! so every model-space gradient is a scalar derivative times the feature row.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

/// Closed interval `[lo, hi]` of scalar subgradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradientInterval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> SubgradientInterval<T> {
    pub fn new(lo: T, hi: T) -> Self {
        debug_assert!(lo <= hi, "subgradient interval must be ordered");
        Self { lo, hi }
    }

    pub fn point(v: T) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: T) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// Kink tie-break: zero when the interval contains it, otherwise the midpoint.
    pub fn select(&self) -> T {
        if self.contains(T::zero()) {
            T::zero()
        } else if self.lo == self.hi {
            self.lo
        } else {
            (self.lo + self.hi) * T::of(0.5)
        }
    }

    /// Clamps both endpoints into `[-c, c]`.
    pub fn clamp(&self, c: T) -> Self {
        Self {
            lo: self.lo.max(-c).min(c),
            hi: self.hi.max(-c).min(c),
        }
    }
}

/// One-dimensional loss `z -> l(z; y)` composed with the margin of a GLM.
pub trait ScalarLoss<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn value(&self, z: T, y: T) -> T;

    fn subgradient(&self, z: T, y: T) -> SubgradientInterval<T>;

    /// Selected subgradient under the kink tie-break.
    fn derivative(&self, z: T, y: T) -> T {
        self.subgradient(z, y).select()
    }

    /// Bound on `|dl/dz|` over all margins and admissible labels.
    fn lipschitz_scalar(&self) -> T;

    /// Bound on `|d2l/dz2|` for smooth losses.
    fn smoothness_bound(&self) -> Option<T>;

    fn is_convex(&self) -> bool;

    /// Rejects labels outside the loss's encoding.
    fn check_label(&self, _y: T) -> Result<()> {
        Ok(())
    }

    /// Closed-form clipping thresholds `(y1, y2)` for slope bound `c`, when known.
    ///
    /// `y1 = sup{z : every subgradient < -c}` and `y2 = inf{z : every subgradient > c}`,
    /// with infinities when the sets are empty.
    fn clip_thresholds(&self, _y: T, _c: T) -> Option<(T, T)> {
        None
    }
}

/// Loss attached to each example of a dataset, indexed by example.
///
/// Every [`ScalarLoss`] is a `GlmLoss` that ignores the index; per-example
/// surrogates such as the huberized objective carry their own state.
pub trait GlmLoss<T: Scalar>: Sync {
    fn example_value(&self, i: usize, z: T, y: T) -> T;
    fn example_derivative(&self, i: usize, z: T, y: T) -> T;

    /// Uniform bound on `|example_derivative|`, when one is known.
    fn lipschitz_bound(&self) -> Option<T> {
        None
    }
}

/// Implements [`GlmLoss`] for scalar loss types by ignoring the example index.
#[macro_export]
macro_rules! impl_glm_loss_for_scalar {
    ($($ty:ty),* $(,)?) => {$(
        impl<T: $crate::Scalar> $crate::GlmLoss<T> for $ty {
            #[inline]
            fn example_value(&self, _i: usize, z: T, y: T) -> T {
                $crate::ScalarLoss::<T>::value(self, z, y)
            }

            #[inline]
            fn example_derivative(&self, _i: usize, z: T, y: T) -> T {
                $crate::ScalarLoss::<T>::derivative(self, z, y)
            }

            fn lipschitz_bound(&self) -> Option<T> {
                Some($crate::ScalarLoss::<T>::lipschitz_scalar(self))
            }
        }
    )*};
}

impl<T: Scalar> GlmLoss<T> for dyn ScalarLoss<T> + '_ {
    #[inline]
    fn example_value(&self, _i: usize, z: T, y: T) -> T {
        self.value(z, y)
    }

    #[inline]
    fn example_derivative(&self, _i: usize, z: T, y: T) -> T {
        self.derivative(z, y)
    }

    fn lipschitz_bound(&self) -> Option<T> {
        Some(self.lipschitz_scalar())
    }
}

/// Dense feature matrix with responses.
///
/// The model dimension `dim` may exceed the number of stored columns; the
/// extra coordinates are structurally zero, which is how zero padding is
/// represented without materializing the padded matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmDataset<T> {
    features: Array2<T>,
    responses: Array1<T>,
    dim: usize,
    feature_norm_cap: Option<T>,
    row_norms: Array1<T>,
}

impl<T: Scalar> GlmDataset<T> {
    pub fn new(features: Array2<T>, responses: Array1<T>) -> Result<Self> {
        let (n, p) = features.dim();
        if n == 0 || p == 0 {
            return Err(Error::InvalidDataset(format!(
                "need at least one row and one column, got {n}x{p}"
            )));
        }
        check_len("responses", n, responses.len())?;
        if let Some(((i, j), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite feature at row {i}, column {j}"
            )));
        }
        if let Some(i) = responses.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!("non-finite response at row {i}")));
        }
        let row_norms = features.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        Ok(Self {
            features,
            responses,
            dim: p,
            feature_norm_cap: None,
            row_norms,
        })
    }

    /// Declares an upper bound on every row norm; rejects rows that exceed it.
    pub fn with_feature_norm_cap(mut self, cap: T) -> Result<Self> {
        if !(cap >= T::zero()) || !cap.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "feature norm cap must be finite and nonnegative, got {cap}"
            )));
        }
        let slack = T::of(1e-9);
        if let Some(i) = self.row_norms.iter().position(|&r| r > cap + slack) {
            return Err(Error::InvalidDataset(format!(
                "row {i} has norm {} above declared cap {cap}",
                self.row_norms[i]
            )));
        }
        self.feature_norm_cap = Some(cap);
        Ok(self)
    }

    /// Extends the model dimension with structurally-zero trailing coordinates.
    pub fn with_dim(mut self, dim: usize) -> Result<Self> {
        if dim < self.dim {
            return Err(Error::InvalidParameter(format!(
                "target dimension {dim} below current dimension {}",
                self.dim
            )));
        }
        self.dim = dim;
        Ok(self)
    }

    /// Checks every response against the loss's label encoding.
    pub fn check_labels<L: ScalarLoss<T> + ?Sized>(&self, loss: &L) -> Result<()> {
        for (i, &y) in self.responses.iter().enumerate() {
            loss.check_label(y)
                .map_err(|e| Error::InvalidDataset(format!("row {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    /// Model dimension `p`, including structurally-zero coordinates.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of explicitly stored feature columns.
    pub fn stored_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn responses(&self) -> &Array1<T> {
        &self.responses
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.features.row(i)
    }

    /// Row `i` as a full-dimension vector.
    pub fn dense_row(&self, i: usize) -> Array1<T> {
        let mut x = Array1::zeros(self.dim);
        x.slice_mut(s![..self.stored_dim()]).assign(&self.row(i));
        x
    }

    pub fn response(&self, i: usize) -> T {
        self.responses[i]
    }

    pub fn row_norm(&self, i: usize) -> T {
        self.row_norms[i]
    }

    pub fn row_norms(&self) -> &Array1<T> {
        &self.row_norms
    }

    pub fn max_row_norm(&self) -> T {
        self.row_norms.iter().fold(T::zero(), |m, &r| m.max(r))
    }

    pub fn feature_norm_cap(&self) -> Option<T> {
        self.feature_norm_cap
    }

    /// Margin `<theta, x_i>`.
    #[inline]
    pub fn margin(&self, i: usize, theta: ArrayView1<'_, T>) -> T {
        self.row(i).dot(&theta.slice(s![..self.stored_dim()]))
    }

    /// All margins `X theta`.
    pub fn margins(&self, theta: ArrayView1<'_, T>) -> Result<Array1<T>> {
        check_len("model vector", self.dim, theta.len())?;
        Ok(self.features.dot(&theta.slice(s![..self.stored_dim()])))
    }

    /// Rows selected by index, keeping the model dimension and cap.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut out = Self::new(self.features.select(Axis(0), idx), self.responses.select(Axis(0), idx))?;
        out.dim = self.dim;
        out.feature_norm_cap = self.feature_norm_cap;
        Ok(out)
    }

    /// Accumulates `sum_i coef_i * x_i` into the stored coordinates of `out`.
    pub(crate) fn accumulate_rows(&self, coefs: &[(usize, T)], out: &mut Array1<T>) {
        let mut head = out.slice_mut(s![..self.stored_dim()]);
        for &(i, c) in coefs {
            if c != T::zero() {
                head.scaled_add(c, &self.row(i));
            }
        }
    }
}

fn check_finite_vec<T: Scalar>(what: &str, v: ArrayView1<'_, T>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(j) => Err(Error::Numeric(format!("{what} coordinate {j} is not finite"))),
        None => Ok(()),
    }
}

/// Empirical risk `(1/n) sum_i l(<theta, x_i>; y_i)`.
pub fn objective_value<T, L>(loss: &L, data: &GlmDataset<T>, theta: ArrayView1<'_, T>) -> Result<T>
where
    T: Scalar,
    L: GlmLoss<T> + ?Sized,
{
    check_len("model vector", data.dim(), theta.len())?;
    check_finite_vec("theta", theta)?;
    let mut total = T::zero();
    for i in 0..data.n() {
        total = total + loss.example_value(i, data.margin(i, theta), data.response(i));
    }
    let value = total / T::of(data.n() as f64);
    if !value.is_finite() {
        return Err(Error::Numeric("objective value".into()));
    }
    Ok(value)
}

/// Averaged selected subgradient `(1/n) sum_i l'(<theta, x_i>; y_i) x_i`.
pub fn full_subgradient<T, L>(loss: &L, data: &GlmDataset<T>, theta: ArrayView1<'_, T>) -> Result<Array1<T>>
where
    T: Scalar,
    L: GlmLoss<T> + ?Sized,
{
    check_len("model vector", data.dim(), theta.len())?;
    check_finite_vec("theta", theta)?;
    let inv_n = T::one() / T::of(data.n() as f64);
    let coefs: Vec<(usize, T)> = (0..data.n())
        .map(|i| {
            let d = loss.example_derivative(i, data.margin(i, theta), data.response(i));
            (i, d * inv_n)
        })
        .collect();
    let mut g = Array1::zeros(data.dim());
    data.accumulate_rows(&coefs, &mut g);
    check_finite_vec("subgradient", g.view())?;
    Ok(g)
}

/// Subgradient of a single example's loss with respect to the model.
pub fn per_example_gradient<T, L>(loss: &L, x: ArrayView1<'_, T>, y: T, theta: ArrayView1<'_, T>) -> Result<Array1<T>>
where
    T: Scalar,
    L: ScalarLoss<T> + ?Sized,
{
    check_len("model vector", x.len(), theta.len())?;
    let z = x.dot(&theta);
    if !z.is_finite() {
        return Err(Error::Numeric("margin".into()));
    }
    Ok(x.mapv(|v| v * loss.derivative(z, y)))
}
