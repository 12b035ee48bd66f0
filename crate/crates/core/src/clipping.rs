//! Per-example clipping and the huberized surrogate it implicitly optimizes.
//!
//! For a convex GLM loss `f(z)` on an example with feature norm `|x|`, clipping
//! the model-space gradient `f'(z) x` at norm `B` is the same as clipping the
//! scalar derivative at `c = B / |x|`. The surrogate [`ClippedScalarLoss`]
//! equals `f` between the thresholds `y1 <= y2` where `|f'| <= c` and continues
//! linearly with slope `-c` / `+c` outside them, so its gradient field is
//! exactly the clipped one.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::glm::{GlmDataset, GlmLoss, ScalarLoss, SubgradientInterval};
use crate::scalar::Scalar;

/// Largest |z| probed by the threshold bracket before declaring it infinite.
pub const THRESHOLD_SEARCH_LIMIT: f64 = 1e9;
/// Absolute bisection tolerance on the threshold location.
pub const THRESHOLD_TOLERANCE: f64 = 1e-12;

fn check_clip_norm<T: Scalar>(b: T) -> Result<()> {
    if b > T::zero() && !b.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("clip norm must be positive, got {b}")))
    }
}

/// Scales `v` by `min(1, B / |v|)`. `B = inf` leaves `v` unchanged.
pub fn clip_vector<T: Scalar>(v: ArrayView1<'_, T>, b: T) -> Result<Array1<T>> {
    check_clip_norm(b)?;
    let mut out = v.to_owned();
    shrink_into_ball(out.view_mut(), b);
    Ok(out)
}

/// Scales `v` onto the ball of radius `b` when it lies outside. Rounding in
/// `b / |v|` can leave the result an ulp too long, so the scale is nudged down
/// until the norm is at most `b`; this makes clipping idempotent.
pub(crate) fn shrink_into_ball<T: Scalar>(mut v: ndarray::ArrayViewMut1<'_, T>, b: T) {
    let norm = v.dot(&v).sqrt();
    if norm <= b {
        return;
    }
    let orig = v.to_owned();
    let mut scale = b / norm;
    loop {
        v.assign(&orig.mapv(|x| x * scale));
        if v.dot(&v).sqrt() <= b {
            return;
        }
        scale = scale * (T::one() - T::epsilon());
    }
}

/// Clips each class block (row) independently to norm `B`.
pub fn per_class_clip<T: Scalar>(blocks: ArrayView2<'_, T>, b: T) -> Result<Array2<T>> {
    check_clip_norm(b)?;
    let mut out = blocks.to_owned();
    for row in out.rows_mut() {
        shrink_into_ball(row, b);
    }
    Ok(out)
}

/// Scalar derivative clipped at `c` with the kink tie-break applied afterwards.
#[inline]
pub fn clip_scalar_derivative<T: Scalar>(iv: SubgradientInterval<T>, c: T) -> T {
    iv.clamp(c).select()
}

/// Huberized version of a convex scalar loss for one example.
#[derive(Clone, Copy)]
pub struct ClippedScalarLoss<'a, T> {
    base: &'a dyn ScalarLoss<T>,
    y: T,
    feature_norm: T,
    clip_norm: T,
    slope: T,
    y1: T,
    y2: T,
    f_y1: T,
    f_y2: T,
}

impl<T: Scalar> std::fmt::Debug for ClippedScalarLoss<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClippedScalarLoss")
            .field("base", &self.base.name())
            .field("y", &self.y)
            .field("feature_norm", &self.feature_norm)
            .field("clip_norm", &self.clip_norm)
            .field("y1", &self.y1)
            .field("y2", &self.y2)
            .finish()
    }
}

/// How the thresholds of [`huberize`] are located.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMethod {
    /// Closed form when the loss provides one, otherwise bracketed bisection.
    Auto,
    /// Always bracketed bisection on the monotone subgradient.
    Search,
}

/// Builds the huberized loss of `base` for label `y`, feature norm and clip norm `B`.
pub fn huberize<'a, T: Scalar>(
    base: &'a dyn ScalarLoss<T>,
    y: T,
    feature_norm: T,
    clip_norm: T,
) -> Result<ClippedScalarLoss<'a, T>> {
    ClippedScalarLoss::new(base, y, feature_norm, clip_norm, ThresholdMethod::Auto)
}

/// [`huberize`] that ignores closed forms and always searches for the thresholds.
pub fn huberize_by_search<'a, T: Scalar>(
    base: &'a dyn ScalarLoss<T>,
    y: T,
    feature_norm: T,
    clip_norm: T,
) -> Result<ClippedScalarLoss<'a, T>> {
    ClippedScalarLoss::new(base, y, feature_norm, clip_norm, ThresholdMethod::Search)
}

impl<'a, T: Scalar> ClippedScalarLoss<'a, T> {
    pub fn new(
        base: &'a dyn ScalarLoss<T>,
        y: T,
        feature_norm: T,
        clip_norm: T,
        method: ThresholdMethod,
    ) -> Result<Self> {
        if !base.is_convex() {
            return Err(Error::UnsupportedLoss(format!(
                "{} is not convex; huberization needs a monotone subgradient",
                base.name()
            )));
        }
        check_clip_norm(clip_norm)?;
        if !(feature_norm >= T::zero()) || !feature_norm.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "feature norm must be finite and nonnegative, got {feature_norm}"
            )));
        }
        // A zero feature vector has zero gradient, so clipping never binds.
        let slope = if feature_norm == T::zero() {
            T::infinity()
        } else {
            clip_norm / feature_norm
        };
        let inf = T::infinity();
        let (y1, y2) = if slope >= base.lipschitz_scalar() {
            (-inf, inf)
        } else {
            let closed = match method {
                ThresholdMethod::Auto => base.clip_thresholds(y, slope),
                ThresholdMethod::Search => None,
            };
            match closed {
                Some(t) => t,
                None => (lower_threshold(base, y, slope)?, upper_threshold(base, y, slope)?),
            }
        };
        if y1 > y2 {
            return Err(Error::Numeric(format!("thresholds out of order: {y1} > {y2}")));
        }
        let f_y1 = if y1.is_finite() { base.value(y1, y) } else { T::nan() };
        let f_y2 = if y2.is_finite() { base.value(y2, y) } else { T::nan() };
        Ok(Self {
            base,
            y,
            feature_norm,
            clip_norm,
            slope,
            y1,
            y2,
            f_y1,
            f_y2,
        })
    }

    /// `(y1, y2)`; infinite when the corresponding side never clips.
    pub fn thresholds(&self) -> (T, T) {
        (self.y1, self.y2)
    }

    /// Slope bound `B / |x|` of the linear branches.
    pub fn slope(&self) -> T {
        self.slope
    }

    pub fn label(&self) -> T {
        self.y
    }

    pub fn feature_norm(&self) -> T {
        self.feature_norm
    }

    pub fn clip_norm(&self) -> T {
        self.clip_norm
    }

    pub fn eval(&self, z: T) -> T {
        if z < self.y1 {
            self.f_y1 - self.slope * (z - self.y1)
        } else if z > self.y2 {
            self.f_y2 + self.slope * (z - self.y2)
        } else {
            self.base.value(z, self.y)
        }
    }

    pub fn subgradient_at(&self, z: T) -> SubgradientInterval<T> {
        self.base.subgradient(z, self.y).clamp(self.slope)
    }

    pub fn derivative_at(&self, z: T) -> T {
        self.subgradient_at(z).select()
    }

    /// Model-space gradient `g'(<theta, x>) x`.
    pub fn model_gradient(&self, x: ArrayView1<'_, T>, theta: ArrayView1<'_, T>) -> Array1<T> {
        let d = self.derivative_at(x.dot(&theta));
        x.mapv(|v| v * d)
    }
}

/// `y2 = inf{z : lo(df(z)) > c}`.
fn upper_threshold<T: Scalar>(base: &dyn ScalarLoss<T>, y: T, c: T) -> Result<T> {
    let above = |z: T| base.subgradient(z, y).lo > c;
    monotone_crossing(above, T::infinity(), "upper")
}

/// `y1 = sup{z : hi(df(z)) < -c}`.
fn lower_threshold<T: Scalar>(base: &dyn ScalarLoss<T>, y: T, c: T) -> Result<T> {
    // mirror: z -> -z turns the predicate into a monotone false..true one
    let below = |w: T| base.subgradient(-w, y).hi < -c;
    let w = monotone_crossing(below, T::infinity(), "lower")?;
    Ok(-w)
}

/// Locates the switch point of a predicate that is false below and true above.
///
/// Doubles a bracket outward from zero, then bisects. Returns `missing` when the
/// predicate never turns true within the search limit.
fn monotone_crossing<T: Scalar, P: Fn(T) -> bool>(pred: P, missing: T, side: &str) -> Result<T> {
    let limit = T::of(THRESHOLD_SEARCH_LIMIT);
    let (mut lo, mut hi);
    if pred(T::zero()) {
        hi = T::zero();
        let mut step = T::one();
        loop {
            let probe = -step;
            if !pred(probe) {
                lo = probe;
                break;
            }
            hi = probe;
            if step > limit {
                return Err(Error::Numeric(format!(
                    "{side} clipping threshold bracket never closed below -{limit}"
                )));
            }
            step = step + step;
        }
    } else {
        lo = T::zero();
        let mut step = T::one();
        loop {
            if pred(step) {
                hi = step;
                break;
            }
            lo = step;
            if step > limit {
                return Ok(missing);
            }
            step = step + step;
        }
    }
    let tol = T::of(THRESHOLD_TOLERANCE);
    while hi - lo > tol * T::one().max(hi.abs()) {
        let mid = lo + (hi - lo) * T::of(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo + (hi - lo) * T::of(0.5))
}

/// Per-example huberized losses for a whole dataset.
#[derive(Clone)]
pub struct HuberizedObjective<'a, T> {
    losses: Vec<ClippedScalarLoss<'a, T>>,
}

impl<T: Scalar> std::fmt::Debug for HuberizedObjective<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.losses.iter()).finish()
    }
}

impl<'a, T: Scalar> HuberizedObjective<'a, T> {
    pub fn new(base: &'a dyn ScalarLoss<T>, data: &GlmDataset<T>, clip_norm: T) -> Result<Self> {
        Self::with_method(base, data, clip_norm, ThresholdMethod::Auto)
    }

    pub fn with_method(
        base: &'a dyn ScalarLoss<T>,
        data: &GlmDataset<T>,
        clip_norm: T,
        method: ThresholdMethod,
    ) -> Result<Self> {
        let losses = (0..data.n())
            .map(|i| ClippedScalarLoss::new(base, data.response(i), data.row_norm(i), clip_norm, method))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { losses })
    }

    pub fn example(&self, i: usize) -> &ClippedScalarLoss<'a, T> {
        &self.losses[i]
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }
}

impl<T: Scalar> GlmLoss<T> for HuberizedObjective<'_, T> {
    fn example_value(&self, i: usize, z: T, _y: T) -> T {
        self.losses[i].eval(z)
    }

    fn example_derivative(&self, i: usize, z: T, _y: T) -> T {
        self.losses[i].derivative_at(z)
    }

    fn lipschitz_bound(&self) -> Option<T> {
        self.losses.first().map(|l| l.base.lipschitz_scalar())
    }
}

/// Average huberized loss `(1/n) sum_i g_i(<theta, x_i>)` at clip norm `B`.
pub fn clipped_objective<T: Scalar>(
    loss: &dyn ScalarLoss<T>,
    data: &GlmDataset<T>,
    theta: ArrayView1<'_, T>,
    clip_norm: T,
) -> Result<T> {
    let obj = HuberizedObjective::new(loss, data, clip_norm)?;
    crate::glm::objective_value(&obj, data, theta)
}

/// Gradient of [`clipped_objective`].
pub fn clipped_objective_gradient<T: Scalar>(
    loss: &dyn ScalarLoss<T>,
    data: &GlmDataset<T>,
    theta: ArrayView1<'_, T>,
    clip_norm: T,
) -> Result<Array1<T>> {
    let obj = HuberizedObjective::new(loss, data, clip_norm)?;
    crate::glm::full_subgradient(&obj, data, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{AbsoluteLoss, LogisticLoss, SigmoidLoss};
    use ndarray::array;

    #[test]
    fn clip_vector_cases() {
        let v = clip_vector(array![3.0f64, 4.0].view(), 1.0).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_vector(array![0.1, 0.0].view(), 1.0).unwrap(), array![0.1, 0.0]);
        assert_eq!(clip_vector(array![0.0, 0.0].view(), 0.3).unwrap(), array![0.0, 0.0]);
        assert_eq!(
            clip_vector(array![30.0, 40.0].view(), f64::INFINITY).unwrap(),
            array![30.0, 40.0]
        );
        assert!(clip_vector(array![1.0].view(), 0.0).is_err());
        assert!(clip_vector(array![1.0].view(), -1.0).is_err());
    }

    #[test]
    fn per_class_clip_cases() {
        let blocks = array![[0.3f64, 0.4], [1.2, 1.6], [0.0, 0.1]];
        let out = per_class_clip(blocks.view(), 1.0).unwrap();
        assert_eq!(out.row(0), blocks.row(0));
        assert_eq!(out.row(2), blocks.row(2));
        assert!((out[[1, 0]] - 0.6).abs() < 1e-15 && (out[[1, 1]] - 0.8).abs() < 1e-15);
        let within = per_class_clip(blocks.view(), 5.0).unwrap();
        assert_eq!(within, blocks);
    }

    #[test]
    fn huberized_absolute_is_scaled_absolute() {
        let base: &dyn ScalarLoss<f64> = &AbsoluteLoss;
        let g = huberize(base, 0.7, 1.0, 0.5).unwrap();
        assert_eq!(g.thresholds(), (0.7, 0.7));
        for z in [-3.0, 0.0, 0.7, 1.3, 9.0] {
            assert!((g.eval(z) - 0.5 * (z - 0.7f64).abs()).abs() < 1e-15);
        }
        let s = huberize_by_search(base, 0.7, 1.0, 0.5).unwrap();
        let (a, b) = s.thresholds();
        assert!((a - 0.7).abs() < 1e-11 && (b - 0.7).abs() < 1e-11);
    }

    #[test]
    fn inactive_clipping_keeps_base_loss() {
        let base: &dyn ScalarLoss<f64> = &LogisticLoss;
        let g = huberize(base, 1.0, 0.5, 0.5).unwrap();
        assert_eq!(g.thresholds(), (f64::NEG_INFINITY, f64::INFINITY));
        for z in [-50.0, -1.0, 0.0, 3.0] {
            assert_eq!(g.eval(z), base.value(z, 1.0));
        }
        let s = huberize_by_search(base, 1.0, 0.5, 2.0).unwrap();
        assert_eq!(s.thresholds(), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn zero_feature_vector_never_clips() {
        let base: &dyn ScalarLoss<f64> = &LogisticLoss;
        let g = huberize(base, -1.0, 0.0, 0.1).unwrap();
        assert_eq!(g.thresholds(), (f64::NEG_INFINITY, f64::INFINITY));
        assert_eq!(g.eval(0.0), std::f64::consts::LN_2);
    }

    #[test]
    fn logistic_threshold_matches_half_feature_formula() {
        // example (x = 1/2, y = +1): threshold in theta is 2 ln(1/(2B) - 1)
        let base: &dyn ScalarLoss<f64> = &LogisticLoss;
        for b in [0.05, 0.1, 0.2, 0.4] {
            let g = huberize(base, 1.0, 0.5, b).unwrap();
            let (z1, z2) = g.thresholds();
            assert!(z2.is_infinite());
            let theta_edge = 2.0 * z1;
            assert!((theta_edge - 2.0 * (1.0 / (2.0 * b) - 1.0f64).ln()).abs() < 1e-12);
            let s = huberize_by_search(base, 1.0, 0.5, b).unwrap();
            assert!((s.thresholds().0 - z1).abs() < 1e-10);
            // linear branch at theta = edge - 3
            let theta = theta_edge - 3.0;
            let expected = -b * theta + 2.0 * b * (1.0 / (2.0 * b) - 1.0f64).ln() + (1.0 / (1.0 - 2.0 * b)).ln();
            assert!((g.eval(theta / 2.0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn non_convex_base_is_rejected() {
        let base: &dyn ScalarLoss<f64> = &SigmoidLoss;
        let err = huberize(base, 1.0, 1.0, 0.01).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLoss(_)));
    }

    #[test]
    fn clipped_objective_matches_unclipped_above_lipschitz_level() {
        let data = GlmDataset::new(array![[0.3, -0.2], [0.1, 0.9], [-0.6, 0.4]], array![1.0, -1.0, 1.0]).unwrap();
        let theta = array![1.5, -2.0];
        let base: &dyn ScalarLoss<f64> = &LogisticLoss;
        let c = clipped_objective(base, &data, theta.view(), 1.0).unwrap();
        let u = crate::glm::objective_value(base, &data, theta.view()).unwrap();
        assert_eq!(c, u);
    }
}
