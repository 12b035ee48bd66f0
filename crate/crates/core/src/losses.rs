//! Concrete loss families: logistic, absolute, a bounded non-convex sigmoid
//! loss, and multiclass softmax cross-entropy.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{check_len, Error, Result};
use crate::glm::{ScalarLoss, SubgradientInterval};
use crate::scalar::Scalar;

/// Numerically stable logistic function `1 / (1 + e^{-u})`.
#[inline]
pub fn sigmoid<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^{u})` without overflow.
#[inline]
pub fn softplus<T: Scalar>(u: T) -> T {
    if u > T::zero() {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn check_pm_one<T: Scalar>(name: &str, y: T) -> Result<()> {
    if y == T::one() || y == -T::one() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} loss expects labels in {{-1, +1}}, got {y}"
        )))
    }
}

/// `log(1 + e^{-y z})` with labels in `{-1, +1}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LogisticLoss;

impl<T: Scalar> ScalarLoss<T> for LogisticLoss {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn value(&self, z: T, y: T) -> T {
        softplus(-y * z)
    }

    fn subgradient(&self, z: T, y: T) -> SubgradientInterval<T> {
        SubgradientInterval::point(-y * sigmoid(-y * z))
    }

    fn lipschitz_scalar(&self) -> T {
        T::one()
    }

    fn smoothness_bound(&self) -> Option<T> {
        Some(T::of(0.25))
    }

    fn is_convex(&self) -> bool {
        true
    }

    fn check_label(&self, y: T) -> Result<()> {
        check_pm_one("logistic", y)
    }

    fn clip_thresholds(&self, y: T, c: T) -> Option<(T, T)> {
        let inf = T::infinity();
        let edge = if c < T::one() {
            (T::one() / c - T::one()).ln()
        } else {
            inf
        };
        if y == T::one() {
            // derivative -sigmoid(-z) ranges over (-1, 0)
            Some((if c < T::one() { edge } else { -inf }, inf))
        } else if y == -T::one() {
            Some((-inf, if c < T::one() { -edge } else { inf }))
        } else {
            None
        }
    }
}

/// `|z - y|` with real-valued responses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AbsoluteLoss;

impl<T: Scalar> ScalarLoss<T> for AbsoluteLoss {
    fn name(&self) -> &'static str {
        "absolute"
    }

    fn value(&self, z: T, y: T) -> T {
        (z - y).abs()
    }

    fn subgradient(&self, z: T, y: T) -> SubgradientInterval<T> {
        if z > y {
            SubgradientInterval::point(T::one())
        } else if z < y {
            SubgradientInterval::point(-T::one())
        } else {
            SubgradientInterval::new(-T::one(), T::one())
        }
    }

    fn lipschitz_scalar(&self) -> T {
        T::one()
    }

    fn smoothness_bound(&self) -> Option<T> {
        None
    }

    fn is_convex(&self) -> bool {
        true
    }

    fn clip_thresholds(&self, y: T, c: T) -> Option<(T, T)> {
        if c >= T::one() {
            Some((-T::infinity(), T::infinity()))
        } else {
            Some((y, y))
        }
    }
}

/// Bounded, smooth, non-convex loss `1 / (1 + e^{y z})`, labels in `{-1, +1}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SigmoidLoss;

/// Maximum of `|d2/dz2 sigmoid(z)|`, attained at `z = ln(2 + sqrt 3)`.
pub const SIGMOID_CURVATURE_MAX: f64 = 0.096_225_044_864_937_6;

impl<T: Scalar> ScalarLoss<T> for SigmoidLoss {
    fn name(&self) -> &'static str {
        "sigmoid_nc"
    }

    fn value(&self, z: T, y: T) -> T {
        sigmoid(-y * z)
    }

    fn subgradient(&self, z: T, y: T) -> SubgradientInterval<T> {
        let u = y * z;
        SubgradientInterval::point(-y * sigmoid(u) * sigmoid(-u))
    }

    fn lipschitz_scalar(&self) -> T {
        T::of(0.25)
    }

    fn smoothness_bound(&self) -> Option<T> {
        Some(T::of(SIGMOID_CURVATURE_MAX))
    }

    fn is_convex(&self) -> bool {
        false
    }

    fn check_label(&self, y: T) -> Result<()> {
        check_pm_one("sigmoid_nc", y)
    }
}

crate::impl_glm_loss_for_scalar!(LogisticLoss, AbsoluteLoss, SigmoidLoss);

/// Loss names accepted in configuration files and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Logistic,
    Absolute,
    SigmoidNc,
    Softmax,
}

impl LossName {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossName::Logistic => "logistic",
            LossName::Absolute => "absolute",
            LossName::SigmoidNc => "sigmoid_nc",
            LossName::Softmax => "softmax",
        }
    }

    /// Scalar GLM loss for this name. Softmax is multiclass and has no scalar form.
    pub fn scalar_loss<T: Scalar>(&self) -> Result<Box<dyn ScalarLoss<T>>> {
        match self {
            LossName::Logistic => Ok(Box::new(LogisticLoss)),
            LossName::Absolute => Ok(Box::new(AbsoluteLoss)),
            LossName::SigmoidNc => Ok(Box::new(SigmoidLoss)),
            LossName::Softmax => Err(Error::UnsupportedLoss(
                "softmax is multiclass and not a scalar GLM loss".into(),
            )),
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(LossName::Logistic),
            "absolute" => Ok(LossName::Absolute),
            "sigmoid_nc" => Ok(LossName::SigmoidNc),
            "softmax" => Ok(LossName::Softmax),
            other => Err(Error::UnsupportedLoss(format!("unknown loss name {other:?}"))),
        }
    }
}

pub fn logistic_loss() -> LogisticLoss {
    LogisticLoss
}

pub fn absolute_loss() -> AbsoluteLoss {
    AbsoluteLoss
}

pub fn sigmoid_nonconvex_loss() -> SigmoidLoss {
    SigmoidLoss
}

/// A single multiclass example; `class` is zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxExample<T> {
    pub x: Array1<T>,
    pub class: usize,
}

impl<T: Scalar> SoftmaxExample<T> {
    pub fn new(x: Array1<T>, class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidParameter(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite softmax features".into()));
        }
        Ok(Self { x, class })
    }
}

/// Class probabilities `E_k / sum E` for the logits `theta^(k) . x`.
pub fn softmax_probabilities<T: Scalar>(logits: ArrayView1<'_, T>) -> Array1<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

fn softmax_logits<T: Scalar>(blocks: ArrayView2<'_, T>, ex: &SoftmaxExample<T>) -> Result<Array1<T>> {
    check_len("softmax block width", blocks.ncols(), ex.x.len())?;
    if ex.class >= blocks.nrows() {
        return Err(Error::InvalidParameter(format!(
            "class {} out of range for {} blocks",
            ex.class,
            blocks.nrows()
        )));
    }
    Ok(blocks.dot(&ex.x))
}

/// Cross-entropy `-log p_y` and its per-class gradient blocks (rows of the result).
pub fn softmax_loss_and_gradient<T: Scalar>(
    blocks: ArrayView2<'_, T>,
    ex: &SoftmaxExample<T>,
) -> Result<(T, Array2<T>)> {
    let logits = softmax_logits(blocks, ex)?;
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let log_total = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    let loss = log_total - logits[ex.class];
    let probs = softmax_probabilities(logits.view());
    let k = blocks.nrows();
    let mut grad = Array2::zeros((k, ex.x.len()));
    for (c, mut row) in grad.rows_mut().into_iter().enumerate() {
        let coef = probs[c] - if c == ex.class { T::one() } else { T::zero() };
        row.assign(&ex.x.mapv(|v| v * coef));
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("softmax loss".into()));
    }
    Ok((loss, grad))
}

/// Norm of the stacked softmax gradient via
/// `|x| sqrt((sum_{k != y} E_k)^2 + sum_{k != y} E_k^2) / sum_k E_k`.
pub fn softmax_gradient_norm_closed_form<T: Scalar>(blocks: ArrayView2<'_, T>, ex: &SoftmaxExample<T>) -> Result<T> {
    let logits = softmax_logits(blocks, ex)?;
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let total = e.sum();
    let others: T = e
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != ex.class)
        .map(|(_, &v)| v)
        .sum();
    let others_sq: T = e
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != ex.class)
        .map(|(_, &v)| v * v)
        .sum();
    let x_norm = ex.x.dot(&ex.x).sqrt();
    Ok(x_norm * (others * others + others_sq).sqrt() / total)
}
