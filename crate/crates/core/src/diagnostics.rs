//! Adversarial and analytic constructions.
//!
//! * A fingerprinting-style hard instance for private ERM with the absolute loss.
//! * A one-dimensional logistic dataset on which aggressive clipping moves the
//!   optimum far from the unclipped one, with closed forms for the clipped loss.
//! * A checker that measures how far a clipped softmax gradient field is from
//!   being conservative, via the asymmetry of its Jacobian.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::clipping::{clip_vector, per_class_clip};
use crate::error::{Error, Result};
use crate::glm::GlmDataset;
use crate::losses::{softmax_loss_and_gradient, softmax_probabilities, softplus, SoftmaxExample};
use crate::scalar::Scalar;

/// Beta prior parameter used by the hard instance.
pub const FINGERPRINT_BETA: f64 = 1.0 / 80.0;

/// Default finite-difference step of the field checker.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintInstance<T> {
    pub dataset: GlmDataset<T>,
    /// Hidden Bernoulli means, one per coordinate.
    pub hidden_means: Array1<T>,
    /// Hidden binary rows `Z`, n x d.
    pub hidden_rows: Array2<u8>,
    pub alpha: f64,
    pub beta: f64,
}

/// `ln X` for `X ~ Gamma(shape, 1)`, stable for tiny shapes where `X` underflows.
fn ln_gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        return Gamma::new(shape, 1.0).expect("positive shape").sample(rng).ln();
    }
    // X = Y U^{1/shape} with Y ~ Gamma(shape + 1)
    let y = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
    let u: f64 = rng.random::<f64>();
    y.ln() + (1.0 - u).ln() / shape
}

/// `Beta(beta, beta)` draw as `X / (X + Y)` for independent `Gamma(beta, 1)` draws.
fn beta_sample<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> f64 {
    let lx = ln_gamma_sample(beta, rng);
    let ly = ln_gamma_sample(beta, rng);
    1.0 / (1.0 + (ly - lx).exp())
}

/// Draws a hard instance: `P_j ~ Beta(beta, beta)`, rows `Z_i ~ Bernoulli(P)`,
/// features zero with probability `1 - alpha` and otherwise a uniformly random
/// standard basis vector, responses `<Z_i, x_i>`.
pub fn fingerprint_dataset<T: Scalar>(
    d: usize,
    n: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<FingerprintInstance<T>> {
    if d == 0 || n == 0 {
        return Err(Error::InvalidParameter("d and n must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..d).map(|_| beta_sample(beta, &mut rng)).collect();
    let mut z = Array2::<u8>::zeros((n, d));
    let mut x = Array2::<T>::zeros((n, d));
    let mut y = Array1::<T>::zeros(n);
    for i in 0..n {
        for j in 0..d {
            z[[i, j]] = u8::from(rng.random::<f64>() < means[j]);
        }
        if rng.random::<f64>() < alpha {
            let j = rng.random_range(0..d);
            x[[i, j]] = T::one();
            y[i] = T::of(z[[i, j]] as f64);
        }
    }
    let dataset = GlmDataset::new(x, y)?.with_feature_norm_cap(T::one())?;
    Ok(FingerprintInstance {
        dataset,
        hidden_means: means.into_iter().map(T::of).collect(),
        hidden_rows: z,
        alpha,
        beta,
    })
}

impl<T: Scalar> FingerprintInstance<T> {
    pub fn dim(&self) -> usize {
        self.hidden_means.len()
    }

    /// Checks basis-or-zero rows, binary responses equal to `<Z_i, x_i>` and
    /// means in `[0, 1]`.
    pub fn check_invariants(&self) -> Result<()> {
        let x = self.dataset.features();
        let (n, d) = x.dim();
        if self.hidden_rows.dim() != (n, d) || self.hidden_means.len() != d {
            return Err(Error::InvalidDataset(
                "hidden data shape does not match features".into(),
            ));
        }
        for i in 0..n {
            let row = x.row(i);
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones > 1 || ones + zeros != d {
                return Err(Error::InvalidDataset(format!("row {i} is not zero or a basis vector")));
            }
            let inner: u32 = (0..d)
                .filter(|&j| row[j] == T::one())
                .map(|j| self.hidden_rows[[i, j]] as u32)
                .sum();
            let yi = self.dataset.response(i);
            if yi != T::of(inner as f64) {
                return Err(Error::InvalidDataset(format!("response {i} is not <Z_i, x_i>")));
            }
        }
        if self.hidden_means.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
            return Err(Error::InvalidDataset("hidden means outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Mean of the hidden rows.
    pub fn hidden_row_mean(&self) -> Array1<T> {
        let n = T::of(self.hidden_rows.nrows() as f64);
        self.hidden_rows
            .map(|&v| T::of(v as f64))
            .sum_axis(ndarray::Axis(0))
            .mapv(|v| v / n)
    }

    /// Exact minimizer of the absolute-loss empirical risk.
    ///
    /// The risk separates over coordinates: coordinate `j` only sees the 0/1
    /// responses of rows equal to `e_j`, so any median of those is optimal.
    /// The midpoint of the median interval is returned, and `1/2` for
    /// coordinates no row touches.
    pub fn exact_minimizer(&self) -> Array1<T> {
        let d = self.dim();
        let mut zeros = vec![0usize; d];
        let mut ones = vec![0usize; d];
        let x = self.dataset.features();
        for i in 0..x.nrows() {
            if let Some(j) = x.row(i).iter().position(|&v| v == T::one()) {
                if self.dataset.response(i) == T::one() {
                    ones[j] += 1;
                } else {
                    zeros[j] += 1;
                }
            }
        }
        (0..d)
            .map(|j| match zeros[j].cmp(&ones[j]) {
                std::cmp::Ordering::Greater => T::zero(),
                std::cmp::Ordering::Less => T::one(),
                std::cmp::Ordering::Equal => T::of(0.5),
            })
            .collect()
    }
}

/// One-dimensional logistic dataset with `2 n_unit` copies of `(1/2, +1)` and
/// `n_unit` copies of `(1, -1)`. The unclipped optimum is `theta = 0`.
pub fn clipping_bias_instance<T: Scalar>(n_unit: usize) -> Result<GlmDataset<T>> {
    if n_unit == 0 {
        return Err(Error::InvalidParameter("n_unit must be at least 1".into()));
    }
    let n = 3 * n_unit;
    let mut x = Array2::zeros((n, 1));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        if i < 2 * n_unit {
            x[[i, 0]] = T::of(0.5);
            y[i] = T::one();
        } else {
            x[[i, 0]] = T::one();
            y[i] = -T::one();
        }
    }
    GlmDataset::new(x, y)?.with_feature_norm_cap(T::one())
}

/// Minimizer `2 ln(1/B - 1)` of the clipped objective on the bias instance.
pub fn theta_clipped_star_closed_form(b: f64) -> Result<f64> {
    if !(b > 0.0 && b < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "clip norm must lie in (0, 1/2), got {b}"
        )));
    }
    Ok(2.0 * (1.0 / b - 1.0).ln())
}

/// Clipped loss of the example `(1/2, +1)` at model `theta`.
pub fn clipped_logistic_half_positive(theta: f64, b: f64) -> f64 {
    if b < 0.5 {
        let t = 2.0 * (1.0 / (2.0 * b) - 1.0).ln();
        if theta < t {
            return -b * theta + 2.0 * b * (1.0 / (2.0 * b) - 1.0).ln() + (1.0 / (1.0 - 2.0 * b)).ln();
        }
    }
    softplus(-theta / 2.0)
}

/// Clipped loss of the example `(1, -1)` at model `theta`.
pub fn clipped_logistic_unit_negative(theta: f64, b: f64) -> f64 {
    if b < 1.0 {
        let t = -(1.0 / b - 1.0).ln();
        if theta > t {
            return b * theta + b * (1.0 / b - 1.0).ln() + (1.0 / (1.0 - b)).ln();
        }
    }
    softplus(theta)
}

/// Clipped objective of the bias instance in closed form.
pub fn clipping_bias_objective_closed_form(theta: f64, b: f64) -> f64 {
    (2.0 * clipped_logistic_half_positive(theta, b) + clipped_logistic_unit_negative(theta, b)) / 3.0
}

/// Unclipped logistic objective of the bias instance.
pub fn clipping_bias_objective(theta: f64) -> f64 {
    (2.0 * softplus(-theta / 2.0) + softplus(theta)) / 3.0
}

/// Golden-section search for the minimizer of a unimodal `f` on `[a, b]`.
pub fn golden_section_minimize<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// How the softmax gradient is clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clip the stacked gradient of all classes at once.
    Joint,
    /// Clip each class block separately.
    PerClass,
}

impl std::str::FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(ClipMode::Joint),
            "per_class" => Ok(ClipMode::PerClass),
            other => Err(Error::InvalidParameter(format!("unknown clip mode {other:?}"))),
        }
    }
}

/// Clipped softmax gradient field `G(theta)` as K x p blocks.
pub fn clipped_softmax_field<T: Scalar>(
    blocks: ArrayView2<'_, T>,
    ex: &SoftmaxExample<T>,
    b: T,
    mode: ClipMode,
) -> Result<Array2<T>> {
    let (_, g) = softmax_loss_and_gradient(blocks, ex)?;
    match mode {
        ClipMode::PerClass => per_class_clip(g.view(), b),
        ClipMode::Joint => {
            let shape = g.dim();
            let flat = Array1::from_iter(g.iter().copied());
            let clipped = clip_vector(flat.view(), b)?;
            Ok(Array2::from_shape_vec(shape, clipped.to_vec()).expect("same length"))
        }
    }
}

/// Blocks with logits `theta^(k) . x = logits[k]`, each a multiple of `x`.
pub fn blocks_with_logits<T: Scalar>(x: &Array1<T>, logits: &[T]) -> Result<Array2<T>> {
    let xx = x.dot(x);
    if !(xx > T::zero()) {
        return Err(Error::InvalidParameter("feature vector must be nonzero".into()));
    }
    let mut blocks = Array2::zeros((logits.len(), x.len()));
    for (mut row, &l) in blocks.rows_mut().into_iter().zip(logits) {
        row.assign(&x.mapv(|v| v * l / xx));
    }
    Ok(blocks)
}

fn boundary_margin<T: Scalar>(g: &Array2<T>, b: T, mode: ClipMode) -> T {
    match mode {
        ClipMode::Joint => (g.iter().map(|&v| v * v).sum::<T>().sqrt() - b).abs(),
        ClipMode::PerClass => g
            .rows()
            .into_iter()
            .map(|r| (r.dot(&r).sqrt() - b).abs())
            .fold(T::infinity(), |m, v| m.min(v)),
    }
}

/// Central-difference Jacobian of the clipped field, indexed by
/// `k * p + j` for class `k` and coordinate `j`. Rows are outputs.
pub fn field_jacobian_fd<T: Scalar>(
    blocks: ArrayView2<'_, T>,
    ex: &SoftmaxExample<T>,
    b: T,
    mode: ClipMode,
    h: T,
) -> Result<Array2<T>> {
    let (k, p) = blocks.dim();
    let m = k * p;
    let mut jac = Array2::zeros((m, m));
    let mut plus = blocks.to_owned();
    let mut minus = blocks.to_owned();
    for col in 0..m {
        let (c, j) = (col / p, col % p);
        plus[[c, j]] = blocks[[c, j]] + h;
        minus[[c, j]] = blocks[[c, j]] - h;
        let gp = clipped_softmax_field(plus.view(), ex, b, mode)?;
        let gm = clipped_softmax_field(minus.view(), ex, b, mode)?;
        for (row, (a, bb)) in gp.iter().zip(gm.iter()).enumerate() {
            jac[[row, col]] = (*a - *bb) / (h + h);
        }
        plus[[c, j]] = blocks[[c, j]];
        minus[[c, j]] = blocks[[c, j]];
    }
    Ok(jac)
}

/// Exact Jacobian of the clipped field from the softmax Hessian
/// `H = (diag(p) - p p^T) (x) x x^T` and the derivative of `v -> B v / |v|`.
pub fn field_jacobian_analytic<T: Scalar>(
    blocks: ArrayView2<'_, T>,
    ex: &SoftmaxExample<T>,
    b: T,
    mode: ClipMode,
) -> Result<Array2<T>> {
    let (k, p) = blocks.dim();
    let (_, g) = softmax_loss_and_gradient(blocks, ex)?;
    let probs = softmax_probabilities(blocks.dot(&ex.x).view());
    let m = k * p;
    let mut hess = Array2::zeros((m, m));
    for a in 0..k {
        for c in 0..k {
            let w = if a == c { probs[a] } else { T::zero() } - probs[a] * probs[c];
            for i in 0..p {
                for j in 0..p {
                    hess[[a * p + i, c * p + j]] = w * ex.x[i] * ex.x[j];
                }
            }
        }
    }
    let flat = Array1::from_iter(g.iter().copied());
    match mode {
        ClipMode::Joint => {
            let norm = flat.dot(&flat).sqrt();
            if norm <= b {
                return Ok(hess);
            }
            Ok(clip_derivative(&flat, b).dot(&hess))
        }
        ClipMode::PerClass => {
            let mut jac = hess.clone();
            for a in 0..k {
                let block = g.row(a).to_owned();
                if block.dot(&block).sqrt() > b {
                    let rows = hess.slice(ndarray::s![a * p..(a + 1) * p, ..]);
                    let new = clip_derivative(&block, b).dot(&rows);
                    jac.slice_mut(ndarray::s![a * p..(a + 1) * p, ..]).assign(&new);
                }
            }
            Ok(jac)
        }
    }
}

/// Derivative `(B / |v|) (I - v v^T / |v|^2)` of `v -> B v / |v|`.
fn clip_derivative<T: Scalar>(v: &Array1<T>, b: T) -> Array2<T> {
    let nn = v.dot(v);
    let norm = nn.sqrt();
    let s = b / norm;
    let len = v.len();
    Array2::from_shape_fn((len, len), |(i, j)| {
        let eye = if i == j { T::one() } else { T::zero() };
        s * (eye - v[i] * v[j] / nn)
    })
}

fn frobenius<T: Scalar>(a: &Array2<T>) -> T {
    a.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Relative asymmetry `|J - J^T|_F / max(1, |J|_F)` of a Jacobian.
pub fn asymmetry<T: Scalar>(jac: &Array2<T>) -> T {
    let diff = jac - &jac.t();
    frobenius(&diff) / frobenius(jac).max(T::one())
}

/// Asymmetry of the finite-difference Jacobian of the clipped softmax field.
///
/// A conservative field has a symmetric Jacobian, so a large value shows the
/// clipped field is not the gradient of any function near `blocks`.
pub fn field_asymmetry<T: Scalar>(
    blocks: ArrayView2<'_, T>,
    ex: &SoftmaxExample<T>,
    b: T,
    mode: ClipMode,
    h: T,
) -> Result<T> {
    if blocks.nrows() < 3 {
        return Err(Error::InvalidParameter("field checks need at least 3 classes".into()));
    }
    if !(h >= T::of(1e-7) && h <= T::of(1e-4)) {
        return Err(Error::InvalidParameter(format!("h must lie in [1e-7, 1e-4], got {h}")));
    }
    if !(b > T::zero()) {
        return Err(Error::InvalidParameter(format!("clip norm must be positive, got {b}")));
    }
    let (_, g) = softmax_loss_and_gradient(blocks, ex)?;
    // each stencil point moves the gradient by at most |x|^2 h
    let margin = boundary_margin(&g, b, mode);
    let reach = T::of(2.0) * h * ex.x.dot(&ex.x);
    if margin <= reach {
        return Err(Error::ClippingBoundary {
            h: h.as_f64(),
            margin: margin.as_f64(),
        });
    }
    let jac = field_jacobian_fd(blocks, ex, b, mode, h)?;
    Ok(asymmetry(&jac))
}
