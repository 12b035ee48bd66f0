//! Private (stochastic) gradient descent over GLM objectives.
//!
//! Each step averages per-example gradients over a batch, clips them to norm
//! `B` if requested, adds noise and takes a projected step:
//! `theta_{t+1} = Pi_C(theta_t - eta (g_t + b_t))`, starting from `theta_0 = 0`.
//!
//! Randomness comes from independent ChaCha streams keyed by the run seed:
//! batch sampling, noise on stored coordinates, noise on zero-padding
//! coordinates and Gamma magnitudes. Gaussian runs that differ only in padding
//! therefore share their stored-coordinate trajectory.

use ndarray::{s, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp1, Gamma, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::{AccountingSummary, PrivacyLedger};
use crate::clipping::shrink_into_ball;
use crate::error::{Error, Result};
use crate::glm::{full_subgradient, objective_value, GlmDataset, GlmLoss};
use crate::scalar::Scalar;
use crate::subspace::FeatureSubspace;

/// Iterates with norm beyond this are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

const STREAM_BATCH: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_PAD_NOISE: u64 = 2;
const STREAM_MAGNITUDE: u64 = 3;

/// Noise added to each averaged gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec<T> {
    None,
    /// Isotropic `N(0, sigma^2)` per coordinate; `ldp_scale` multiplies by `sqrt(n)`.
    Gaussian {
        sigma: T,
        ldp_scale: bool,
    },
    /// Uniform direction with magnitude `Gamma(shape = p, scale = sensitivity / epsilon0)`,
    /// i.e. density proportional to `exp(-epsilon0 |b| / sensitivity)`.
    Gamma {
        epsilon0: T,
        sensitivity: T,
    },
}

impl<T: Scalar> NoiseSpec<T> {
    pub fn gaussian(sigma: T) -> Self {
        NoiseSpec::Gaussian {
            sigma,
            ldp_scale: false,
        }
    }

    /// Gamma noise at unit sensitivity.
    pub fn gamma(epsilon0: T) -> Self {
        NoiseSpec::Gamma {
            epsilon0,
            sensitivity: T::one(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NoiseSpec::None => "none",
            NoiseSpec::Gaussian { .. } => "gaussian",
            NoiseSpec::Gamma { .. } => "gamma",
        }
    }

    pub fn is_private(&self) -> bool {
        !matches!(self, NoiseSpec::None)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Gaussian { sigma, .. } => {
                if sigma >= T::zero() && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "sigma must be finite and >= 0, got {sigma}"
                    )))
                }
            }
            NoiseSpec::Gamma { epsilon0, sensitivity } => {
                if !(epsilon0 > T::zero() && epsilon0.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "epsilon0 must be positive, got {epsilon0}"
                    )));
                }
                if !(sensitivity >= T::zero() && sensitivity.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "gamma sensitivity must be finite and >= 0, got {sensitivity}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// How the examples of each step are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchSpec {
    Full,
    /// Each example joins independently with probability `q`; the batch sum is
    /// divided by the expected size `q n`.
    Poisson {
        q: f64,
    },
    /// `m` examples without replacement. Not covered by the accountant.
    Fixed {
        m: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputRule {
    /// Mean of `theta_1 .. theta_T`.
    #[default]
    AverageIterate,
    LastIterate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig<T> {
    pub iterations: usize,
    pub learning_rate: T,
    /// Per-example gradient norm bound; infinite disables clipping.
    pub clip_norm: T,
    pub batch: BatchSpec,
    pub output: OutputRule,
    /// Radius of the l2 ball iterates are projected onto; infinite means unconstrained.
    pub projection_radius: T,
    pub seed: u64,
    /// Keep `theta_t` for `t` divisible by this (and the final step); 0 keeps none.
    pub log_every: usize,
    /// Record the objective at every logged iterate.
    pub track_objective: bool,
}

impl<T: Scalar> OptimizerConfig<T> {
    pub fn new(iterations: usize, learning_rate: T) -> Self {
        Self {
            iterations,
            learning_rate,
            clip_norm: T::infinity(),
            batch: BatchSpec::Full,
            output: OutputRule::default(),
            projection_radius: T::infinity(),
            seed: 0,
            log_every: 1,
            track_objective: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > T::zero() && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.clip_norm > T::zero()) {
            return Err(Error::Config(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !(self.projection_radius > T::zero()) {
            return Err(Error::Config(format!(
                "projection radius must be positive, got {}",
                self.projection_radius
            )));
        }
        match self.batch {
            BatchSpec::Poisson { q } if !(q > 0.0 && q < 1.0) => {
                Err(Error::Config(format!("poisson rate must lie in (0, 1), got {q}")))
            }
            BatchSpec::Fixed { m: 0 } => Err(Error::Config("fixed batch size must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Result of one optimizer run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerRun<T> {
    pub config: OptimizerConfig<T>,
    pub noise: NoiseSpec<T>,
    pub output: Array1<T>,
    pub last: Array1<T>,
    /// Logged iterates, paired with `logged_steps`.
    pub iterates: Vec<Array1<T>>,
    pub logged_steps: Vec<usize>,
    /// `|g_t + b_t|` for every step.
    pub noisy_gradient_norms: Vec<T>,
    /// Objective at each logged iterate when tracking is on.
    pub objective_trace: Vec<T>,
    pub seed: u64,
}

impl<T: Scalar> OptimizerRun<T> {
    /// True when every step `0..=T` was logged.
    pub fn has_full_log(&self) -> bool {
        self.logged_steps.len() == self.config.iterations + 1
    }
}

/// Largest possible per-example gradient norm: the clip norm, or the Lipschitz
/// bound times the declared feature norm cap, whichever is smaller.
pub fn per_example_sensitivity<T, L>(data: &GlmDataset<T>, loss: &L, clip_norm: T) -> Option<T>
where
    T: Scalar,
    L: GlmLoss<T> + ?Sized,
{
    let natural = match (loss.lipschitz_bound(), data.feature_norm_cap()) {
        (Some(l), Some(cap)) if l.is_finite() => Some(l * cap),
        _ => None,
    };
    match natural {
        Some(v) => Some(v.min(clip_norm)),
        None if clip_norm.is_finite() => Some(clip_norm),
        None => None,
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn norm<T: Scalar>(v: &Array1<T>) -> T {
    v.dot(v).sqrt()
}

fn draw_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

fn gamma_magnitude<T: Scalar, R: Rng + ?Sized>(p: usize, scale: T, rng: &mut R) -> T {
    if scale == T::zero() {
        return T::zero();
    }
    let g = Gamma::new(p as f64, scale.as_f64()).expect("shape and scale are positive");
    T::of(g.sample(rng))
}

/// Draws one noise vector of dimension `p` (sqrt(n) scaling needs
/// [`sample_noise_for`]).
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(spec: &NoiseSpec<T>, p: usize, rng: &mut R) -> Array1<T> {
    sample_noise_for(spec, p, 1, rng)
}

/// As [`sample_noise`], with the example count used by the local-model scaling.
pub fn sample_noise_for<T: Scalar, R: Rng + ?Sized>(spec: &NoiseSpec<T>, p: usize, n: usize, rng: &mut R) -> Array1<T> {
    match *spec {
        NoiseSpec::None => Array1::zeros(p),
        NoiseSpec::Gaussian { sigma, ldp_scale } => {
            let scale = if ldp_scale {
                sigma * T::of(n as f64).sqrt()
            } else {
                sigma
            };
            if scale == T::zero() {
                return Array1::zeros(p);
            }
            Array1::from_shape_fn(p, |_| draw_normal::<T, R>(rng) * scale)
        }
        NoiseSpec::Gamma { epsilon0, sensitivity } => {
            let mag = gamma_magnitude(p, sensitivity / epsilon0, rng);
            let mut dir: Array1<T> = Array1::from_shape_fn(p, |_| draw_normal::<T, R>(rng));
            let dn = norm(&dir);
            if dn > T::zero() {
                dir.mapv_inplace(|v| v * (mag / dn));
            }
            dir
        }
    }
}

/// Noise generator that splits stored and padded coordinates across streams.
struct NoiseSource {
    stored: ChaCha20Rng,
    padded: ChaCha20Rng,
    magnitude: ChaCha20Rng,
}

impl NoiseSource {
    fn new(seed: u64) -> Self {
        Self {
            stored: seeded(seed, STREAM_NOISE),
            padded: seeded(seed, STREAM_PAD_NOISE),
            magnitude: seeded(seed, STREAM_MAGNITUDE),
        }
    }

    fn fill_normal<T: Scalar>(&mut self, out: &mut Array1<T>, stored: usize) {
        for (j, v) in out.iter_mut().enumerate() {
            let rng = if j < stored { &mut self.stored } else { &mut self.padded };
            *v = draw_normal::<T, _>(rng);
        }
    }

    fn draw<T: Scalar>(&mut self, spec: &NoiseSpec<T>, out: &mut Array1<T>, stored: usize, n: usize) {
        match *spec {
            NoiseSpec::None => out.fill(T::zero()),
            NoiseSpec::Gaussian { sigma, ldp_scale } => {
                let scale = if ldp_scale {
                    sigma * T::of(n as f64).sqrt()
                } else {
                    sigma
                };
                self.fill_normal(out, stored);
                out.mapv_inplace(|v| v * scale);
            }
            NoiseSpec::Gamma { epsilon0, sensitivity } => {
                let mag = gamma_magnitude(out.len(), sensitivity / epsilon0, &mut self.magnitude);
                self.fill_normal(out, stored);
                let dn = norm(out);
                if dn > T::zero() {
                    out.mapv_inplace(|v| v * (mag / dn));
                }
            }
        }
    }
}

fn batch_indices(batch: BatchSpec, n: usize, rng: &mut ChaCha20Rng) -> (Vec<usize>, f64) {
    match batch {
        BatchSpec::Full => ((0..n).collect(), n as f64),
        BatchSpec::Poisson { q } => {
            // gaps between included indices are geometric, so only O(q n) draws are needed
            let gaps = Geometric::new(q).expect("q validated in (0, 1)");
            let mut idx = Vec::with_capacity((q * n as f64 * 1.2) as usize + 8);
            let mut next = gaps.sample(rng);
            while next < n as u64 {
                idx.push(next as usize);
                next += 1 + gaps.sample(rng);
            }
            (idx, q * n as f64)
        }
        BatchSpec::Fixed { m } => {
            let m = m.min(n);
            let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
            idx.sort_unstable();
            (idx, m as f64)
        }
    }
}

/// Runs private gradient descent from `theta_0 = 0`.
///
/// With DP noise and no clipping the loss must declare a Lipschitz bound and
/// the dataset a feature norm cap, otherwise sensitivity is unbounded.
pub fn dpgd_run<T, L>(
    data: &GlmDataset<T>,
    loss: &L,
    cfg: &OptimizerConfig<T>,
    noise: &NoiseSpec<T>,
) -> Result<OptimizerRun<T>>
where
    T: Scalar,
    L: GlmLoss<T> + ?Sized,
{
    cfg.validate()?;
    noise.validate()?;
    if noise.is_private() && per_example_sensitivity(data, loss, cfg.clip_norm).is_none() {
        return Err(Error::Config(
            "private noise without clipping needs a Lipschitz loss and a feature norm cap".into(),
        ));
    }

    let n = data.n();
    let p = data.dim();
    let stored = data.stored_dim();
    let big_t = cfg.iterations;
    let clipping = cfg.clip_norm.is_finite();
    let project = cfg.projection_radius.is_finite();

    let mut batch_rng = seeded(cfg.seed, STREAM_BATCH);
    let mut noise_src = NoiseSource::new(cfg.seed);

    let mut theta: Array1<T> = Array1::zeros(p);
    let mut sum: Array1<T> = Array1::zeros(p);
    let mut grad: Array1<T> = Array1::zeros(p);
    let mut b: Array1<T> = Array1::zeros(p);
    let mut coefs: Vec<(usize, T)> = Vec::with_capacity(n);

    let mut iterates = Vec::new();
    let mut logged_steps = Vec::new();
    let mut objective_trace = Vec::new();
    let mut noisy_gradient_norms = Vec::with_capacity(big_t);

    let mut log = |t: usize, theta: &Array1<T>| -> Result<()> {
        if cfg.log_every == 0 || (!t.is_multiple_of(cfg.log_every) && t != big_t) {
            return Ok(());
        }
        logged_steps.push(t);
        iterates.push(theta.clone());
        if cfg.track_objective {
            objective_trace.push(objective_value(loss, data, theta.view())?);
        }
        Ok(())
    };
    log(0, &theta)?;

    for t in 0..big_t {
        let (idx, denom) = batch_indices(cfg.batch, n, &mut batch_rng);
        let inv = T::one() / T::of(denom);
        coefs.clear();
        for &i in &idx {
            let z = data.margin(i, theta.view());
            let mut d = loss.example_derivative(i, z, data.response(i));
            if clipping {
                let gn = d.abs() * data.row_norm(i);
                if gn > cfg.clip_norm {
                    d = d * (cfg.clip_norm / gn);
                }
            }
            coefs.push((i, d * inv));
        }
        grad.fill(T::zero());
        data.accumulate_rows(&coefs, &mut grad);
        noise_src.draw(noise, &mut b, stored, n);
        b.scaled_add(T::one(), &grad);
        noisy_gradient_norms.push(norm(&b));
        theta.scaled_add(-cfg.learning_rate, &b);
        if project {
            shrink_into_ball(theta.view_mut(), cfg.projection_radius);
        }
        let tn = norm(&theta);
        if !tn.is_finite() || tn.as_f64() > DIVERGENCE_NORM {
            return Err(Error::Divergence {
                step: t + 1,
                norm: tn.as_f64(),
            });
        }
        sum.scaled_add(T::one(), &theta);
        log(t + 1, &theta)?;
    }

    let output = match cfg.output {
        OutputRule::AverageIterate => sum.mapv(|v| v / T::of(big_t as f64)),
        OutputRule::LastIterate => theta.clone(),
    };
    Ok(OptimizerRun {
        config: cfg.clone(),
        noise: *noise,
        output,
        last: theta,
        iterates,
        logged_steps,
        noisy_gradient_norms,
        objective_trace,
        seed: cfg.seed,
    })
}

/// Privacy of a run configuration on `n` examples at failure probability `delta`.
///
/// Neighbouring datasets differ by one added or removed example, so the batch
/// average has l2 sensitivity `C / (q n)` (or `C / n` for full batches) where
/// `C` is [`per_example_sensitivity`]. Runs without noise are reported as
/// non-private.
pub fn account_run<T, L>(
    data: &GlmDataset<T>,
    loss: &L,
    cfg: &OptimizerConfig<T>,
    noise: &NoiseSpec<T>,
    delta: f64,
) -> Result<AccountingSummary>
where
    T: Scalar,
    L: GlmLoss<T> + ?Sized,
{
    let steps = cfg.iterations;
    if !noise.is_private() {
        return Ok(AccountingSummary::non_private(steps));
    }
    let c = per_example_sensitivity(data, loss, cfg.clip_norm)
        .ok_or_else(|| Error::Config("no sensitivity bound for accounting".into()))?
        .as_f64();
    let n = data.n() as f64;
    let q = match cfg.batch {
        BatchSpec::Full => 1.0,
        BatchSpec::Poisson { q } => q,
        BatchSpec::Fixed { .. } => {
            return Err(Error::Config(
                "fixed-size batches are not covered by the accountant".into(),
            ));
        }
    };
    let sensitivity = c / (q * n);
    let mut ledger = PrivacyLedger::with_default_orders();
    match *noise {
        NoiseSpec::None => unreachable!(),
        NoiseSpec::Gaussian { sigma, ldp_scale } => {
            let sigma = if ldp_scale {
                sigma.as_f64() * n.sqrt()
            } else {
                sigma.as_f64()
            };
            ledger.compose_subsampled_gaussian(q, sigma / sensitivity, steps)?;
        }
        NoiseSpec::Gamma {
            epsilon0,
            sensitivity: s,
        } => {
            let eps0 = epsilon0.as_f64() * s.as_f64() / sensitivity;
            if q < 1.0 {
                ledger.compose_subsampled_gamma(eps0, q, steps)?;
            } else {
                ledger.compose_pure(eps0, steps)?;
            }
        }
    }
    AccountingSummary::from_ledger(&ledger, delta)
}

/// Iterate chosen by report-noisy-max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FospSelection<T> {
    /// Step index `t` of the chosen iterate.
    pub index: usize,
    /// Noise-free gradient seminorm at the chosen iterate.
    pub seminorm: T,
}

/// Gradient seminorms `|grad L(theta_t)|_M` for `t = 0 .. T-1`.
pub fn gradient_seminorms<T, L>(
    run: &OptimizerRun<T>,
    data: &GlmDataset<T>,
    loss: &L,
    subspace: &FeatureSubspace<T>,
) -> Result<Vec<T>>
where
    T: Scalar,
    L: GlmLoss<T> + ?Sized,
{
    if run.iterates.is_empty() {
        return Err(Error::EmptyLog);
    }
    if !run.has_full_log() {
        return Err(Error::Config("FOSP selection needs an unthinned iterate log".into()));
    }
    run.iterates[..run.config.iterations]
        .iter()
        .map(|theta| subspace.seminorm(full_subgradient(loss, data, theta.view())?.view()))
        .collect()
}

/// Picks `argmin_t |grad L(theta_t)|_M + Lap(4 L / (n eps))` over `t < T`.
pub fn select_fosp<T, L, R>(
    run: &OptimizerRun<T>,
    data: &GlmDataset<T>,
    loss: &L,
    subspace: &FeatureSubspace<T>,
    lipschitz: f64,
    eps: f64,
    rng: &mut R,
) -> Result<FospSelection<T>>
where
    T: Scalar,
    L: GlmLoss<T> + ?Sized,
    R: Rng + ?Sized,
{
    if !(lipschitz >= 0.0) || !(eps > 0.0) {
        return Err(Error::InvalidParameter(
            "lipschitz must be >= 0 and eps positive".into(),
        ));
    }
    let scale = 4.0 * lipschitz / (data.n() as f64 * eps);
    select_fosp_with_scale(run, data, loss, subspace, scale, rng)
}

/// [`select_fosp`] with an explicit Laplace scale; zero gives the exact argmin.
pub fn select_fosp_with_scale<T, L, R>(
    run: &OptimizerRun<T>,
    data: &GlmDataset<T>,
    loss: &L,
    subspace: &FeatureSubspace<T>,
    laplace_scale: f64,
    rng: &mut R,
) -> Result<FospSelection<T>>
where
    T: Scalar,
    L: GlmLoss<T> + ?Sized,
    R: Rng + ?Sized,
{
    if !(laplace_scale >= 0.0) || !laplace_scale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "laplace scale must be finite and >= 0, got {laplace_scale}"
        )));
    }
    let norms = gradient_seminorms(run, data, loss, subspace)?;
    let mut best = (f64::INFINITY, 0usize);
    for (t, g) in norms.iter().enumerate() {
        let noise = if laplace_scale > 0.0 {
            let a: f64 = Exp1.sample(rng);
            let b: f64 = Exp1.sample(rng);
            laplace_scale * (a - b)
        } else {
            0.0
        };
        let score = g.as_f64() + noise;
        if score < best.0 {
            best = (score, t);
        }
    }
    Ok(FospSelection {
        index: best.1,
        seminorm: norms[best.1],
    })
}

/// Dense copy of the stored part of an iterate.
pub fn stored_part<T: Scalar>(theta: &Array1<T>, data: &GlmDataset<T>) -> Array1<T> {
    theta.slice(s![..data.stored_dim()]).to_owned()
}
