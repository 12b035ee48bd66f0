//! Privacy calibration and composition.
//!
//! Neighbouring datasets differ by adding or removing one example, which is
//! the adjacency under which Poisson-subsampling amplification holds. The
//! subsampled-Gaussian Rényi bound is the exact one for integer and fractional
//! orders (Mironov, Talwar and Zhang, 2019). All quantities are in nats.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Iteration cap for the fractional-order series.
const MAX_SERIES_TERMS: usize = 20_000;

/// Noise standard deviation making full-batch gradient descent `(eps, delta)`-DP
/// for per-example gradients bounded by `lipschitz`:
/// `sigma = L sqrt(2 T ln(1/delta)) / (n eps)`.
pub fn gaussian_sigma_for_budget(lipschitz: f64, iterations: usize, n: usize, eps: f64, delta: f64) -> Result<f64> {
    if !(lipschitz > 0.0) || iterations == 0 || n == 0 {
        return Err(Error::InvalidParameter(
            "lipschitz, iterations and n must be positive".into(),
        ));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(lipschitz * (2.0 * iterations as f64 * (1.0 / delta).ln()).sqrt() / (n as f64 * eps))
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a - e^b)` for `a >= b`.
#[inline]
fn log_sub(a: f64, b: f64) -> Option<f64> {
    if b > a {
        return None;
    }
    if b == f64::NEG_INFINITY {
        return Some(a);
    }
    if a == b {
        return Some(f64::NEG_INFINITY);
    }
    Some(a + (-(b - a).exp()).ln_1p())
}

/// `ln erfc(x)`, with an asymptotic expansion where `erfc` underflows.
pub(crate) fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        erfc(x).ln()
    } else {
        let x2 = x * x;
        let inv = 1.0 / x2;
        let series = 1.0 - 0.5 * inv + 0.75 * inv * inv - 1.875 * inv * inv * inv;
        -x2 - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()
    }
}

fn log_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let a = alpha as f64;
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        if i > 0 {
            log_binom += (a - fi + 1.0).ln() - fi.ln();
        }
        let term = log_binom + fi * log_q + (a - fi) * log_1mq + (fi * fi - fi) / two_var;
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_fractional(q: f64, sigma: f64, alpha: f64) -> Option<f64> {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let scale = std::f64::consts::SQRT_2 * sigma;
    let half = 0.5f64.ln();
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut log_binom = 0.0f64;
    let mut positive = true;
    for i in 0..MAX_SERIES_TERMS {
        let fi = i as f64;
        if i > 0 {
            let factor = alpha - fi + 1.0;
            if factor < 0.0 {
                positive = !positive;
            }
            log_binom += factor.abs().ln() - fi.ln();
        }
        let j = alpha - fi;
        let t0 = log_binom + fi * log_q + j * log_1mq;
        let t1 = log_binom + j * log_q + fi * log_1mq;
        let e0 = half + log_erfc((fi - z0) / scale);
        let e1 = half + log_erfc((z0 - j) / scale);
        let s0 = t0 + (fi * fi - fi) / two_var + e0;
        let s1 = t1 + (j * j - j) / two_var + e1;
        if positive {
            a0 = log_add(a0, s0);
            a1 = log_add(a1, s1);
        } else {
            a0 = log_sub(a0, s0)?;
            a1 = log_sub(a1, s1)?;
        }
        if s0.max(s1) < -30.0 {
            return Some(log_add(a0, a1));
        }
    }
    None
}

/// Per-step Rényi DP of the Poisson-subsampled Gaussian mechanism at order `alpha`.
///
/// `noise_multiplier` is the noise standard deviation divided by the
/// add/remove sensitivity. With `q = 1` this is `alpha / (2 z^2)` exactly.
pub fn rdp_subsampled_gaussian_step(q: f64, noise_multiplier: f64, alpha: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling rate must lie in (0, 1], got {q}"
        )));
    }
    if !(noise_multiplier > 0.0) || !noise_multiplier.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise multiplier must be positive, got {noise_multiplier}"
        )));
    }
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::UnsupportedOrder {
            alpha,
            reason: "orders must be finite and exceed 1".into(),
        });
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * noise_multiplier * noise_multiplier));
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= u32::MAX as f64 {
        log_a_integer(q, noise_multiplier, alpha as u64)
    } else {
        log_a_fractional(q, noise_multiplier, alpha).ok_or_else(|| Error::UnsupportedOrder {
            alpha,
            reason: "fractional-order series did not converge".into(),
        })?
    };
    let rdp = log_a / (alpha - 1.0);
    if !rdp.is_finite() {
        return Err(Error::UnsupportedOrder {
            alpha,
            reason: "bound is not finite".into(),
        });
    }
    Ok(rdp.max(0.0))
}

/// Amplified per-step pure-DP level `ln(1 + q (e^{eps0} - 1))` of an
/// `eps0`-DP step applied to a Poisson subsample with rate `q < 0.5`.
pub fn gamma_step_epsilon(eps0: f64, q: f64) -> Result<f64> {
    if !(eps0 > 0.0) || !eps0.is_finite() {
        return Err(Error::InvalidParameter(format!("eps0 must be positive, got {eps0}")));
    }
    if !(q > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling rate must be positive, got {q}"
        )));
    }
    if q >= 0.5 {
        return Err(Error::AmplificationPrecondition(q));
    }
    Ok((q * eps0.exp_m1()).ln_1p())
}

/// `eps`-DP implies `(alpha, alpha eps^2 / 2)`-RDP.
pub fn pure_to_rdp(eps: f64, alpha: f64) -> Result<f64> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    if !(alpha > 1.0) {
        return Err(Error::UnsupportedOrder {
            alpha,
            reason: "orders must exceed 1".into(),
        });
    }
    Ok(alpha * eps * eps / 2.0)
}

/// RDP-to-(eps, delta) conversion rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conversion {
    /// `rdp + ln(1/delta) / (alpha - 1)` (Mironov, 2017).
    Classic,
    /// `rdp + ln((alpha - 1)/alpha) - (ln delta + ln alpha) / (alpha - 1)`
    /// (Balle et al., 2020); never larger than `Classic`.
    #[default]
    Improved,
}

impl Conversion {
    pub fn epsilon(&self, rdp: f64, alpha: f64, delta: f64) -> f64 {
        match self {
            Conversion::Classic => rdp + (1.0 / delta).ln() / (alpha - 1.0),
            Conversion::Improved => {
                let eps = rdp + (-1.0 / alpha).ln_1p() - (delta.ln() + alpha.ln()) / (alpha - 1.0);
                eps.max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    Rdp,
    Pure,
}

/// Default order grid: a fine band `1.1..=12` in steps of 0.1 together with
/// `1.25, 1.5, 2, 3, ..., 64, 128, 256`.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (11..=120).map(|k| k as f64 / 10.0).collect();
    orders.extend([1.25, 1.5]);
    orders.extend((2..=64).map(|k| k as f64));
    orders.extend([128.0, 256.0]);
    orders.sort_by(|a, b| a.partial_cmp(b).unwrap());
    orders.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    orders
}

/// Accumulated privacy loss of a sequence of mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    mode: LedgerMode,
    orders: Vec<f64>,
    rdp: Vec<f64>,
    pure_epsilon: f64,
    steps: usize,
    conversion: Conversion,
    mechanisms: Vec<String>,
}

impl PrivacyLedger {
    /// RDP ledger over the given strictly increasing orders.
    pub fn rdp(orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::InvalidParameter("order grid is empty".into()));
        }
        if orders.iter().any(|&a| !(a > 1.0)) {
            return Err(Error::InvalidParameter("orders must exceed 1".into()));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("orders must be strictly increasing".into()));
        }
        let len = orders.len();
        Ok(Self {
            mode: LedgerMode::Rdp,
            orders,
            rdp: vec![0.0; len],
            pure_epsilon: 0.0,
            steps: 0,
            conversion: Conversion::default(),
            mechanisms: Vec::new(),
        })
    }

    /// RDP ledger over [`default_orders`].
    pub fn with_default_orders() -> Self {
        Self::rdp(default_orders()).expect("default grid is valid")
    }

    /// Pure-DP ledger composed by summing per-step epsilons.
    pub fn pure() -> Self {
        Self {
            mode: LedgerMode::Pure,
            orders: Vec::new(),
            rdp: Vec::new(),
            pure_epsilon: 0.0,
            steps: 0,
            conversion: Conversion::default(),
            mechanisms: Vec::new(),
        }
    }

    pub fn with_conversion(mut self, conversion: Conversion) -> Self {
        self.conversion = conversion;
        self
    }

    pub fn mode(&self) -> LedgerMode {
        self.mode
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    /// Accumulated RDP per order; `+inf` marks orders the bound does not cover.
    pub fn rdp_values(&self) -> &[f64] {
        &self.rdp
    }

    pub fn pure_epsilon(&self) -> f64 {
        self.pure_epsilon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn conversion(&self) -> Conversion {
        self.conversion
    }

    /// Human-readable description of the composed mechanisms.
    pub fn mechanism(&self) -> String {
        self.mechanisms.join(" + ")
    }

    fn note(&mut self, what: String) {
        if self.mechanisms.last() != Some(&what) {
            self.mechanisms.push(what);
        }
    }

    fn require_mode(&self, mode: LedgerMode) -> Result<()> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "ledger is in {:?} mode, operation needs {:?}",
                self.mode, mode
            )))
        }
    }

    /// Adds `steps` Poisson-subsampled Gaussian steps.
    pub fn compose_subsampled_gaussian(&mut self, q: f64, noise_multiplier: f64, steps: usize) -> Result<()> {
        self.require_mode(LedgerMode::Rdp)?;
        // validate parameters once on an order every bound supports
        rdp_subsampled_gaussian_step(q, noise_multiplier, 2.0)?;
        for (alpha, acc) in self.orders.iter().zip(self.rdp.iter_mut()) {
            match rdp_subsampled_gaussian_step(q, noise_multiplier, *alpha) {
                Ok(v) => *acc += steps as f64 * v,
                Err(Error::UnsupportedOrder { .. }) => *acc = f64::INFINITY,
                Err(e) => return Err(e),
            }
        }
        self.steps += steps;
        self.note(format!("subsampled_gaussian(q={q}, z={noise_multiplier})"));
        Ok(())
    }

    /// Adds `steps` pure `eps`-DP steps, converted to RDP when in RDP mode.
    pub fn compose_pure(&mut self, eps: f64, steps: usize) -> Result<()> {
        match self.mode {
            LedgerMode::Rdp => {
                for (alpha, acc) in self.orders.iter().zip(self.rdp.iter_mut()) {
                    *acc += steps as f64 * pure_to_rdp(eps, *alpha)?;
                }
            }
            LedgerMode::Pure => {
                if !(eps > 0.0) {
                    return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
                }
                self.pure_epsilon += steps as f64 * eps;
            }
        }
        self.steps += steps;
        self.note(format!("pure(eps={eps})"));
        Ok(())
    }

    /// Adds `steps` Gamma-noise steps at level `eps0`, amplified by Poisson rate `q`.
    pub fn compose_subsampled_gamma(&mut self, eps0: f64, q: f64, steps: usize) -> Result<()> {
        let eps = gamma_step_epsilon(eps0, q)?;
        self.compose_pure(eps, steps)?;
        self.mechanisms.pop();
        self.note(format!("subsampled_gamma(q={q}, eps0={eps0})"));
        Ok(())
    }
}

/// `(eps, delta)` statement obtained from a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub eps: f64,
    pub delta: f64,
    /// Minimizing RDP order; `None` for pure ledgers.
    pub best_alpha: Option<f64>,
}

/// Converts the ledger to `(eps, delta)`, minimizing over the order grid.
pub fn ledger_to_dp(ledger: &PrivacyLedger, delta: f64) -> Result<DpGuarantee> {
    if ledger.steps == 0 {
        return Err(Error::EmptyLedger);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    match ledger.mode {
        LedgerMode::Pure => Ok(DpGuarantee {
            eps: ledger.pure_epsilon,
            delta,
            best_alpha: None,
        }),
        LedgerMode::Rdp => {
            let mut best = (f64::INFINITY, None);
            for (&alpha, &rdp) in ledger.orders.iter().zip(&ledger.rdp) {
                if !rdp.is_finite() {
                    continue;
                }
                let eps = ledger.conversion.epsilon(rdp, alpha, delta);
                if eps < best.0 {
                    best = (eps, Some(alpha));
                }
            }
            Ok(DpGuarantee {
                eps: best.0,
                delta,
                best_alpha: best.1,
            })
        }
    }
}

/// Serializable summary embedded in run records and printed by `account`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingSummary {
    pub eps: f64,
    pub delta: f64,
    pub best_alpha: Option<f64>,
    pub steps: usize,
    pub mechanism: String,
    pub conversion: Conversion,
}

impl AccountingSummary {
    pub fn from_ledger(ledger: &PrivacyLedger, delta: f64) -> Result<Self> {
        let g = ledger_to_dp(ledger, delta)?;
        Ok(Self {
            eps: g.eps,
            delta,
            best_alpha: g.best_alpha,
            steps: ledger.steps(),
            mechanism: ledger.mechanism(),
            conversion: ledger.conversion(),
        })
    }

    /// Summary for a run that releases its output without noise.
    pub fn non_private(steps: usize) -> Self {
        Self {
            eps: f64::INFINITY,
            delta: 0.0,
            best_alpha: None,
            steps,
            mechanism: "none".into(),
            conversion: Conversion::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_formula_and_homogeneity() {
        let s = gaussian_sigma_for_budget(1.0, 100, 1000, 1.0, 1e-5).unwrap();
        assert!((s * s - 200.0 * 1e5f64.ln() / 1e6).abs() < 1e-15);
        assert!((s - 0.047_985_3).abs() < 1e-7);
        let s2 = gaussian_sigma_for_budget(1.0, 200, 1000, 1.0, 1e-5).unwrap();
        assert!((s2 / s - 2f64.sqrt()).abs() < 1e-14);
        let s3 = gaussian_sigma_for_budget(1.0, 100, 2000, 1.0, 1e-5).unwrap();
        assert!((s3 / s - 0.5).abs() < 1e-15);
        assert!(gaussian_sigma_for_budget(1.0, 100, 1000, 1.0, 1.0).is_err());
        assert!(gaussian_sigma_for_budget(1.0, 100, 1000, 0.0, 1e-5).is_err());
    }

    #[test]
    fn unsubsampled_gaussian_rdp() {
        assert_eq!(rdp_subsampled_gaussian_step(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_subsampled_gaussian_step(1.0, 2.0, 3.5).unwrap(), 3.5 / 8.0);
    }

    #[test]
    fn integer_and_fractional_series_agree_near_integers() {
        for &(q, z) in &[(0.01, 1.0), (0.004_199, 0.63), (0.2, 2.0)] {
            for a in [2.0, 3.0, 5.0] {
                let exact = rdp_subsampled_gaussian_step(q, z, a).unwrap();
                let near = rdp_subsampled_gaussian_step(q, z, a + 1e-9).unwrap();
                assert!((exact - near).abs() <= 1e-6 * exact.max(1e-12), "{q} {z} {a}");
            }
        }
    }

    #[test]
    fn subsampling_decreases_to_zero() {
        let mut last = f64::INFINITY;
        for q in [0.5, 0.1, 0.01, 1e-3, 1e-4] {
            let v = rdp_subsampled_gaussian_step(q, 1.0, 4.0).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn rejects_bad_orders() {
        assert!(matches!(
            rdp_subsampled_gaussian_step(0.1, 1.0, 1.0),
            Err(Error::UnsupportedOrder { .. })
        ));
        assert!(rdp_subsampled_gaussian_step(0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn gamma_amplification() {
        let q = 250.0 / 59535.0;
        let e = gamma_step_epsilon(1.0 / 0.57, q).unwrap();
        // ln(1 + q (e^{eps0} - 1)) evaluated independently
        assert!((e - 0.019_873_013_436).abs() < 1e-11);
        assert!(gamma_step_epsilon(1.0, 1e-12).unwrap() < 1e-11);
        let tiny = gamma_step_epsilon(1e-6, 0.49).unwrap();
        assert!((tiny / 1e-6 - 0.49).abs() < 1e-5);
        assert!(matches!(
            gamma_step_epsilon(1.0, 0.5),
            Err(Error::AmplificationPrecondition(_))
        ));
    }

    #[test]
    fn pure_conversion() {
        assert_eq!(pure_to_rdp(1.0, 2.0).unwrap(), 1.0);
        assert!((pure_to_rdp(0.019_877, 6.0).unwrap() - 1.1853e-3).abs() < 1e-7);
        let mut ledger = PrivacyLedger::rdp(vec![2.0, 6.0]).unwrap();
        ledger.compose_pure(0.3, 7).unwrap();
        assert!((ledger.rdp_values()[1] - 7.0 * pure_to_rdp(0.3, 6.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn classic_single_gaussian_step() {
        // closed-form optimum at alpha - 1 = sqrt(2 ln(1/delta))
        let mut ledger = PrivacyLedger::rdp((0..=5000).map(|k| 1.5 + k as f64 * 1e-3).collect())
            .unwrap()
            .with_conversion(Conversion::Classic);
        ledger.compose_subsampled_gaussian(1.0, 1.0, 1).unwrap();
        let g = ledger_to_dp(&ledger, 1e-5).unwrap();
        let lam = 1e5f64.ln();
        let a_star = 1.0 + (2.0 * lam).sqrt();
        let eps_star = a_star / 2.0 + lam / (a_star - 1.0);
        assert!((g.best_alpha.unwrap() - a_star).abs() < 2e-3);
        assert!((g.eps - eps_star).abs() < 1e-6);
        assert!((g.eps - 5.2985).abs() < 1e-3);
    }

    #[test]
    fn improved_conversion_never_exceeds_classic() {
        for &(rdp, a) in &[(0.1, 2.0), (1.0, 5.0), (3.0, 1.5), (10.0, 64.0)] {
            let c = Conversion::Classic.epsilon(rdp, a, 1e-5);
            let i = Conversion::Improved.epsilon(rdp, a, 1e-5);
            assert!(i <= c);
        }
    }

    #[test]
    fn empty_and_pure_ledgers() {
        let ledger = PrivacyLedger::with_default_orders();
        assert!(matches!(ledger_to_dp(&ledger, 1e-5), Err(Error::EmptyLedger)));
        let mut pure = PrivacyLedger::pure();
        pure.compose_pure(0.25, 4).unwrap();
        let g = ledger_to_dp(&pure, 1e-5).unwrap();
        assert_eq!(g.eps, 1.0);
        assert_eq!(g.best_alpha, None);
        assert!(pure.compose_subsampled_gaussian(0.1, 1.0, 1).is_err());
    }

    #[test]
    fn default_grid_is_strictly_increasing() {
        let g = default_orders();
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(g.contains(&1.1) && g.contains(&12.0) && g.contains(&256.0) && g.contains(&1.25));
        assert!(PrivacyLedger::rdp(vec![2.0, 2.0]).is_err());
        assert!(PrivacyLedger::rdp(vec![0.5]).is_err());
    }

    #[test]
    fn log_erfc_is_continuous_across_branches() {
        let below = log_erfc(25.0 - 1e-9);
        let above = log_erfc(25.0);
        assert!((below - above).abs() < 1e-6);
    }
}
