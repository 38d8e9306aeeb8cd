//! Asymmetric Laplace (AL) distribution, pinball loss, and softmax-weighted
//! AL mixtures.
//!
//! The AL density with location q, scale s and skew t is
//! `t(1-t)/s * exp(-pinball_t(y - q)/s)`; maximizing its log-likelihood is
//! equivalent to minimizing the pinball loss, which pins the location at the
//! t-th conditional quantile.

use rand::Rng;

use crate::autodiff::log_sum_exp;
use crate::error::CqnpError;

/// Skew levels and scales are clamped away from their degenerate limits
/// before any density evaluation.
pub const TAU_FLOOR: f64 = 1e-3;
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Clamp a quantile level into [TAU_FLOOR, 1 - TAU_FLOOR].
pub fn clamp_tau(tau: f64) -> f64 {
    tau.clamp(TAU_FLOOR, 1.0 - TAU_FLOOR)
}

/// Asymmetric absolute (pinball) loss: `max{r*tau, r*(tau-1)}`.
pub fn pinball(residual: f64, tau: f64) -> Result<f64, CqnpError> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(CqnpError::Domain(format!(
            "pinball level must lie in (0,1), got {tau}"
        )));
    }
    Ok((residual * tau).max(residual * (tau - 1.0)))
}

/// Location, scale, skew of one AL component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlParams {
    pub location: f64,
    pub scale: f64,
    pub tau: f64,
}

impl AlParams {
    /// Validates and clamps: scale floored at 1e-3, tau clamped into
    /// [1e-3, 1 - 1e-3].
    pub fn new(location: f64, scale: f64, tau: f64) -> Result<Self, CqnpError> {
        if !location.is_finite() || !scale.is_finite() || !tau.is_finite() {
            return Err(CqnpError::Domain(format!(
                "AL parameters must be finite, got ({location}, {scale}, {tau})"
            )));
        }
        Ok(AlParams {
            location,
            scale: scale.max(SIGMA_FLOOR),
            tau: clamp_tau(tau),
        })
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        let rho = (y - self.location).max(0.0) * self.tau
            + (self.location - y).max(0.0) * (1.0 - self.tau);
        (self.tau * (1.0 - self.tau) / self.scale).ln() - rho / self.scale
    }

    /// Piecewise exponential CDF.
    pub fn cdf(&self, y: f64) -> f64 {
        let z = (y - self.location) / self.scale;
        if z <= 0.0 {
            self.tau * ((1.0 - self.tau) * z).exp()
        } else {
            1.0 - (1.0 - self.tau) * (-self.tau * z).exp()
        }
    }

    /// Generalized inverse of the CDF.
    pub fn quantile(&self, prob: f64) -> Result<f64, CqnpError> {
        if !(0.0 < prob && prob < 1.0) {
            return Err(CqnpError::Domain(format!(
                "quantile probability must lie in (0,1), got {prob}"
            )));
        }
        Ok(if prob <= self.tau {
            self.location + self.scale * (prob / self.tau).ln() / (1.0 - self.tau)
        } else {
            self.location - self.scale * ((1.0 - prob) / (1.0 - self.tau)).ln() / self.tau
        })
    }

    /// Inverse-CDF sampling.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        // random::<f64>() covers [0,1); shift into (0,1).
        let u = 1.0 - rng.random::<f64>();
        self.quantile(u).expect("u in (0,1)")
    }

    /// E[y] = location + scale * (1 - 2 tau) / (tau (1 - tau)).
    pub fn mean(&self) -> f64 {
        self.location + self.scale * (1.0 - 2.0 * self.tau) / (self.tau * (1.0 - self.tau))
    }
}

/// One mixture component: an unnormalized mixing score plus its AL.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlComponent {
    pub alpha_logit: f64,
    pub al: AlParams,
}

/// The predictive distribution at one target point: a softmax-weighted
/// mixture of AL components over the sampled quantile levels.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureAtPoint {
    components: Vec<AlComponent>,
}

impl MixtureAtPoint {
    pub fn new(components: Vec<AlComponent>) -> Result<Self, CqnpError> {
        if components.is_empty() {
            return Err(CqnpError::Usage("mixture needs at least one component".into()));
        }
        Ok(MixtureAtPoint { components })
    }

    pub fn components(&self) -> &[AlComponent] {
        &self.components
    }

    /// Softmax of the alpha logits.
    pub fn weights(&self) -> Vec<f64> {
        let logits: Vec<f64> = self.components.iter().map(|c| c.alpha_logit).collect();
        let lse = log_sum_exp(&logits).expect("nonempty by construction");
        logits.iter().map(|&l| (l - lse).exp()).collect()
    }

    /// log sum_k softmax(alpha)_k AL(y | k), evaluated as a log-sum-exp of
    /// (logit + log pdf) minus the logit normalizer.
    pub fn log_lik(&self, y: f64) -> f64 {
        let scored: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.alpha_logit + c.al.log_pdf(y))
            .collect();
        let logits: Vec<f64> = self.components.iter().map(|c| c.alpha_logit).collect();
        log_sum_exp(&scored).expect("nonempty") - log_sum_exp(&logits).expect("nonempty")
    }

    /// Softmax-weighted sum of component means.
    pub fn mean(&self) -> f64 {
        self.weights()
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * c.al.mean())
            .sum()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.weights()
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * c.al.cdf(y))
            .sum()
    }

    /// Mixture quantile by bisection over the mixture CDF (no closed form
    /// exists for AL mixtures).
    pub fn quantile(&self, prob: f64) -> Result<f64, CqnpError> {
        if !(0.0 < prob && prob < 1.0) {
            return Err(CqnpError::Domain(format!(
                "quantile probability must lie in (0,1), got {prob}"
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.components {
            lo = lo.min(c.al.quantile(1e-12)?);
            hi = hi.max(c.al.quantile(1.0 - 1e-12)?);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 * (1.0 + mid.abs()) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Minimizer of `sum_i pinball_tau(y_i - q)` over q: an empirical
/// tau-quantile of the sample.
pub fn empirical_quantile_fit(samples: &[f64], tau: f64) -> Result<f64, CqnpError> {
    if samples.is_empty() {
        return Err(CqnpError::Usage("empirical quantile of empty sample".into()));
    }
    if !(0.0 < tau && tau < 1.0) {
        return Err(CqnpError::Domain(format!(
            "quantile level must lie in (0,1), got {tau}"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    // The subgradient of the pinball sum changes sign at the k-th order
    // statistic with k = ceil(n tau).
    let k = (sorted.len() as f64 * tau).ceil().max(1.0) as usize;
    Ok(sorted[k - 1])
}
