//! Gaussian weight posteriors with a standard-normal prior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LogbError;

/// Posterior mean and log-variance per scalar weight.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesParam {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl BayesParam {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self, LogbError> {
        let p = Self { mu, logvar };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LogbError> {
        if self.mu.len() != self.logvar.len() {
            return Err(LogbError::Invalid(format!("{} means for {} log-variances", self.mu.len(), self.logvar.len())));
        }
        if self.mu.iter().chain(&self.logvar).any(|v| !v.is_finite()) || self.logvar.iter().any(|v| v.exp() <= 0.0) {
            return Err(LogbError::Invalid("posterior parameters must be finite with positive variance".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// KL(q‖N(0,1)) summed over all weights.
    pub fn kl(&self) -> f64 {
        self.mu.iter().zip(&self.logvar).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
    }
}

/// Standard-normal draws for every weight of `params`, from `rng`.
pub fn draw_eps(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `w = μ + exp(½·logvar)·ε`; returns the weights and the noise used.
pub fn sample_with(params: &BayesParam, eps: &[f64]) -> Vec<f64> {
    params.mu.iter().zip(&params.logvar).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
}

pub fn sample_weights(params: &BayesParam, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = draw_eps(params.len(), &mut rng);
    sample_with(params, &eps)
}

/// `0.5·(μ² + σ² − 1 − ln σ²)`.
pub fn kl_gaussian(mu: f64, var: f64) -> Result<f64, LogbError> {
    if !(var > 0.0) {
        return Err(LogbError::Invalid(format!("variance {var} must be positive")));
    }
    Ok(0.5 * (mu * mu + var - 1.0 - var.ln()))
}
