//! Variance-preserving diffusion over Gaussian-mixture data with an exact
//! noise predictor, classifier-free guidance, and a deterministic
//! DDIM-style probability-flow sampler.

use serde::Serialize;

use crate::config::{json_hash, ScheduleConfig};
use crate::error::{Error, Result};
use crate::testbed::{ConditionalData, Latent, World};

/// Discrete VP schedule with `steps` sampling steps.
///
/// The linear betas live on a fine grid of `train_steps` points (the usual
/// DDPM setting); sampling step `t` sits at grid index `round(t·N/T)`. The
/// per-step betas are the effective ones between consecutive sampling
/// steps, so `ᾱ_t` is exactly their running product.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64, train_steps: usize) -> Result<Self> {
        if steps < 1 || train_steps < steps || !(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max) {
            return Err(Error::Config(format!(
                "bad schedule: steps={steps}, train_steps={train_steps}, betas=[{beta_min}, {beta_max}]"
            )));
        }
        let mut fine = Vec::with_capacity(train_steps + 1);
        fine.push(1.0f64);
        for s in 1..=train_steps {
            let frac = if train_steps == 1 { 0.0 } else { (s - 1) as f64 / (train_steps - 1) as f64 };
            let beta = beta_min + frac * (beta_max - beta_min);
            fine.push(fine[s - 1] * (1.0 - beta));
        }
        let mut betas = vec![0.0];
        let mut alpha_bars = vec![1.0];
        let mut prev_index = 0;
        for t in 1..=steps {
            let index = ((t * train_steps) as f64 / steps as f64).round() as usize;
            let beta = 1.0 - fine[index] / fine[prev_index];
            betas.push(beta);
            alpha_bars.push(alpha_bars[t - 1] * (1.0 - beta));
            prev_index = index;
        }
        Ok(Self { steps, betas, alpha_bars })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_min, cfg.beta_max, cfg.train_steps)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::StepOutOfRange { step: t, steps: self.steps })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `σ(t)² = 1 − ᾱ_t`.
    pub fn sigma_sq(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.alpha_bar(t)?)
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma_sq(t)?.sqrt())
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }
}

/// `√ᾱ_t·x0 + σ(t)·eps`.
pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &Latent, t: usize, eps: &Latent) -> Result<Latent> {
    if x0.shape != eps.shape {
        return Err(Error::Invalid("forward_diffuse: x0 and eps shapes differ".into()));
    }
    let a = schedule.alpha_bar(t)?.sqrt();
    let s = schedule.sigma(t)?;
    Latent::new(x0.shape, x0.values.iter().zip(&eps.values).map(|(x, e)| a * x + s * e).collect())
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Diagonal Gaussian mixture and its diffused marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(weights: &[f64], means: &[Vec<f64>], variances: &[Vec<f64>]) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != variances.len() {
            return Err(Error::Invalid("mixture needs matching non-empty weights, means and variances".into()));
        }
        let dim = means[0].len();
        if means.iter().chain(variances).any(|v| v.len() != dim) {
            return Err(Error::Invalid("mixture components differ in dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || variances.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("mixture weights and variances must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        let components = weights
            .iter()
            .zip(means)
            .zip(variances)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), v)| Component {
                log_weight: (w / total).ln(),
                mean: m.clone(),
                var: v.clone(),
            })
            .collect();
        Ok(Self { components })
    }

    /// Point mass at `mean`.
    pub fn delta(mean: Vec<f64>) -> Self {
        let var = vec![0.0; mean.len()];
        Self {
            components: vec![Component { log_weight: 0.0, mean, var }],
        }
    }

    /// Single Gaussian `N(mean, diag(var))`.
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            components: vec![Component { log_weight: 0.0, mean, var }],
        }
    }

    pub fn from_conditional(data: &ConditionalData) -> Result<Self> {
        Self::new(&data.weights, &data.means, &data.variances)
    }

    /// Mixture of mixtures with equal weight on each part.
    pub fn pooled(parts: &[GaussianMixture]) -> Self {
        let shift = -(parts.len() as f64).ln();
        Self {
            components: parts
                .iter()
                .flat_map(|p| p.components.iter())
                .map(|c| Component {
                    log_weight: c.log_weight + shift,
                    ..c.clone()
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Per-component log-density of the marginal at `(ᾱ, σ²)` plus the log weight.
    fn joint_log_densities(&self, x: &[f64], alpha_bar: f64, sigma_sq: f64) -> Vec<f64> {
        let a = alpha_bar.sqrt();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.components
            .iter()
            .map(|c| {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    let v = alpha_bar * c.var[i] + sigma_sq;
                    let r = x[i] - a * c.mean[i];
                    acc += r * r / v + v.ln() + ln2pi;
                }
                c.log_weight - 0.5 * acc
            })
            .collect()
    }

    /// `log p_t(x)` for the marginal `Σ_k π_k N(√ᾱ μ_k, ᾱ Σ_k + σ² I)`.
    pub fn log_density(&self, x: &[f64], alpha_bar: f64, sigma_sq: f64) -> f64 {
        log_sum_exp(&self.joint_log_densities(x, alpha_bar, sigma_sq))
    }

    /// `∇ log p_t(x)` with log-sum-exp-stable posterior weights.
    pub fn score(&self, x: &[f64], alpha_bar: f64, sigma_sq: f64) -> Vec<f64> {
        let logs = self.joint_log_densities(x, alpha_bar, sigma_sq);
        let lse = log_sum_exp(&logs);
        let a = alpha_bar.sqrt();
        let mut out = vec![0.0; x.len()];
        for (c, l) in self.components.iter().zip(&logs) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for i in 0..x.len() {
                let v = alpha_bar * c.var[i] + sigma_sq;
                out[i] -= r * (x[i] - a * c.mean[i]) / v;
            }
        }
        out
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// What the noise predictor is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Prompt(usize),
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub w: f64,
}

impl GuidanceConfig {
    pub fn new(w: f64) -> Result<Self> {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Config(format!("guidance weight must be finite and >= 0, got {w}")));
        }
        Ok(Self { w })
    }
}

/// Exact conditional diffusion: one mixture per prompt, the unconditional
/// model being their equal-weight pool.
#[derive(Debug, Clone)]
pub struct DiffusionEngine {
    schedule: NoiseSchedule,
    conditionals: Vec<GaussianMixture>,
    unconditional: GaussianMixture,
}

impl DiffusionEngine {
    pub fn new(schedule: NoiseSchedule, conditionals: Vec<GaussianMixture>) -> Result<Self> {
        if conditionals.is_empty() {
            return Err(Error::Invalid("diffusion engine needs at least one conditional".into()));
        }
        let unconditional = GaussianMixture::pooled(&conditionals);
        Ok(Self {
            schedule,
            conditionals,
            unconditional,
        })
    }

    pub fn from_world(world: &World, schedule: &ScheduleConfig) -> Result<Self> {
        let parts = world.data.iter().map(GaussianMixture::from_conditional).collect::<Result<Vec<_>>>()?;
        Self::new(NoiseSchedule::from_config(schedule)?, parts)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn with_schedule(&self, schedule: NoiseSchedule) -> Self {
        Self {
            schedule,
            ..self.clone()
        }
    }

    fn mixture(&self, cond: Condition) -> Result<&GaussianMixture> {
        match cond {
            Condition::Prompt(p) => self.conditionals.get(p).ok_or(Error::UnknownPrompt(p)),
            Condition::Unconditional => Ok(&self.unconditional),
        }
    }

    fn eps_raw(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        let alpha_bar = self.schedule.alpha_bar(t)?;
        if t == 0 {
            return Err(Error::ZeroNoiseLevel);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("in x_t at step {t}"),
            });
        }
        let sigma_sq = 1.0 - alpha_bar;
        let sigma = sigma_sq.sqrt();
        let score = self.mixture(cond)?.score(x, alpha_bar, sigma_sq);
        Ok(score.into_iter().map(|s| -sigma * s).collect())
    }

    /// `ε̂ = −σ(t)·∇log p_t(x_t | cond)`.
    pub fn eps_exact(&self, x_t: &Latent, t: usize, cond: Condition) -> Result<Latent> {
        Latent::new(x_t.shape, self.eps_raw(&x_t.values, t, cond)?)
    }

    fn cfg_raw(&self, x: &[f64], t: usize, prompt: usize, guidance: GuidanceConfig) -> Result<Vec<f64>> {
        let cond = self.eps_raw(x, t, Condition::Prompt(prompt))?;
        if guidance.w == 0.0 {
            return Ok(cond);
        }
        let uncond = self.eps_raw(x, t, Condition::Unconditional)?;
        let w = guidance.w;
        Ok(cond.iter().zip(&uncond).map(|(c, u)| (1.0 + w) * c - w * u).collect())
    }

    /// `(1 + w)·ε̂(x_t | prompt) − w·ε̂(x_t | ∅)`.
    pub fn cfg_eps(&self, x_t: &Latent, t: usize, prompt: usize, guidance: GuidanceConfig) -> Result<Latent> {
        Latent::new(x_t.shape, self.cfg_raw(&x_t.values, t, prompt, guidance)?)
    }

    /// Deterministic DDIM-style integration from `x_T = eps_init` down to `x_0`.
    pub fn sample_ode(&self, eps_init: &Latent, prompt: usize, guidance: GuidanceConfig) -> Result<Latent> {
        let s = &self.schedule;
        let mut x = eps_init.values.clone();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "in initial noise".into(),
            });
        }
        for t in (1..=s.steps).rev() {
            let eps = self.cfg_raw(&x, t, prompt, guidance)?;
            let (a_t, a_prev) = (s.alpha_bars[t], s.alpha_bars[t - 1]);
            let sig_t = (1.0 - a_t).sqrt();
            let sig_prev = (1.0 - a_prev).sqrt();
            let (ra_t, ra_prev) = (a_t.sqrt(), a_prev.sqrt());
            for (xi, ei) in x.iter_mut().zip(&eps) {
                let x0_hat = (*xi - sig_t * ei) / ra_t;
                *xi = ra_prev * x0_hat + sig_prev * ei;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("in sampler state after step {t}"),
                });
            }
        }
        Latent::new(eps_init.shape, x)
    }
}
