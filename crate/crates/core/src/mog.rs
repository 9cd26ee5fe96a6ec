//! Equal-weight mixtures of diagonal Gaussians: closed-form moments,
//! uncertainty summaries, reparameterized sampling, and the KL regularizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, RngStream, Tensor, Var};

/// Floor inside logs of standard deviations and variances.
pub const LOG_EPS: f64 = 1e-12;

/// How text embeddings are drawn from a class mixture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// `N/K` draws from each component.
    #[default]
    Stratified,
    /// `N` draws from one Gaussian with the mixture's mean and variance.
    MomentMatched,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianComponent {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape("gaussian component", &[mu.len()], &[sigma.len()]));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// A class's mixture with its derived moments.
#[derive(Clone, Debug, PartialEq)]
pub struct MogDistribution {
    pub components: Vec<GaussianComponent>,
    pub mixture_mu: Vec<f64>,
    pub mixture_var: Vec<f64>,
    pub class_uncertainty: f64,
}

impl MogDistribution {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let mixture_mu = mog_mean(&components)?;
        let mixture_var = mog_variance(&components)?;
        if components
            .iter()
            .any(|c| c.sigma.iter().any(|&s| !(s >= 0.0)))
        {
            return Err(Error::input("component sigma must be >= 0"));
        }
        let sd: Vec<f64> = mixture_var.iter().map(|v| v.sqrt()).collect();
        let class_uncertainty = class_uncertainty(&sd);
        Ok(Self {
            components,
            mixture_mu,
            mixture_var,
            class_uncertainty,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mixture_mu.len()
    }

    pub fn mixture_sigma(&self) -> Vec<f64> {
        self.mixture_var.iter().map(|v| v.sqrt()).collect()
    }
}

fn check_components(components: &[GaussianComponent]) -> Result<usize> {
    let first = components
        .first()
        .ok_or_else(|| Error::input("mixture needs at least one component"))?;
    let d = first.dim();
    if components.iter().any(|c| c.dim() != d) {
        return Err(Error::input("components differ in dimension"));
    }
    Ok(d)
}

/// `(1/K) Σ_k μ_k`.
pub fn mog_mean(components: &[GaussianComponent]) -> Result<Vec<f64>> {
    let d = check_components(components)?;
    let k = components.len() as f64;
    Ok((0..d)
        .map(|j| components.iter().map(|c| c.mu[j]).sum::<f64>() / k)
        .collect())
}

/// `(1/K) Σ_k (μ_k² + σ_k²) − ((1/K) Σ_k μ_k)²`, floored at zero.
pub fn mog_variance(components: &[GaussianComponent]) -> Result<Vec<f64>> {
    let mean = mog_mean(components)?;
    let k = components.len() as f64;
    Ok(mean
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let second = components
                .iter()
                .map(|c| c.mu[j] * c.mu[j] + c.sigma[j] * c.sigma[j])
                .sum::<f64>()
                / k;
            (second - m * m).max(0.0)
        })
        .collect())
}

/// Geometric mean over dimensions of a standard-deviation vector.
pub fn class_uncertainty(mixture_sigma: &[f64]) -> f64 {
    if mixture_sigma.is_empty() {
        return 1.0;
    }
    let s: f64 = mixture_sigma.iter().map(|&x| (x + LOG_EPS).ln()).sum();
    (s / mixture_sigma.len() as f64).exp()
}

/// Geometric mean over classes of per-class uncertainties.
pub fn total_uncertainty(per_class: &[f64]) -> f64 {
    if per_class.is_empty() {
        return 1.0;
    }
    let s: f64 = per_class.iter().map(|&u| u.ln()).sum();
    (s / per_class.len() as f64).exp()
}

/// Draw `n` text embeddings from `dist`.
pub fn sample_prompts(
    dist: &MogDistribution,
    n: usize,
    mode: SamplingMode,
    rng: &mut RngStream,
) -> Result<Tensor> {
    validate_sample_count(n, dist.k(), mode)?;
    let noise = rng.normal_tensor(&[n, dist.dim()], 1.0);
    sample_with_noise(dist, &noise, mode)
}

pub(crate) fn validate_sample_count(n: usize, k: usize, mode: SamplingMode) -> Result<()> {
    if n == 0 {
        return Err(Error::param("sample count N must be >= 1"));
    }
    if mode == SamplingMode::Stratified && n % k != 0 {
        return Err(Error::param(format!(
            "stratified sampling needs N divisible by K (N={n}, K={k})"
        )));
    }
    Ok(())
}

/// Component used by sample row `i` of `n` under stratified sampling.
pub fn stratified_component(i: usize, n: usize, k: usize) -> usize {
    i / (n / k)
}

/// Reparameterized samples with caller-supplied standard-normal noise `[n × d]`.
pub fn sample_with_noise(dist: &MogDistribution, noise: &Tensor, mode: SamplingMode) -> Result<Tensor> {
    let (n, d) = (noise.outer(), noise.last_dim());
    if d != dist.dim() {
        return Err(Error::shape("sample_prompts", noise.shape(), &[dist.dim()]));
    }
    validate_sample_count(n, dist.k(), mode)?;
    let mixture_sigma = dist.mixture_sigma();
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let (mu, sigma) = match mode {
            SamplingMode::Stratified => {
                let c = &dist.components[stratified_component(i, n, dist.k())];
                (&c.mu, &c.sigma)
            }
            SamplingMode::MomentMatched => (&dist.mixture_mu, &mixture_sigma),
        };
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = mu[j] + noise.row(i)[j] * sigma[j];
        }
    }
    Ok(out)
}

/// `KL(N(μ, σ²) ‖ N(0, I))` for one diagonal Gaussian.
pub fn gaussian_kl_to_standard(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::input(format!("sigma must be > 0, got {s}")));
        }
        let v = s * s;
        kl += 0.5 * (m * m + v - v.ln() - 1.0);
    }
    Ok(kl)
}

/// Mean of the per-component KLs to the standard normal; an upper bound on
/// the mixture's KL by convexity.
pub fn kl_to_standard(components: &[GaussianComponent]) -> Result<f64> {
    check_components(components)?;
    let mut total = 0.0;
    for c in components {
        total += gaussian_kl_to_standard(&c.mu, &c.sigma)?;
    }
    Ok(total / components.len() as f64)
}

/// Differentiable mixture moments: rows of `mu`/`sigma` come in consecutive
/// groups of `k` components. Returns `(mean, variance)`, each
/// `[rows/k × d]`.
pub fn mixture_moments(g: &mut Graph, mu: Var, sigma: Var, k: usize) -> Result<(Var, Var)> {
    let rows = g.value(mu).outer();
    if k == 0 || rows % k != 0 || g.shape(mu) != g.shape(sigma) {
        return Err(Error::shape("mixture_moments", g.shape(mu), g.shape(sigma)));
    }
    let groups: Vec<Vec<usize>> = (0..rows / k).map(|i| (i * k..(i + 1) * k).collect()).collect();
    let mean = g.group_mean(mu, groups.clone())?;
    let mu2 = g.square(mu);
    let s2 = g.square(sigma);
    let raw = g.add(mu2, s2)?;
    let second = g.group_mean(raw, groups)?;
    let mean2 = g.square(mean);
    let var = g.sub(second, mean2)?;
    let var = g.clamp(var, 0.0, f64::INFINITY);
    Ok((mean, var))
}

/// Mean over rows of `½ Σ_j (μ² + σ² − log σ² − 1)`, given `log σ²` directly.
pub fn kl_to_standard_var(g: &mut Graph, mu: Var, sigma: Var, log_var: Var) -> Result<Var> {
    let mu2 = g.square(mu);
    let s2 = g.square(sigma);
    let a = g.add(mu2, s2)?;
    let a = g.sub(a, log_var)?;
    let a = g.add_scalar(a, -1.0);
    let per_row = g.sum_last(a);
    let m = g.mean(per_row);
    Ok(g.scale(m, 0.5))
}

/// `mu + noise ⊙ sigma`, with `noise` held constant.
pub fn reparameterize(g: &mut Graph, mu: Var, sigma: Var, noise: Tensor) -> Result<Var> {
    let eps = g.constant(noise);
    let scaled = g.mul(eps, sigma)?;
    g.add(mu, scaled)
}
