//! Monte-Carlo and quadrature checks of the closed-form mixture statistics.

use crate::error::Result;
use crate::mog::{gaussian_kl_to_standard, mog_mean, mog_variance, sample_prompts, GaussianComponent, MogDistribution, SamplingMode};
use crate::numcore::rng::streams;
use crate::numcore::{seeded_rng, RngStream};

pub const MIXTURES: usize = 20;
/// Divisible by every K in [`MIXTURE_KS`].
pub const MOMENT_SAMPLES: usize = 1_000_020;
pub const MIXTURE_KS: [usize; 4] = [1, 2, 3, 5];
pub const MOMENT_TOLERANCE: f64 = 0.01;
pub const KL_TOLERANCE: f64 = 1e-3;
const DIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub k: usize,
    pub mean_rel_err: f64,
    pub var_rel_err: f64,
}

impl MomentReport {
    pub fn passed(&self) -> bool {
        self.mean_rel_err <= MOMENT_TOLERANCE && self.var_rel_err <= MOMENT_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlReport {
    pub mu: f64,
    pub sigma: f64,
    pub closed_form: f64,
    pub numeric: f64,
}

impl KlReport {
    pub fn abs_err(&self) -> f64 {
        (self.closed_form - self.numeric).abs()
    }

    pub fn passed(&self) -> bool {
        self.abs_err() <= KL_TOLERANCE
    }
}

/// A mixture whose mean stays at least 0.5 away from zero in every
/// dimension, so relative errors are meaningful.
pub fn random_mixture(k: usize, rng: &mut RngStream) -> Result<MogDistribution> {
    let center: Vec<f64> = (0..DIM)
        .map(|_| {
            let m = 1.0 + rng.uniform();
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    let comps = (0..k)
        .map(|_| {
            let mu = center.iter().map(|c| c + 0.5 * (2.0 * rng.uniform() - 1.0)).collect();
            let sigma = (0..DIM).map(|_| 0.2 + 0.8 * rng.uniform()).collect();
            GaussianComponent::new(mu, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    MogDistribution::new(comps)
}

/// Compare closed-form mixture moments with the moments of `samples`
/// stratified draws.
pub fn check_moments(dist: &MogDistribution, samples: usize, rng: &mut RngStream) -> Result<MomentReport> {
    let z = sample_prompts(dist, samples, SamplingMode::Stratified, rng)?;
    let mean = mog_mean(&dist.components)?;
    let var = mog_variance(&dist.components)?;
    let n = samples as f64;
    let mut mean_err = 0.0f64;
    let mut var_err = 0.0f64;
    for j in 0..dist.dim() {
        let m = (0..samples).map(|i| z.row(i)[j]).sum::<f64>() / n;
        let v = (0..samples).map(|i| (z.row(i)[j] - m).powi(2)).sum::<f64>() / n;
        mean_err = mean_err.max((m - mean[j]).abs() / mean[j].abs());
        var_err = var_err.max((v - var[j]).abs() / var[j]);
    }
    Ok(MomentReport {
        k: dist.k(),
        mean_rel_err: mean_err,
        var_rel_err: var_err,
    })
}

/// `mixtures` random mixtures cycling through K ∈ {1, 2, 3, 5}.
pub fn moment_suite(mixtures: usize, samples: usize, seed: u64) -> Result<Vec<MomentReport>> {
    let mut rng = seeded_rng(seed, streams::ANALYSIS);
    (0..mixtures)
        .map(|i| {
            let dist = random_mixture(MIXTURE_KS[i % MIXTURE_KS.len()], &mut rng)?;
            check_moments(&dist, samples, &mut rng)
        })
        .collect()
}

/// Composite Simpson's rule with `intervals` (rounded up to even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = (intervals.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `∫ p log(p/q)` for `p = N(μ, σ²)`, `q = N(0, 1)`, by quadrature over ±12σ.
pub fn kl_by_quadrature(mu: f64, sigma: f64) -> f64 {
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let integrand = |x: f64| {
        let zp = (x - mu) / sigma;
        let log_p = ln_norm - sigma.ln() - 0.5 * zp * zp;
        let log_q = ln_norm - 0.5 * x * x;
        log_p.exp() * (log_p - log_q)
    };
    simpson(integrand, mu - 12.0 * sigma, mu + 12.0 * sigma, 20_000)
}

pub fn check_kl(mu: f64, sigma: f64) -> Result<KlReport> {
    Ok(KlReport {
        mu,
        sigma,
        closed_form: gaussian_kl_to_standard(&[mu], &[sigma])?,
        numeric: kl_by_quadrature(mu, sigma),
    })
}

/// The worked case `N(0, 2) ‖ N(0, 1)` followed by `pairs − 1` random ones.
pub fn kl_suite(pairs: usize, seed: u64) -> Result<Vec<KlReport>> {
    let mut rng = seeded_rng(seed, streams::ANALYSIS);
    let mut out = vec![check_kl(0.0, 2f64.sqrt())?];
    for _ in 1..pairs {
        let mu = 3.0 * (2.0 * rng.uniform() - 1.0);
        let sigma = 0.1 + 2.9 * rng.uniform();
        out.push(check_kl(mu, sigma)?);
    }
    Ok(out)
}
