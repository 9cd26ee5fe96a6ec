//! Pixel-text scoring and the training objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mog::LOG_EPS;
use crate::numcore::graph::softmax_rows;
use crate::numcore::{Graph, Tensor, Var};

/// Per-position class probabilities, `[positions × C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub probs: Tensor,
}

impl ScoreMap {
    pub fn classes(&self) -> usize {
        self.probs.last_dim()
    }

    pub fn positions(&self) -> usize {
        self.probs.outer()
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.positions())
            .map(|i| (self.probs.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }
}

/// Weights of the total objective and the similarity temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1e-5,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Constraint("tau > 0 required".into()));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Constraint("alpha >= 0 and beta >= 0 required".into()));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// `softmax_c(feat[p] · class_embs[c] / tau)`.
pub fn pixel_text_scores(feat: &Tensor, class_embs: &Tensor, tau: f64) -> Result<ScoreMap> {
    check_tau(tau)?;
    let mut g = Graph::new();
    let f = g.constant(feat.clone());
    let e = g.constant(class_embs.clone());
    let logits = g.batch_matmul_nt(f, e, 1)?;
    let probs = g.softmax(logits, tau)?;
    Ok(ScoreMap {
        probs: g.value(probs).clone(),
    })
}

fn check_labels(labels: &[usize], positions: usize, classes: usize) -> Result<()> {
    if labels.len() != positions {
        return Err(Error::shape("pixel_loss", &[positions], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!("label {bad} out of range [0, {classes})")));
    }
    Ok(())
}

/// Mean over positions of `−log probs[p, labels[p]]`.
pub fn pixel_loss(scores: &ScoreMap, labels: &[usize]) -> Result<f64> {
    check_labels(labels, scores.positions(), scores.classes())?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(p, &l)| -scores.probs.row(p)[l].max(crate::numcore::graph::LOG_FLOOR).ln())
        .sum();
    Ok(total / labels.len().max(1) as f64)
}

/// Monte-Carlo class probabilities: average of the per-sample score maps.
///
/// `sampled_embs` is `[N × C × d]` and already L2-normalized.
pub fn mc_predict(feat: &Tensor, sampled_embs: &Tensor, tau: f64) -> Result<ScoreMap> {
    check_tau(tau)?;
    if sampled_embs.ndim() != 3 {
        return Err(Error::shape("mc_predict", sampled_embs.shape(), &[0, 0, 0]));
    }
    let (n, c, d) = (sampled_embs.shape()[0], sampled_embs.shape()[1], sampled_embs.shape()[2]);
    if n == 0 {
        return Err(Error::param("mc_predict needs N >= 1 samples"));
    }
    if feat.last_dim() != d {
        return Err(Error::shape("mc_predict", feat.shape(), sampled_embs.shape()));
    }
    let positions = feat.outer();
    let mut acc = Tensor::zeros(&[positions, c]);
    let mut logits = Tensor::zeros(&[positions, c]);
    for s in 0..n {
        let embs = &sampled_embs.data()[s * c * d..(s + 1) * c * d];
        crate::numcore::tensor::gemm(positions, d, c, feat.data(), false, embs, true, 0.0, logits.data_mut());
        let p = softmax_rows(&logits, tau);
        for (a, b) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    acc.data_mut().iter_mut().for_each(|x| *x *= inv);
    Ok(ScoreMap { probs: acc })
}

/// Class-level log-variance: mean over dimensions of `log(σ_j² + ε)`.
pub fn class_log_variance(mixture_sigma: &[f64]) -> f64 {
    let n = mixture_sigma.len().max(1) as f64;
    mixture_sigma.iter().map(|s| (s * s + LOG_EPS).ln()).sum::<f64>() / n
}

/// Uncertainty-weighted pixel loss:
/// `l_pixel / G + (1/2C) Σ_c log s_c²`, with `G = (Π_c s_c²)^{1/C}`.
pub fn prob_pixel_loss(l_pixel: f64, mixture_sigmas: &[Vec<f64>]) -> f64 {
    let c = mixture_sigmas.len().max(1) as f64;
    let log_g = mixture_sigmas.iter().map(|s| class_log_variance(s)).sum::<f64>() / c;
    l_pixel * (-log_g).exp() + 0.5 * log_g
}

/// `l_task + l_prob + α·l_div + β·l_kl`.
pub fn total_loss(l_task: f64, l_prob: f64, l_div: f64, l_kl: f64, weights: &LossWeights) -> f64 {
    l_task + l_prob + weights.alpha * l_div + weights.beta * l_kl
}

/// Single-prompt deterministic objective: the pixel loss of the plain score map.
pub fn deterministic_baseline_loss(feat: &Tensor, class_embs: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    pixel_loss(&pixel_text_scores(feat, class_embs, tau)?, labels)
}

/// Differentiable Monte-Carlo probabilities.
///
/// `feat` is `[B·P × d]`; `samples` is `[B·N·C × d]` ordered (image, sample,
/// class). Returns `[B·P × C]`, the average over samples of the per-sample
/// softmax.
pub fn mc_scores_var(g: &mut Graph, feat: Var, samples: Var, batch: usize, n: usize, tau: f64) -> Result<Var> {
    let rows = g.value(feat).outer();
    let srows = g.value(samples).outer();
    if batch == 0 || n == 0 || rows % batch != 0 || srows % (batch * n) != 0 {
        return Err(Error::shape("mc_scores", g.shape(feat), g.shape(samples)));
    }
    let positions = rows / batch;
    let classes = srows / (batch * n);
    let idx = (0..batch)
        .flat_map(|b| (0..n).flat_map(move |_| (0..positions).map(move |p| b * positions + p)))
        .collect();
    let tiled = g.gather(feat, idx)?;
    let logits = g.batch_matmul_nt(tiled, samples, batch * n)?;
    let probs = g.softmax(logits, tau)?;
    let groups = (0..batch)
        .flat_map(|b| (0..positions).map(move |p| (0..n).map(|s| (b * n + s) * positions + p).collect()))
        .collect();
    let avg = g.group_mean(probs, groups)?;
    debug_assert_eq!(g.value(avg).last_dim(), classes);
    Ok(avg)
}

/// Differentiable uncertainty-weighted pixel loss averaged over images.
///
/// `nll` is `[B]`; `mixture_var` is `[B·C × d]`. Each image is weighted by
/// its own geometric-mean class variance.
pub fn prob_loss_var(g: &mut Graph, nll: Var, mixture_var: Var, batch: usize) -> Result<Var> {
    let rows = g.value(mixture_var).outer();
    if batch == 0 || rows % batch != 0 || g.value(nll).len() != batch {
        return Err(Error::shape("prob_loss", g.shape(nll), g.shape(mixture_var)));
    }
    let lv = g.add_scalar(mixture_var, LOG_EPS);
    let lv = g.log(lv);
    let class_log_var = g.mean_last(lv);
    let class_log_var = g.reshape(class_log_var, &[batch, rows / batch])?;
    let log_g = g.mean_last(class_log_var);
    let neg = g.scale(log_g, -1.0);
    let inv_g = g.exp(neg);
    let nll = g.reshape(nll, &[batch])?;
    let weighted = g.mul(nll, inv_g)?;
    let half = g.scale(log_g, 0.5);
    let per_image = g.add(weighted, half)?;
    Ok(g.mean(per_image))
}

/// Per-image mean negative log-likelihood, `[B]`, from probabilities
/// `[B·P × C]` and labels.
pub fn nll_per_image(g: &mut Graph, probs: Var, labels: &[usize], batch: usize) -> Result<Var> {
    let rows = g.value(probs).outer();
    check_labels(labels, rows, g.value(probs).last_dim())?;
    let picked = g.pick(probs, labels.to_vec())?;
    let logp = g.log(picked);
    let logp = g.reshape(logp, &[batch, rows / batch])?;
    let m = g.mean_last(logp);
    Ok(g.scale(m, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded_rng;

    fn unit_rows(mut t: Tensor) -> Tensor {
        for r in 0..t.outer() {
            let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            t.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        t
    }

    #[test]
    fn identical_embeddings_give_uniform_scores() {
        let mut rng = seeded_rng(1, 0);
        let feat = unit_rows(rng.normal_tensor(&[5, 4], 1.0));
        let e = unit_rows(Tensor::from_rows(&vec![vec![1.0, 2.0, 0.0, 1.0]; 3]));
        let s = pixel_text_scores(&feat, &e, 0.07).unwrap();
        for &p in s.probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_embedding_dominates_at_low_temperature() {
        let mut rng = seeded_rng(2, 0);
        let e = unit_rows(rng.normal_tensor(&[4, 6], 1.0));
        let feat = Tensor::from_rows(&[e.row(2).to_vec()]);
        let s = pixel_text_scores(&feat, &e, 1e-3).unwrap();
        assert!(s.probs.row(0)[2] > 0.999);
    }

    #[test]
    fn scores_match_composition_oracle() {
        let mut rng = seeded_rng(3, 0);
        let feat = unit_rows(rng.normal_tensor(&[7, 5], 1.0));
        let e = unit_rows(rng.normal_tensor(&[3, 5], 1.0));
        let s = pixel_text_scores(&feat, &e, 0.3).unwrap();
        for p in 0..7 {
            let logits: Vec<f64> = (0..3)
                .map(|c| (0..5).map(|j| feat.row(p)[j] * e.row(c)[j]).sum::<f64>() / 0.3)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..3 {
                assert!((s.probs.row(p)[c] - logits[c].exp() / z).abs() < 1e-12);
            }
        }
        assert!(s.max_row_sum_error() < 1e-12);
        assert!(pixel_text_scores(&feat, &e, 0.0).is_err());
    }

    #[test]
    fn pixel_loss_examples() {
        let uniform = ScoreMap {
            probs: Tensor::full(&[4, 5], 0.2),
        };
        assert!((pixel_loss(&uniform, &[0, 1, 4, 2]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let onehot = ScoreMap {
            probs: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        };
        assert_eq!(pixel_loss(&onehot, &[0, 1]).unwrap(), 0.0);
        assert!(matches!(pixel_loss(&onehot, &[0, 2]), Err(Error::Input(_))));
    }

    #[test]
    fn pixel_loss_matches_loop_oracle() {
        let mut rng = seeded_rng(4, 0);
        let feat = unit_rows(rng.normal_tensor(&[9, 4], 1.0));
        let e = unit_rows(rng.normal_tensor(&[3, 4], 1.0));
        let s = pixel_text_scores(&feat, &e, 0.5).unwrap();
        let labels: Vec<usize> = (0..9).map(|i| (i * 7) % 3).collect();
        let mut want = 0.0;
        for p in 0..9 {
            want -= s.probs.row(p)[labels[p]].ln();
        }
        want /= 9.0;
        assert!((pixel_loss(&s, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn mc_predict_degenerate_average() {
        let mut rng = seeded_rng(5, 0);
        let feat = unit_rows(rng.normal_tensor(&[6, 4], 1.0));
        let e = unit_rows(rng.normal_tensor(&[3, 4], 1.0));
        let mut stacked = Vec::new();
        for _ in 0..4 {
            stacked.extend_from_slice(e.data());
        }
        let samples = Tensor::new(vec![4, 3, 4], stacked).unwrap();
        let mc = mc_predict(&feat, &samples, 0.1).unwrap();
        let single = pixel_text_scores(&feat, &e, 0.1).unwrap();
        assert!(mc.probs.max_abs_diff(&single.probs) < 1e-14);
        assert!(mc_predict(&feat, &Tensor::zeros(&[0, 3, 4]), 0.1).is_err());
    }

    #[test]
    fn prob_loss_examples() {
        assert!((prob_pixel_loss(0.7, &[vec![1.0; 4], vec![1.0; 4]]) - 0.7).abs() < 1e-11);
        // C=1, s² = 4
        let v = prob_pixel_loss(2.0, &[vec![2.0; 3]]);
        assert!((v - 1.19315).abs() < 1e-5, "{v}");
        // scaling s² by λ
        let base = [vec![0.5, 1.5], vec![0.8, 2.0]];
        let lam: f64 = 3.0;
        let scaled: Vec<Vec<f64>> = base.iter().map(|s| s.iter().map(|x| x * lam.sqrt()).collect()).collect();
        let l = 1.3;
        let log_g = base.iter().map(|s| class_log_variance(s)).sum::<f64>() / 2.0;
        let want = l / (log_g.exp() * lam) + 0.5 * (log_g + lam.ln());
        assert!((prob_pixel_loss(l, &scaled) - want).abs() < 1e-9);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            tau: 0.07,
        };
        assert_eq!(total_loss(1.0, 2.0, 5.0, 7.0, &w), 3.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &LossWeights::default()), 0.0);
        let w = LossWeights {
            alpha: 0.1,
            beta: 1e-5,
            tau: 0.07,
        };
        assert!((total_loss(1.0, 2.0, 3.0, 4.0, &w) - 3.30004).abs() < 1e-12);
    }

    #[test]
    fn baseline_is_composition() {
        let mut rng = seeded_rng(6, 0);
        let feat = unit_rows(rng.normal_tensor(&[8, 4], 1.0));
        let e = unit_rows(rng.normal_tensor(&[3, 4], 1.0));
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let a = deterministic_baseline_loss(&feat, &e, &labels, 0.07).unwrap();
        let b = pixel_loss(&pixel_text_scores(&feat, &e, 0.07).unwrap(), &labels).unwrap();
        assert_eq!(a, b);
        let same = unit_rows(Tensor::full(&[3, 4], 1.0));
        let u = deterministic_baseline_loss(&feat, &same, &labels, 0.07).unwrap();
        assert!((u - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mc_scores_var_matches_plain_mc_predict() {
        let mut rng = seeded_rng(7, 0);
        let (b, n, c, p, d) = (2, 3, 4, 5, 6);
        let feat = unit_rows(rng.normal_tensor(&[b * p, d], 1.0));
        let samples = unit_rows(rng.normal_tensor(&[b * n * c, d], 1.0));
        let mut g = Graph::new();
        let fv = g.constant(feat.clone());
        let sv = g.constant(samples.clone());
        let avg = mc_scores_var(&mut g, fv, sv, b, n, 0.2).unwrap();
        for img in 0..b {
            let f = Tensor::new(vec![p, d], feat.data()[img * p * d..(img + 1) * p * d].to_vec()).unwrap();
            let s = Tensor::new(vec![n, c, d], samples.data()[img * n * c * d..(img + 1) * n * c * d].to_vec()).unwrap();
            let want = mc_predict(&f, &s, 0.2).unwrap();
            for q in 0..p {
                for k in 0..c {
                    assert!((g.value(avg).row(img * p + q)[k] - want.probs.row(q)[k]).abs() < 1e-12);
                }
            }
        }
    }
}
