//! Uncertainty analyses over a set of evaluated scenes.

use serde::Serialize;

use super::config::TrainConfig;
use super::run::evaluate_detailed;
use crate::error::{Error, Result};
use crate::model::PplModel;
use crate::numcore::rng::streams;
use crate::numcore::{seeded_rng, ParamStore};
use crate::synth::Scene;

pub const PERMUTATIONS: usize = 10_000;
pub const BINS: usize = 10;
const MIN_SCENES: usize = 100;
const ANALYSIS_SEED: u64 = 0xa5a5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneRecord {
    pub n_classes_present: usize,
    pub total_uncertainty: f64,
    pub pixel_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecileBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub scenes: Vec<SceneRecord>,
    pub deciles: Vec<DecileBin>,
    /// `None` when either variable is constant.
    pub spearman_rho: Option<f64>,
    /// One-sided p-value for a positive correlation.
    pub p_value: Option<f64>,
    pub degenerate: bool,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman's ρ; `None` if either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Permutation p-value for ρ ≥ observed, with the add-one correction.
pub fn permutation_p_value(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Option<f64> {
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let observed = pearson(&rx, &ry)?;
    let mut rng = seeded_rng(seed, streams::ANALYSIS);
    let mut shuffled = ry.clone();
    let mut hits = 0usize;
    for _ in 0..permutations {
        rng.shuffle(&mut shuffled);
        if pearson(&rx, &shuffled).unwrap_or(0.0) >= observed - 1e-12 {
            hits += 1;
        }
    }
    Some((hits + 1) as f64 / (permutations + 1) as f64)
}

/// Ten equal-count bins by ascending uncertainty (earlier bins take the remainder).
pub fn decile_bins(records: &[SceneRecord]) -> Vec<DecileBin> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].total_uncertainty.total_cmp(&records[b].total_uncertainty));
    let n = records.len();
    let mut bins = Vec::with_capacity(BINS);
    let mut start = 0;
    for b in 0..BINS {
        let size = n / BINS + usize::from(b < n % BINS);
        let members = &order[start..start + size];
        start += size;
        if members.is_empty() {
            bins.push(DecileBin {
                lo: f64::NAN,
                hi: f64::NAN,
                count: 0,
                mean_accuracy: f64::NAN,
            });
            continue;
        }
        let acc = members.iter().map(|&i| records[i].pixel_accuracy).sum::<f64>() / size as f64;
        bins.push(DecileBin {
            lo: records[members[0]].total_uncertainty,
            hi: records[*members.last().unwrap()].total_uncertainty,
            count: size,
            mean_accuracy: acc,
        });
    }
    bins
}

/// Build a report from per-scene records.
pub fn report_from_records(scenes: Vec<SceneRecord>) -> UncertaintyReport {
    let u: Vec<f64> = scenes.iter().map(|s| s.total_uncertainty).collect();
    let c: Vec<f64> = scenes.iter().map(|s| s.n_classes_present as f64).collect();
    let rho = spearman(&u, &c);
    let p = rho.and_then(|_| permutation_p_value(&u, &c, PERMUTATIONS, ANALYSIS_SEED));
    UncertaintyReport {
        deciles: decile_bins(&scenes),
        spearman_rho: rho,
        p_value: p,
        degenerate: rho.is_none(),
        scenes,
    }
}

/// Evaluate `scenes` and correlate uncertainty with class count and accuracy.
pub fn analyze_uncertainty(
    model: &PplModel,
    params: &ParamStore,
    config: &TrainConfig,
    scenes: &[Scene],
) -> Result<UncertaintyReport> {
    if scenes.len() < MIN_SCENES {
        return Err(Error::input(format!(
            "analysis needs at least {MIN_SCENES} scenes, got {}",
            scenes.len()
        )));
    }
    let (_, per_scene) = evaluate_detailed(model, params, config, scenes)?;
    let records = scenes
        .iter()
        .zip(per_scene)
        .map(|(s, e)| SceneRecord {
            n_classes_present: s.n_classes_present,
            total_uncertainty: e.uncertainty,
            pixel_accuracy: e.accuracy,
        })
        .collect();
    Ok(report_from_records(records))
}

impl UncertaintyReport {
    /// Per-scene CSV with the summary as leading `#` comment lines.
    pub fn to_csv(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v}"));
        let mut out = format!(
            "# spearman_rho={}\n# p_value={}\n# degenerate={}\n",
            fmt(self.spearman_rho),
            fmt(self.p_value),
            self.degenerate
        );
        for (i, b) in self.deciles.iter().enumerate() {
            out.push_str(&format!(
                "# decile={i} lo={} hi={} count={} mean_accuracy={}\n",
                b.lo, b.hi, b.count, b.mean_accuracy
            ));
        }
        out.push_str("scene,n_classes_present,total_uncertainty,pixel_accuracy\n");
        for (i, s) in self.scenes.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{}\n",
                s.n_classes_present, s.total_uncertainty, s.pixel_accuracy
            ));
        }
        out
    }
}
