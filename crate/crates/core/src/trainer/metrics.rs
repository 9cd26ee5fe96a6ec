use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "step,loss_total,loss_task,loss_pixel,loss_prob,loss_div,loss_kl,acc,miou,uncertainty";

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_pixel: f64,
    pub loss_prob: f64,
    pub loss_div: f64,
    pub loss_kl: f64,
    pub acc: f64,
    pub miou: f64,
    /// Mean over images of `log ū²`, with `ū` the total uncertainty.
    pub uncertainty: f64,
}

impl Metrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_task,
            self.loss_pixel,
            self.loss_prob,
            self.loss_div,
            self.loss_kl,
            self.acc,
            self.miou,
            self.uncertainty
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.loss_total,
            self.loss_task,
            self.loss_pixel,
            self.loss_prob,
            self.loss_div,
            self.loss_kl,
            self.acc,
            self.miou,
            self.uncertainty,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Pixel confusion counts, `truth × prediction`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: &[usize], pred: &[usize]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t * self.classes + p] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.classes;
        (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let truth: u64 = (0..n).map(|p| self.counts[c * n + p]).sum();
                let pred: u64 = (0..n).map(|t| self.counts[t * n + c]).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in truth or prediction.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    /// Frequency of the most common true class.
    pub fn majority_fraction(&self) -> f64 {
        let n = self.classes;
        let total = self.total().max(1) as f64;
        (0..n)
            .map(|c| (0..n).map(|p| self.counts[c * n + p]).sum::<u64>() as f64 / total)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded_rng;

    #[test]
    fn perfect_predictions() {
        let mut c = Confusion::new(4);
        let t = vec![0, 1, 2, 2, 3, 0];
        c.add(&t, &t);
        assert_eq!(c.accuracy(), 1.0);
        assert_eq!(c.mean_iou(), 1.0);
    }

    #[test]
    fn constant_prediction_iou() {
        let mut c = Confusion::new(6);
        // truth: 6 of class 0, 2 of class 1, 2 of class 3; predict class 0 everywhere
        let t = vec![0, 0, 0, 0, 0, 0, 1, 1, 3, 3];
        c.add(&t, &vec![0; 10]);
        let iou = c.iou();
        assert_eq!(iou[0], Some(0.6));
        assert_eq!(iou[1], Some(0.0));
        assert_eq!(iou[2], None);
        assert_eq!(iou[3], Some(0.0));
        // classes 2, 4, 5 are absent from both and excluded
        assert!((c.mean_iou() - 0.6 / 3.0).abs() < 1e-15);
        assert!((c.accuracy() - c.majority_fraction()).abs() < 1e-15);
    }

    #[test]
    fn uniform_random_predictions_score_one_over_c() {
        let mut rng = seeded_rng(3, 9);
        let mut c = Confusion::new(6);
        let t: Vec<usize> = (0..500 * 64).map(|i| i % 6).collect();
        let p: Vec<usize> = (0..t.len()).map(|_| rng.int_inclusive(0, 5)).collect();
        c.add(&t, &p);
        assert!((c.accuracy() - 1.0 / 6.0).abs() < 0.02);
    }

    #[test]
    fn csv_has_fixed_header() {
        let m = Metrics {
            step: 3,
            loss_total: 1.5,
            loss_task: 0.25,
            loss_pixel: 1.0,
            loss_prob: 0.5,
            loss_div: 0.0,
            loss_kl: 2.0,
            acc: 0.75,
            miou: 0.5,
            uncertainty: -1.0,
        };
        assert_eq!(metrics_csv(&[m]), format!("{CSV_HEADER}\n3,1.5,0.25,1,0.5,0,2,0.75,0.5,-1\n"));
    }
}
