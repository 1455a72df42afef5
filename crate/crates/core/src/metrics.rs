//! Ranking and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TadaError};

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(TadaError::dim(
            "metric",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TadaError::Evaluation("non-finite score".into()));
    }
    Ok(())
}

/// Area under the ROC curve via average ranks: `P(s+ > s-) + P(s+ = s-)/2`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TadaError::UndefinedMetric(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps tied average ranks integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled average = i + j + 2
        let r2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if labels[k] {
                rank2_pos += r2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct score thresholds
/// taken from the highest down, without interpolation.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(TadaError::UndefinedMetric(
            "AUPRC needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Fraction of rows whose arg-max matches the target.
pub fn accuracy(probs: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(TadaError::Evaluation(format!(
            "{} predictions for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let hits = probs
        .iter()
        .zip(targets)
        .filter(|(p, &t)| argmax(p) == t)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest metric averaged over classes for which it is defined.
fn macro_ovr(
    probs: &[Vec<f64>],
    targets: &[usize],
    n_classes: usize,
    f: fn(&[f64], &[bool]) -> Result<f64>,
) -> Option<f64> {
    let mut vals = Vec::new();
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let labels: Vec<bool> = targets.iter().map(|&t| t == c).collect();
        if let Ok(v) = f(&scores, &labels) {
            vals.push(v);
        }
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn macro_auroc(probs: &[Vec<f64>], targets: &[usize], n_classes: usize) -> Option<f64> {
    macro_ovr(probs, targets, n_classes, auroc)
}

pub fn macro_auprc(probs: &[Vec<f64>], targets: &[usize], n_classes: usize) -> Option<f64> {
    macro_ovr(probs, targets, n_classes, auprc)
}

/// Metrics of one evaluated split. AUROC/AUPRC are absent when undefined
/// (for example a split holding a single class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: f64,
    pub loss: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Binary tasks score the positive class; otherwise one-vs-rest macro averages.
    pub fn from_predictions(
        probs: &[Vec<f64>],
        targets: &[usize],
        n_classes: usize,
        loss: f64,
        n_samples: usize,
    ) -> Result<Self> {
        let accuracy = accuracy(probs, targets)?;
        let (auroc, auprc) = if n_classes == 2 {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            let labels: Vec<bool> = targets.iter().map(|&t| t == 1).collect();
            (auroc(&scores, &labels).ok(), auprc(&scores, &labels).ok())
        } else {
            (
                macro_auroc(probs, targets, n_classes),
                macro_auprc(probs, targets, n_classes),
            )
        };
        Ok(MetricsReport {
            auroc,
            auprc,
            accuracy,
            loss,
            n_samples,
        })
    }

    pub const CSV_HEADER: &'static str = "auroc,auprc,accuracy,loss,n_samples";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        format!(
            "{},{},{},{},{}",
            opt(self.auroc),
            opt(self.auprc),
            self.accuracy,
            self.loss,
            self.n_samples
        )
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Per-metric mean ± std across runs; a metric is skipped if any run lacks it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auroc: Option<MeanStd>,
    pub auprc: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
}

impl Aggregate {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let collect = |f: fn(&MetricsReport) -> Option<f64>| -> Option<MeanStd> {
            let v: Option<Vec<f64>> = reports.iter().map(f).collect();
            v.and_then(|v| MeanStd::of(&v))
        };
        Aggregate {
            auroc: collect(|r| r.auroc),
            auprc: collect(|r| r.auprc),
            accuracy: collect(|r| Some(r.accuracy)),
        }
    }

    pub fn summary(&self) -> String {
        let show = |name: &str, m: Option<MeanStd>| m.map(|m| format!("{name} {m}"));
        [
            show("auroc", self.auroc),
            show("auprc", self.auprc),
            show("accuracy", self.accuracy),
        ]
        .into_iter()
        .flatten()
        .collect::<Vec<_>>()
        .join(", ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `P(s+ > s-) + P(tie)/2` by enumerating every positive/negative pair.
    fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num2 = 0u64;
        let mut pairs = 0u64;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        num2 += 2;
                    } else if scores[i] == scores[j] {
                        num2 += 1;
                    }
                }
            }
        }
        num2 as f64 / (2 * pairs) as f64
    }

    /// Precision/recall at every distinct threshold, highest first.
    fn auprc_sweep(scores: &[f64], labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count();
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev_tp = 0;
        let mut ap = 0.0;
        for th in thresholds {
            let tp = (0..scores.len())
                .filter(|&i| scores[i] >= th && labels[i])
                .count();
            let fp = (0..scores.len())
                .filter(|&i| scores[i] >= th && !labels[i])
                .count();
            if tp > prev_tp {
                ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
                prev_tp = tp;
            }
        }
        ap
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(TadaError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let scores = [0.9, 0.8, 0.7, 0.6, 0.1];
        let labels = [false, false, false, false, true];
        assert!((auprc(&scores, &labels).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(
            auprc(&[0.1], &[false]),
            Err(TadaError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn constant_scores_are_chance() {
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert_eq!(auroc(&[0.3; 10], &labels).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_and_report() {
        let probs = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4]];
        assert!((accuracy(&probs, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let r = MetricsReport::from_predictions(&probs, &[0, 1, 1], 2, 0.5, 3).unwrap();
        for v in [r.auroc.unwrap(), r.auprc.unwrap(), r.accuracy] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn aggregate_mean_std() {
        let m = MeanStd::of(&[0.8, 0.9, 1.0]).unwrap();
        assert!((m.mean - 0.9).abs() < 1e-15);
        assert!((m.std - 0.1).abs() < 1e-12);
        assert_eq!(format!("{m}"), "0.900 ± 0.100");
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=8).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..5).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count((scores, labels) in instance()) {
            let pos = labels.iter().filter(|&&l| l).count();
            prop_assume!(pos > 0 && pos < labels.len());
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc_pairs(&scores, &labels));
        }

        #[test]
        fn auprc_matches_sweep((scores, labels) in instance()) {
            prop_assume!(labels.iter().any(|&l| l));
            prop_assert_eq!(auprc(&scores, &labels).unwrap(), auprc_sweep(&scores, &labels));
        }

        #[test]
        fn auroc_monotone_invariant((scores, labels) in instance()) {
            let pos = labels.iter().filter(|&&l| l).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&moved, &labels).unwrap());
        }
    }
}
