//! Ranking and threshold metrics plus score-distribution overlap.
//!
//! Average precision is the mean, over positives, of the precision at each
//! positive's rank in the descending-score ordering. Equal scores keep their
//! input order. Precision with no predicted positives and recall with no
//! positives are reported as `None` rather than 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, stable for ties.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Predictions are positive when `score >= threshold`.
    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        Self::from_predictions(scores.iter().map(|&s| s >= threshold), labels.iter().copied())
    }

    pub fn from_predictions(pred: impl IntoIterator<Item = bool>, labels: impl IntoIterator<Item = bool>) -> Self {
        let mut c = Confusion::default();
        for (p, l) in pred.into_iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// Defined whenever precision and recall are; 2TP / (2TP + FP + FN).
    pub fn f1(&self) -> Option<f64> {
        self.precision()?;
        self.recall()?;
        Some(2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64)
    }

    pub fn prf(&self) -> Prf {
        Prf {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn prf_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Prf> {
    check_inputs(scores, labels)?;
    Ok(Confusion::at_threshold(scores, labels, threshold).prf())
}

/// P/R/F1 for hard predictions (baselines that emit booleans).
pub fn prf_hard(pred: &[bool], labels: &[bool]) -> Result<Prf> {
    if pred.len() != labels.len() {
        return Err(Error::Dimension {
            expected: format!("{} labels", pred.len()),
            got: format!("{}", labels.len()),
        });
    }
    Ok(Confusion::from_predictions(pred.iter().copied(), labels.iter().copied()).prf())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// One point per distinct score, thresholds descending (recall ascending).
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs at least one positive".into()));
    }
    let order = ranking(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(PrPoint {
            threshold: t,
            recall: tp as f64 / n_pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(points)
}

pub fn pr_curve_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("threshold,recall,precision\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.recall, p.precision);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub pr_curve: Vec<PrPoint>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: f64,
}

/// Full report for probabilistic scores. AP and the PR curve are omitted
/// (None / empty) when there are no positives.
pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let prf = prf_at_threshold(scores, labels, threshold)?;
    let (ap, curve) = if n_pos > 0 {
        (Some(average_precision(scores, labels)?), pr_curve(scores, labels)?)
    } else {
        (None, Vec::new())
    };
    Ok(EvalReport {
        ap,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        pr_curve: curve,
        n_pos,
        n_neg: labels.len() - n_pos,
        threshold,
    })
}

/// Report for hard predictions; AP degenerates to precision as there is no
/// ranking.
pub fn evaluate_hard(pred: &[bool], labels: &[bool]) -> Result<EvalReport> {
    let prf = prf_hard(pred, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    Ok(EvalReport {
        ap: prf.precision,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        pr_curve: Vec::new(),
        n_pos,
        n_neg: labels.len() - n_pos,
        threshold: 0.5,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    /// Density per bin: count / (n · bin_width).
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub coefficient: f64,
    pub a: Histogram,
    pub b: Histogram,
}

/// Overlap coefficient Σ min(densityA, densityB) · bin_width of two score
/// groups histogrammed over their joint range.
pub fn distribution_overlap(a: &[f64], b: &[f64], bins: usize) -> Result<Overlap> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("overlap needs two nonempty groups".into()));
    }
    if bins == 0 {
        return Err(Error::Spec("bins must be positive".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite score".into()));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let (bins, width) = if span > 0.0 { (bins, span / bins as f64) } else { (1, 1.0) };
    let hist = |xs: &[f64]| {
        let mut counts = vec![0usize; bins];
        for &x in xs {
            let i = if span > 0.0 { (((x - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[i] += 1;
        }
        let n = xs.len() as f64;
        let density = counts.iter().map(|&c| c as f64 / (n * width)).collect();
        Histogram {
            lo,
            bin_width: width,
            counts,
            density,
        }
    };
    let ha = hist(a);
    let hb = hist(b);
    let coefficient = ha
        .density
        .iter()
        .zip(&hb.density)
        .map(|(x, y)| x.min(*y) * width)
        .sum::<f64>()
        .min(1.0);
    Ok(Overlap {
        coefficient,
        a: ha,
        b: hb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let v = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        // single positive ranked last of 5
        let v = average_precision(&[0.9, 0.8, 0.7, 0.6, 0.1], &[false, false, false, false, true]).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
        assert!(matches!(average_precision(&[0.3], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ties_keep_input_order() {
        // positive first among equals -> rank 1
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn prf_examples() {
        let all = prf_at_threshold(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((all.precision, all.recall, all.f1), (Some(1.0), Some(1.0), Some(1.0)));
        let p = prf_at_threshold(&[0.6, 0.6, 0.4], &[true, false, true], 0.5).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (Some(0.5), Some(0.5), Some(0.5)));
        let none = prf_at_threshold(&[0.1, 0.2], &[true, false], 0.5).unwrap();
        assert_eq!(none.precision, None);
        assert_eq!(none.recall, Some(0.0));
        assert_eq!(none.f1, None);
        // boundary: score equal to threshold is positive
        let b = prf_at_threshold(&[0.5], &[true], 0.5).unwrap();
        assert_eq!(b.recall, Some(1.0));
    }

    #[test]
    fn curve_examples() {
        let pts = pr_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!(pts.iter().filter(|p| p.recall < 1.0 + 1e-12).take(2).all(|p| p.precision == 1.0));
        assert_eq!(pts.len(), 4);
        let pts = pr_curve(&[0.7, 0.7, 0.3], &[true, false, true]).unwrap();
        assert_eq!(
            pts,
            vec![
                PrPoint { threshold: 0.7, recall: 0.5, precision: 0.5 },
                PrPoint { threshold: 0.3, recall: 1.0, precision: 2.0 / 3.0 },
            ]
        );
    }

    #[test]
    fn overlap_examples() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert!((distribution_overlap(&xs, &xs, 20).unwrap().coefficient - 1.0).abs() < 1e-12);
        let ys: Vec<f64> = xs.iter().map(|x| x + 5.0).collect();
        assert_eq!(distribution_overlap(&xs, &ys, 20).unwrap().coefficient, 0.0);
        assert!(distribution_overlap(&[], &xs, 10).is_err());
        let c = distribution_overlap(&[1.0, 1.0], &[1.0], 10).unwrap();
        assert_eq!(c.coefficient, 1.0);
    }

    #[test]
    fn hard_predictions() {
        let r = evaluate_hard(&[true, false, true], &[true, true, false]).unwrap();
        assert_eq!(r.precision, Some(0.5));
        assert_eq!(r.recall, Some(0.5));
        assert_eq!(r.n_pos, 2);
    }
}
