//! Accuracy, binary AUROC and macro F1.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric used for reporting and model selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Auroc,
    F1Macro,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auroc => "auroc",
            Metric::F1Macro => "f1_macro",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "auroc" => Ok(Metric::Auroc),
            "f1_macro" | "f1" => Ok(Metric::F1Macro),
            _ => Err(Error::Argument(format!("unknown metric {s:?} (accuracy, auroc, f1_macro)"))),
        }
    }
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!(
            "accuracy: {} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mann-Whitney estimate of `P(s+ > s-) + P(s+ = s-) / 2`, computed from
/// mid-ranks. Errors when either class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "auroc: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Argument(format!("auroc: score {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based mid-rank of the tie block i..=j
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn class_stats(tp: usize, fp: usize, fneg: usize) -> ClassStats {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassStats {
        precision,
        recall,
        f1,
        support: tp + fneg,
    }
}

/// Per-class statistics for single-label predictions.
pub fn per_class_single(pred: &[usize], truth: &[usize], class_count: usize) -> Result<Vec<ClassStats>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Argument(format!(
            "f1: need equal, non-empty inputs (got {} and {})",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= class_count) {
        return Err(Error::Argument(format!("label {c} out of range for {class_count} classes")));
    }
    Ok((0..class_count)
        .map(|c| {
            let tp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count();
            let fp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t != c).count();
            let fneg = pred.iter().zip(truth).filter(|(&p, &t)| p != c && t == c).count();
            class_stats(tp, fp, fneg)
        })
        .collect())
}

/// Per-class statistics for multi-label scores thresholded at `threshold`.
pub fn per_class_multi(scores: &[Vec<f64>], truth: &[Vec<bool>], threshold: f64) -> Result<Vec<ClassStats>> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::Argument(format!(
            "f1: need equal, non-empty inputs (got {} and {})",
            scores.len(),
            truth.len()
        )));
    }
    let c = truth[0].len();
    if scores.iter().any(|s| s.len() != c) || truth.iter().any(|t| t.len() != c) {
        return Err(Error::Argument("f1: ragged multi-label rows".into()));
    }
    Ok((0..c)
        .map(|k| {
            let (mut tp, mut fp, mut fneg) = (0, 0, 0);
            for (s, t) in scores.iter().zip(truth) {
                match (s[k] >= threshold, t[k]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            class_stats(tp, fp, fneg)
        })
        .collect())
}

/// Predictions for [`f1_macro`].
pub enum F1Input<'a> {
    Single { pred: &'a [usize], truth: &'a [usize] },
    Multi { scores: &'a [Vec<f64>], truth: &'a [Vec<bool>], threshold: f64 },
}

/// Unweighted mean of per-class F1; a class with `P + R = 0` scores 0.
pub fn f1_macro(input: F1Input<'_>, class_count: usize) -> Result<f64> {
    let stats = match input {
        F1Input::Single { pred, truth } => per_class_single(pred, truth, class_count)?,
        F1Input::Multi { scores, truth, threshold } => per_class_multi(scores, truth, threshold)?,
    };
    if stats.is_empty() {
        return Err(Error::Argument("f1 over zero classes".into()));
    }
    Ok(stats.iter().map(|s| s.f1).sum::<f64>() / stats.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub f1_macro: f64,
    pub per_class: Vec<ClassStats>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn metric(&self, m: Metric) -> Result<f64> {
        match m {
            Metric::Accuracy => Ok(self.accuracy),
            Metric::F1Macro => Ok(self.f1_macro),
            Metric::Auroc => self
                .auroc
                .ok_or_else(|| Error::UndefinedMetric("AUROC is only defined for binary single-label tasks with both classes present".into())),
        }
    }

    /// Tab-delimited summary followed by the per-class table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric\tvalue\n");
        out.push_str(&format!("n_samples\t{}\n", self.n_samples));
        out.push_str(&format!("accuracy\t{}\n", self.accuracy));
        match self.auroc {
            Some(a) => out.push_str(&format!("auroc\t{a}\n")),
            None => out.push_str("auroc\tNA\n"),
        }
        out.push_str(&format!("f1_macro\t{}\n", self.f1_macro));
        out.push('\n');
        out.push_str("class\tprecision\trecall\tf1\tsupport\n");
        for (c, s) in self.per_class.iter().enumerate() {
            out.push_str(&format!("{c}\t{}\t{}\t{}\t{}\n", s.precision, s.recall, s.f1, s.support));
        }
        out
    }

    /// One-line JSON record.
    pub fn to_record(&self) -> String {
        let mut s = serde_json::to_string(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes `<stem>.tsv` and `<stem>.jsonl`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let tsv = stem.with_extension("tsv");
        let rec = stem.with_extension("jsonl");
        std::fs::write(&tsv, self.to_table()).map_err(|e| Error::io(&tsv, e))?;
        std::fs::write(&rec, self.to_record()).map_err(|e| Error::io(&rec, e))
    }
}
