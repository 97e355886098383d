//! ROC-AUC via midrank Mann–Whitney statistics, macro-averaging for
//! multi-label tasks, and the log-linear convergence fit used by the
//! ablation harness.

use crate::error::{Error, Result};
use serde::Serialize;

/// Mann–Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counted 0.5. O(M log M) with midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data("roc_auc: scores/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassAuc);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks (1-based); tied scores share the average of their ranks
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // average of ranks i+1..=j+1
        for &ix in &idx[i..=j] {
            if labels[ix] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Quadratic-time pair enumeration; the independent oracle for `roc_auc`.
pub fn roc_auc_pair_count(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassAuc);
    }
    let mut total = 0.0f64;
    for (sp, lp) in scores.iter().zip(labels) {
        if *lp != 1 {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if *ln != 0 {
                continue;
            }
            total += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    /// Per-class AUC; None for classes excluded as degenerate.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over non-excluded classes (plain AUC for binary).
    pub macro_auc: f64,
    /// Indices of excluded classes.
    pub excluded: Vec<usize>,
    pub samples: usize,
}

/// Macro-average AUC over per-class (scores, labels) lists. Degenerate
/// classes (single label value) are excluded and flagged.
pub fn macro_auc(per_class: &[(Vec<f64>, Vec<u8>)]) -> Result<MetricReport> {
    if per_class.is_empty() {
        return Err(Error::Data("macro_auc: no classes".into()));
    }
    let mut per = Vec::with_capacity(per_class.len());
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    let mut used = 0usize;
    for (c, (scores, labels)) in per_class.iter().enumerate() {
        match roc_auc(scores, labels) {
            Ok(auc) => {
                per.push(Some(auc));
                sum += auc;
                used += 1;
            }
            Err(Error::SingleClassAuc) => {
                per.push(None);
                excluded.push(c);
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::SingleClassAuc);
    }
    Ok(MetricReport {
        per_class: per,
        macro_auc: sum / used as f64,
        excluded,
        samples: per_class[0].1.len(),
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FitRecord {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    /// Set when the regression is degenerate (constant response).
    pub degenerate: bool,
}

/// Ordinary least squares of log L_k on k over the window [k0, k1]
/// (1-based epoch numbers; `losses[0]` is epoch 1).
pub fn fit_log_linear(losses: &[f64], k0: usize, k1: usize) -> Result<FitRecord> {
    if k0 == 0 || k1 <= k0 || k1 > losses.len() {
        return Err(Error::Data(format!(
            "fit_log_linear: window [{k0}, {k1}] out of range for {} epochs",
            losses.len()
        )));
    }
    let window = &losses[k0 - 1..k1];
    if window.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Numerical(
            "fit_log_linear: losses must be strictly positive".into(),
        ));
    }
    let xs: Vec<f64> = (k0..=k1).map(|k| k as f64).collect();
    let ys: Vec<f64> = window.iter().map(|&l| l.ln()).collect();
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let syy: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    if syy == 0.0 {
        return Ok(FitRecord {
            a: mean_y,
            b: 0.0,
            r2: 0.0,
            degenerate: true,
        });
    }
    let b = sxy / sxx;
    let a = mean_y - b * mean_x;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (a + b * x)).powi(2))
        .sum();
    Ok(FitRecord {
        a,
        b,
        r2: 1.0 - ss_res / syy,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LinFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Plain least-squares line fit y = slope·x + intercept with R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data("linear_fit: need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("linear_fit: degenerate x".into()));
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let syy: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = if syy == 0.0 {
        1.0 // constant y is fit exactly by slope 0
    } else {
        let ss_res: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
            .sum();
        1.0 - ss_res / syy
    };
    Ok(LinFit {
        slope,
        intercept,
        r2,
    })
}
