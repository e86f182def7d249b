use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const AP_VARIANT: &str = "non-interpolated";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positives: usize,
    pub predicted: usize,
    pub true_positives: usize,
}

/// Ranking and thresholded multi-label metrics.
///
/// Classes without a positive example have `ap[k] == None` and are left out
/// of every class-averaged quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub ap: Vec<Option<f64>>,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub theta: f64,
    pub counts: Vec<ClassCounts>,
    pub ap_variant: String,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Average precision of one ranked column.
///
/// Items are ordered by descending score, ties by index, and the precision
/// at each rank holding a positive is averaged. `None` when there are no
/// positives.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let npos = targets.iter().filter(|&&t| t).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / npos as f64)
}

fn as_bool_targets(targets: &Tensor<f64>) -> Result<Vec<bool>> {
    targets
        .data()
        .iter()
        .map(|&y| {
            if y == 0.0 || y == 1.0 {
                Ok(y == 1.0)
            } else {
                Err(Error::Precondition {
                    op: "compute_metrics",
                    detail: format!("target {y} is not 0 or 1"),
                })
            }
        })
        .collect()
}

/// Metrics for `N×K` scores against 0/1 targets, binarised at `scores ≥ theta`.
pub fn compute_metrics(scores: &Tensor<f64>, targets: &Tensor<f64>, theta: f64) -> Result<MetricsReport> {
    scores.same_shape(targets, "compute_metrics")?;
    if scores.ndim() != 2 || scores.shape()[0] == 0 {
        return Err(Error::dim("compute_metrics", format!("need N×K with N ≥ 1, got {:?}", scores.shape())));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!("theta must lie in (0, 1), got {theta}")));
    }
    let (n, k) = (scores.shape()[0], scores.shape()[1]);
    let y = as_bool_targets(targets)?;
    let s = scores.data();

    let mut ap = Vec::with_capacity(k);
    let mut counts = Vec::with_capacity(k);
    for c in 0..k {
        let col: Vec<f64> = (0..n).map(|i| s[i * k + c]).collect();
        let truth: Vec<bool> = (0..n).map(|i| y[i * k + c]).collect();
        let a = average_precision(&col, &truth);
        if a.is_none() {
            warn!("class {c} has no positive example; excluded from class averages");
        }
        ap.push(a);
        let mut cc = ClassCounts::default();
        for (&v, &t) in col.iter().zip(&truth) {
            let pred = v >= theta;
            cc.positives += usize::from(t);
            cc.predicted += usize::from(pred);
            cc.true_positives += usize::from(pred && t);
        }
        counts.push(cc);
    }

    let defined: Vec<usize> = (0..k).filter(|&c| ap[c].is_some()).collect();
    let mean_over = |f: &dyn Fn(usize) -> f64| {
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().map(|&c| f(c)).sum::<f64>() / defined.len() as f64
        }
    };
    let map = mean_over(&|c| ap[c].unwrap_or(0.0));
    let cp = mean_over(&|c| ratio(counts[c].true_positives, counts[c].predicted));
    let cr = mean_over(&|c| ratio(counts[c].true_positives, counts[c].positives));
    let tp: usize = counts.iter().map(|c| c.true_positives).sum();
    let op = ratio(tp, counts.iter().map(|c| c.predicted).sum());
    let or = ratio(tp, counts.iter().map(|c| c.positives).sum());
    Ok(MetricsReport {
        map,
        ap,
        op,
        or,
        of1: f1(op, or),
        cp,
        cr,
        cf1: f1(cp, cr),
        theta,
        counts,
        ap_variant: AP_VARIANT.to_string(),
    })
}

/// Mean over classes of the positive rate: the mAP expected from scores
/// that carry no information.
pub fn prevalence_baseline(targets: &Tensor<f64>) -> f64 {
    let (n, k) = (targets.shape()[0], targets.shape()[1]);
    let rates: Vec<f64> = (0..k)
        .map(|c| (0..n).map(|i| targets.at2(i, c)).sum::<f64>() / n as f64)
        .filter(|&r| r > 0.0)
        .collect();
    rates.iter().sum::<f64>() / rates.len().max(1) as f64
}

/// `−[y·ln σ(x) + (1−y)·ln(1−σ(x))]`, averaged over all `N·K` entries.
pub fn multilabel_bce(logits: &Tensor<f64>, targets: &Tensor<f64>) -> Result<f64> {
    logits.same_shape(targets, "multilabel_bce")?;
    let y = as_bool_targets(targets).map_err(|e| match e {
        Error::Precondition { detail, .. } => Error::Precondition { op: "multilabel_bce", detail },
        other => other,
    })?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(y)
        .map(|(&x, t)| x.max(0.0) - if t { x } else { 0.0 } + (-x.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len().max(1) as f64)
}
