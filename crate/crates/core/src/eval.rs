//! Depth accuracy metrics and the temporal-coherence statistic.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::depth::DepthMap;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction {pw}x{ph} and ground truth {gw}x{gh} differ in size")]
    SizeMismatch {
        pw: usize,
        ph: usize,
        gw: usize,
        gh: usize,
    },
    #[error("no valid pixels under the range cap")]
    NoValidPixels,
    #[error("temporal statistics need at least 2 frames, got {0}")]
    TooFewFrames(usize),
}

/// Standard per-frame depth metrics over pixels with valid ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    /// Fraction with max(pred/gt, gt/pred) < 1.25.
    pub delta1: f64,
    /// Fraction under 1.25^2.
    pub delta2: f64,
    /// Fraction under 1.25^3.
    pub delta3: f64,
    /// Mean |pred - gt|.
    pub abs: f64,
    /// Mean |pred - gt| / gt.
    pub abs_rel: f64,
    /// Mean (pred - gt)^2 / gt.
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub valid_pixels: usize,
}

/// Temporal coherence: per-frame mean absolute errors and their population
/// standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemporalReport {
    pub per_frame_abs: Vec<f64>,
    pub std: f64,
}

/// Metrics over pixels where the ground truth is valid (> 0, masked in) and
/// no deeper than `range_cap`. Inlier thresholds use strict inequality.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    range_cap: f64,
) -> Result<MetricReport, EvalError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(EvalError::SizeMismatch {
            pw: pred.width,
            ph: pred.height,
            gw: gt.width,
            gh: gt.height,
        });
    }
    let mut count = 0usize;
    let mut inliers = [0usize; 3];
    let mut abs = 0.0f64;
    let mut abs_rel = 0.0f64;
    let mut sq_rel = 0.0f64;
    let mut sq = 0.0f64;
    let mut sq_log = 0.0f64;
    for i in 0..gt.data.len() {
        let g = gt.data[i] as f64;
        if gt.mask[i] == 0 || g <= 0.0 || g > range_cap {
            continue;
        }
        let p = pred.data[i] as f64;
        count += 1;
        let err = p - g;
        abs += err.abs();
        abs_rel += err.abs() / g;
        sq_rel += err * err / g;
        sq += err * err;
        let log_ratio = (p.ln() - g.ln()).powi(2);
        sq_log += log_ratio;
        let sigma = (p / g).max(g / p);
        let mut bound = 1.25;
        for slot in inliers.iter_mut() {
            if sigma < bound {
                *slot += 1;
            }
            bound *= 1.25;
        }
    }
    if count == 0 {
        return Err(EvalError::NoValidPixels);
    }
    let n = count as f64;
    Ok(MetricReport {
        delta1: inliers[0] as f64 / n,
        delta2: inliers[1] as f64 / n,
        delta3: inliers[2] as f64 / n,
        abs: abs / n,
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        valid_pixels: count,
    })
}

/// Population standard deviation of the per-frame `abs` values.
pub fn temporal_std(per_frame: &[MetricReport]) -> Result<TemporalReport, EvalError> {
    if per_frame.len() < 2 {
        return Err(EvalError::TooFewFrames(per_frame.len()));
    }
    let values: Vec<f64> = per_frame.iter().map(|r| r.abs).collect();
    // Constant sequences have zero deviation by definition; short-circuit so
    // rounding in the mean cannot produce a spurious epsilon.
    if values.windows(2).all(|w| w[0] == w[1]) {
        return Ok(TemporalReport {
            per_frame_abs: values,
            std: 0.0,
        });
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let variance =
        values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / values.len() as f64;
    Ok(TemporalReport {
        per_frame_abs: values,
        std: variance.sqrt(),
    })
}

/// Arithmetic mean of per-frame reports (frames weighted equally).
pub fn mean_report(per_frame: &[MetricReport]) -> Option<MetricReport> {
    if per_frame.is_empty() {
        return None;
    }
    let n = per_frame.len() as f64;
    let sum = |f: fn(&MetricReport) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    Some(MetricReport {
        delta1: sum(|r| r.delta1),
        delta2: sum(|r| r.delta2),
        delta3: sum(|r| r.delta3),
        abs: sum(|r| r.abs),
        abs_rel: sum(|r| r.abs_rel),
        sq_rel: sum(|r| r.sq_rel),
        rmse: sum(|r| r.rmse),
        rmse_log: sum(|r| r.rmse_log),
        valid_pixels: per_frame.iter().map(|r| r.valid_pixels).sum(),
    })
}

/// CSV report: one row per frame, a mean row, and a temporal-std row when
/// available.
pub fn csv_report(
    rows: &[(String, MetricReport)],
    temporal: Option<&TemporalReport>,
) -> String {
    let mut out = String::from(
        "frame,delta1,delta2,delta3,abs,abs_rel,sq_rel,rmse,rmse_log,valid_pixels\n",
    );
    let mut push_row = |label: &str, r: &MetricReport| {
        let _ = writeln!(
            out,
            "{label},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
            r.delta1,
            r.delta2,
            r.delta3,
            r.abs,
            r.abs_rel,
            r.sq_rel,
            r.rmse,
            r.rmse_log,
            r.valid_pixels
        );
    };
    for (label, report) in rows {
        push_row(label, report);
    }
    if let Some(mean) = mean_report(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>()) {
        push_row("mean", &mean);
    }
    if let Some(t) = temporal {
        let _ = writeln!(out, "temporal_std,,,,{:.9},,,,,", t.std);
    }
    out
}
