//! Evaluation metrics and band-limited error analysis.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{mae, mse};
use crate::spectral::{low_pass, RealSignal};

const MAPE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// Standard MAE / RMSE / MAPE over all entries, in the truth's scale.
pub fn evaluate(pred: &RealSignal, truth: &RealSignal) -> Result<MetricSet> {
    let mae = mae(truth, pred)?;
    let rmse = mse(truth, pred)?.sqrt();
    let count = (truth.len() * truth.channels()) as f64;
    let mape = truth
        .values()
        .iter()
        .zip(pred.values().iter())
        .map(|(t, p)| ((t - p) / t.abs().max(MAPE_EPS)).abs())
        .sum::<f64>()
        / count;
    Ok(MetricSet { mae, rmse, mape })
}

/// Metrics restricted to the low band: both signals are low-pass filtered
/// with the given keep fraction before comparison.
pub fn low_band_evaluate(pred: &RealSignal, truth: &RealSignal, keep_fraction: f64) -> Result<MetricSet> {
    evaluate(&low_pass(pred, keep_fraction)?, &low_pass(truth, keep_fraction)?)
}

/// Mean and standard deviation of per-run metric sets.
pub fn aggregate(runs: &[MetricSet]) -> (MetricSet, MetricSet) {
    let n = runs.len() as f64;
    let mean = MetricSet {
        mae: runs.iter().map(|r| r.mae).sum::<f64>() / n,
        rmse: runs.iter().map(|r| r.rmse).sum::<f64>() / n,
        mape: runs.iter().map(|r| r.mape).sum::<f64>() / n,
    };
    let var = |f: fn(&MetricSet) -> f64, m: f64| {
        (runs.iter().map(|r| (f(r) - m) * (f(r) - m)).sum::<f64>() / n).sqrt()
    };
    let std = MetricSet {
        mae: var(|r| r.mae, mean.mae),
        rmse: var(|r| r.rmse, mean.rmse),
        mape: var(|r| r.mape, mean.mape),
    };
    (mean, std)
}
