use super::{StatCurve, StatKind};
use crate::error::{Error, Result};
use serde::Serialize;

/// Ordinary least-squares line `value ≈ slope·ln l + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub rms_residual: f64,
    pub points: usize,
}

/// Fit a log-scale curve against `ln l` over scales in `[lo, hi]`.
pub fn fit_loglog_slope(curve: &StatCurve, window: (f64, f64)) -> Result<LineFit> {
    if !matches!(curve.kind, StatKind::LogS2 | StatKind::LogF3) {
        return Err(Error::Contract(format!("no log-log fit is defined for {:?} curves", curve.kind)));
    }
    let (lo, hi) = window;
    let pts: Vec<(f64, f64)> = curve
        .scales
        .values()
        .iter()
        .zip(&curve.values)
        .filter(|(s, _)| **s >= lo && **s <= hi)
        .map(|(s, v)| (s.ln(), *v))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Fit(format!("{} scales in [{lo}, {hi}], need at least 3", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::Fit("scales in window are not distinct".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (pts.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LineFit { slope, intercept, rms_residual: rms, points: pts.len() })
}
