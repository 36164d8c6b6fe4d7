//! Ensemble analysis: multiscale curves, increment pdfs and a summary of
//! fitted slopes, as written by the `analyze` subcommand.

use crate::error::Result;
use crate::mstats::{
    ensemble_stats, fit_loglog_slope, flatness_curve, increment_pdf, kl_to_standard_gaussian, EnsembleStats,
    IncrementPdf, LineFit, PdfBins, ScaleSet, FIGURE_PDF_SCALES,
};
use crate::refcurves::{synth_reference, ReferenceModelParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Field file to analyse (command-line use).
    pub fields: Option<std::path::PathBuf>,
    /// Number of log-spaced integer scales for the curves.
    pub scale_count: usize,
    /// Largest analysed scale, capped at the field length minus one.
    pub max_scale: usize,
    /// Inertial fitting window; defaults to the reference model's.
    pub inertial_window: Option<[f64; 2]>,
    /// Window for the small-scale S₂ slope; defaults to `[1, η]`.
    pub dissipative_window: Option<[f64; 2]>,
    /// Scale of the large-scale flatness check; defaults to `2L`.
    pub large_scale: Option<usize>,
    pub pdf_scales: Vec<usize>,
    pub pdf_bins: usize,
    pub pdf_range: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            fields: None,
            scale_count: 60,
            max_scale: 20000,
            inertial_window: None,
            dissipative_window: None,
            large_scale: None,
            pdf_scales: FIGURE_PDF_SCALES.to_vec(),
            pdf_bins: PdfBins::default().count,
            pdf_range: PdfBins::default().range,
        }
    }
}

impl AnalysisConfig {
    pub fn inertial(&self, p: &ReferenceModelParams) -> (f64, f64) {
        self.inertial_window.map_or_else(|| p.inertial_window(), |w| (w[0], w[1]))
    }

    pub fn dissipative(&self, p: &ReferenceModelParams) -> (f64, f64) {
        self.dissipative_window.map_or((1.0, p.eta), |w| (w[0], w[1]))
    }

    pub fn large(&self, p: &ReferenceModelParams) -> usize {
        self.large_scale.unwrap_or((2.0 * p.integral).round() as usize)
    }

    pub fn scales(&self, n: usize) -> Result<ScaleSet> {
        ScaleSet::log_spaced_integers(1, self.max_scale.min(n - 1), self.scale_count)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeReport {
    pub window: (f64, f64),
    pub fit: LineFit,
    /// Slope of the reference model fitted over the same window.
    pub reference_slope: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub realizations: usize,
    pub length: usize,
    /// Inertial-range log S₂ slope (ζ₂).
    pub inertial_s2: SlopeReport,
    pub dissipative_s2: Option<SlopeReport>,
    /// Inertial-range ln(ℱ/3) slope.
    pub inertial_flatness: SlopeReport,
    pub large_scale: usize,
    pub large_scale_flatness: f64,
    pub kl_to_gaussian: f64,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub stats: EnsembleStats,
    pub pdfs: Vec<IncrementPdf>,
    pub report: AnalysisReport,
}

fn slope_report(
    curve: &crate::mstats::StatCurve,
    window: (f64, f64),
    reference: impl Fn(&crate::refcurves::ReferenceCurves) -> Vec<f64>,
    params: &ReferenceModelParams,
) -> Result<SlopeReport> {
    let fit = fit_loglog_slope(curve, window)?;
    let ref_curves = synth_reference(params, &curve.scales)?;
    let ref_curve = crate::mstats::StatCurve::new(curve.scales.clone(), reference(&ref_curves), curve.kind)?;
    let reference_slope = fit_loglog_slope(&ref_curve, window)?.slope;
    Ok(SlopeReport { window, fit, reference_slope })
}

/// Analyse an ensemble of equal-length fields against the reference model
/// that defines the fitting windows.
pub fn analyze<F: AsRef<[f64]> + Sync>(
    fields: &[F],
    params: &ReferenceModelParams,
    cfg: &AnalysisConfig,
) -> Result<Analysis> {
    let n = fields.first().map_or(0, |f| f.as_ref().len());
    let scales = cfg.scales(n)?;
    let stats = ensemble_stats(fields, &scales)?;
    let bins = PdfBins { count: cfg.pdf_bins, range: cfg.pdf_range };
    let pdfs = cfg
        .pdf_scales
        .iter()
        .filter(|&&l| l < n)
        .map(|&l| increment_pdf(fields, l, bins))
        .collect::<Result<Vec<_>>>()?;
    let large = cfg.large(params);
    let report = AnalysisReport {
        realizations: fields.len(),
        length: n,
        inertial_s2: slope_report(&stats.log_s2, cfg.inertial(params), |r| r.log_s2.clone(), params)?,
        dissipative_s2: slope_report(&stats.log_s2, cfg.dissipative(params), |r| r.log_s2.clone(), params).ok(),
        inertial_flatness: slope_report(&stats.log_f3, cfg.inertial(params), |r| r.log_f3.clone(), params)?,
        large_scale: large,
        large_scale_flatness: flatness_curve(fields, &ScaleSet::from_lags(&[large])?)?.values[0],
        kl_to_gaussian: kl_to_standard_gaussian(fields)?,
    };
    Ok(Analysis { stats, pdfs, report })
}
