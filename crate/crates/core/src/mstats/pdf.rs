use super::increments;
use crate::error::{Error, Result};

/// Log-density written for bins that received no samples.
pub const EMPTY_BIN_LOG_DENSITY: f64 = -999.0;

/// Increment scales of the figure-style pdf analysis, in sampling units.
pub const FIGURE_PDF_SCALES: [usize; 9] = [2, 4, 8, 16, 64, 256, 1024, 4096, 10000];

/// Uniform histogram bins on `[-range, range]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdfBins {
    pub count: usize,
    pub range: f64,
}

impl Default for PdfBins {
    fn default() -> Self {
        Self { count: 201, range: 10.0 }
    }
}

/// Histogram estimate of the pdf of standardised increments at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementPdf {
    pub scale: usize,
    pub edges: Vec<f64>,
    /// Natural log of the density; [`EMPTY_BIN_LOG_DENSITY`] for empty bins.
    pub log_density: Vec<f64>,
    /// Density per bin (integrates to one over the bins).
    pub density: Vec<f64>,
}

impl IncrementPdf {
    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Pdf of centred, standardised increments `δ′_l u` pooled over all fields.
pub fn increment_pdf<F: AsRef<[f64]>>(fields: &[F], l: usize, bins: PdfBins) -> Result<IncrementPdf> {
    let mut pooled = Vec::new();
    for f in fields {
        pooled.extend(increments(f.as_ref(), l)?);
    }
    if pooled.len() < 10 * bins.count {
        return Err(Error::Contract(format!(
            "{} increments at scale {l}; need at least {}",
            pooled.len(),
            10 * bins.count
        )));
    }
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let var = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::DegenerateStatistics(format!("zero increment variance at scale {l}")));
    }
    let sd = var.sqrt();
    let width = 2.0 * bins.range / bins.count as f64;
    let edges: Vec<f64> = (0..=bins.count).map(|k| -bins.range + k as f64 * width).collect();
    let mut counts = vec![0usize; bins.count];
    let mut inside = 0usize;
    for v in &pooled {
        let z = (v - mean) / sd;
        let k = ((z + bins.range) / width).floor();
        if k >= 0.0 && (k as usize) < bins.count {
            counts[k as usize] += 1;
            inside += 1;
        }
    }
    let density: Vec<f64> = counts.iter().map(|&c| c as f64 / (inside as f64 * width)).collect();
    let log_density = density.iter().map(|&d| if d > 0.0 { d.ln() } else { EMPTY_BIN_LOG_DENSITY }).collect();
    Ok(IncrementPdf { scale: l, edges, log_density, density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_increments_give_gaussian_log_pdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f: Vec<f64> = (0..2_000_000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let pdf = increment_pdf(&[&f], 1, PdfBins::default()).unwrap();
        let total: f64 = pdf.density.iter().sum::<f64>() * pdf.bin_width();
        assert!((total - 1.0).abs() < 1e-9);
        let ln_norm = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for (c, ld) in pdf.centers().iter().zip(&pdf.log_density) {
            if c.abs() <= 3.0 {
                let expected = -c * c / 2.0 - ln_norm;
                assert!((ld - expected).abs() < 0.05, "z={c}: {ld} vs {expected}");
            }
        }
        assert!(pdf.log_density.iter().all(|v| v.is_finite()));
        assert!(pdf.log_density.contains(&EMPTY_BIN_LOG_DENSITY));
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let f: Vec<f64> = (0..500).map(|x| (x as f64).sin()).collect();
        assert!(matches!(increment_pdf(&[&f], 2, PdfBins::default()), Err(Error::Contract(_))));
    }
}
