use crate::diffcore::{soft_weights, HistGrid};
use crate::error::{Error, Result};

/// Soft-histogram grid used by the Gaussianity criterion: 100 bins on
/// [−6, 6] with a bandwidth of half a bin width.
pub const KL_GRID: HistGrid = HistGrid { bins: 100, range: 6.0, bandwidth: 0.06 };

/// Floor applied to the reference distribution before taking logs.
pub const EPS_KL: f64 = 1e-12;

/// Gaussian-kernel soft histogram of `sample`, summing to one.
pub fn soft_histogram(sample: &[f64], grid: HistGrid) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::Contract("soft histogram of an empty sample".into()));
    }
    if grid.bins == 0 || grid.range <= 0.0 || grid.bandwidth <= 0.0 {
        return Err(Error::Contract("soft histogram needs bins > 0, range > 0, bandwidth > 0".into()));
    }
    let n = sample.len() as f64;
    let mut p = vec![0.0; grid.bins];
    let mut w = Vec::new();
    for &z in sample {
        let (lo, _) = soft_weights(z, grid, &mut w);
        for (k, a) in w.iter().enumerate() {
            p[lo + k] += a / n;
        }
    }
    Ok(p)
}

/// `Σ p·ln(p/q)` with `q` floored at [`EPS_KL`] and `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!("p has {} entries, q has {}", p.len(), q.len())));
    }
    if p.iter().chain(q).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Contract("probability vectors must be finite and non-negative".into()));
    }
    Ok(p.iter().zip(q).map(|(&pk, &qk)| if pk > 0.0 { pk * (pk / qk.max(EPS_KL)).ln() } else { 0.0 }).sum())
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard Gaussian mass of each bin of `grid`, renormalised to sum to one.
pub fn standard_gaussian_bins(grid: HistGrid) -> Vec<f64> {
    let raw: Vec<f64> = (0..grid.bins).map(|k| normal_cdf(grid.edge(k + 1)) - normal_cdf(grid.edge(k))).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Centre and standardise the pooled values, soft-histogram them and
/// return the KL divergence to the binned standard Gaussian.
pub fn kl_to_standard_gaussian<F: AsRef<[f64]>>(fields: &[F]) -> Result<f64> {
    let n: usize = fields.iter().map(|f| f.as_ref().len()).sum();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mean = fields.iter().flat_map(|f| f.as_ref()).sum::<f64>() / n as f64;
    let var = fields.iter().flat_map(|f| f.as_ref()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::DegenerateStatistics("zero variance".into()));
    }
    let sd = var.sqrt();
    let z: Vec<f64> = fields.iter().flat_map(|f| f.as_ref()).map(|v| (v - mean) / sd).collect();
    let p = soft_histogram(&z, KL_GRID)?;
    kl_divergence(&p, &standard_gaussian_bins(KL_GRID))
}
