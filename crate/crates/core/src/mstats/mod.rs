//! Multiscale increment statistics of 1-D fields.
//!
//! Two paths compute the same quantities: plain functions over `f64`
//! slices for analysing ensembles, and the tape-recorded versions in
//! [`diff`] used by the training criterion.

pub mod diff;
mod fit;
pub mod io;
mod kl;
mod pdf;

pub use fit::{fit_loglog_slope, LineFit};
pub use kl::{kl_divergence, kl_to_standard_gaussian, soft_histogram, standard_gaussian_bins, EPS_KL, KL_GRID};
pub use pdf::{increment_pdf, IncrementPdf, PdfBins, EMPTY_BIN_LOG_DENSITY, FIGURE_PDF_SCALES};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Guard added to S₂ before dividing by or taking the log of it.
pub const EPS_STAT: f64 = 1e-12;

/// Strictly increasing set of positive analysis scales, in units of the
/// sampling distance. Scales used on sampled fields must be integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet(Vec<f64>);

impl ScaleSet {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Contract("scale set is empty".into()));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Contract(format!("scale {s} is not positive and finite")));
        }
        if let Some(w) = scales.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Contract(format!("scales not strictly increasing at {} → {}", w[0], w[1])));
        }
        Ok(Self(scales))
    }

    pub fn from_lags(lags: &[usize]) -> Result<Self> {
        Self::new(lags.iter().map(|&l| l as f64).collect())
    }

    /// About `count` log-spaced integer scales in `[min, max]`, rounded and
    /// deduplicated (so small scales collapse to consecutive integers).
    pub fn log_spaced_integers(min: usize, max: usize, count: usize) -> Result<Self> {
        if min == 0 || max < min || count < 2 {
            return Err(Error::Contract(format!("bad log-spaced range [{min}, {max}] × {count}")));
        }
        let (a, b) = ((min as f64).ln(), (max as f64).ln());
        let mut lags: Vec<usize> =
            (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize).collect();
        lags.dedup();
        Self::from_lags(&lags)
    }

    /// Real-valued log-spaced grid (for evaluating analytic curves).
    pub fn log_spaced(min: f64, max: f64, count: usize) -> Result<Self> {
        let (a, b) = (min.ln(), max.ln());
        Self::new((0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect())
    }

    /// The default training scale set for fields of length `n`.
    pub fn loss_default(n: usize) -> Result<Self> {
        Self::log_spaced_integers(1, n / 2, 25)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Integer lags, each checked against a field of length `n`.
    pub fn lags(&self, n: usize) -> Result<Vec<usize>> {
        self.0
            .iter()
            .map(|&s| {
                if s.fract() != 0.0 {
                    return Err(Error::Contract(format!("scale {s} is not an integer lag")));
                }
                let l = s as usize;
                if l >= n {
                    return Err(Error::Scale { scale: l, len: n });
                }
                Ok(l)
            })
            .collect()
    }

    /// Subset of scales inside `[lo, hi]`.
    pub fn restrict(&self, lo: f64, hi: f64) -> Result<Self> {
        Self::new(self.0.iter().copied().filter(|&s| s >= lo && s <= hi).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StatKind {
    /// ln S₂(l)
    LogS2,
    /// S₃/S₂^{3/2}
    Skewness,
    /// ln(ℱ(l)/3)
    LogF3,
    /// ℱ = S₄/S₂², not a log
    Flatness,
}

/// A statistic sampled on a scale set, optionally with an ensemble spread.
#[derive(Debug, Clone, PartialEq)]
pub struct StatCurve {
    pub scales: ScaleSet,
    pub values: Vec<f64>,
    pub kind: StatKind,
    pub std: Option<Vec<f64>>,
}

impl StatCurve {
    pub fn new(scales: ScaleSet, values: Vec<f64>, kind: StatKind) -> Result<Self> {
        if values.len() != scales.len() {
            return Err(Error::Contract(format!("{} values for {} scales", values.len(), scales.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateStatistics(format!("non-finite {kind:?} value")));
        }
        Ok(Self { scales, values, kind, std: None })
    }

    /// Value at a scale present in the set.
    pub fn at(&self, scale: f64) -> Option<f64> {
        self.scales.values().iter().position(|&s| s == scale).map(|i| self.values[i])
    }
}

/// `out[x] = field[x + l] − field[x]`.
pub fn increments(field: &[f64], l: usize) -> Result<Vec<f64>> {
    if l == 0 || l >= field.len() {
        return Err(Error::Scale { scale: l, len: field.len() });
    }
    Ok(field[l..].iter().zip(field).map(|(a, b)| a - b).collect())
}

/// Pooled `mean((row[x+lag] − row[x])^order)` over contiguous rows of `data`.
/// Sums each row, then the row sums in order (same as [`structure_function`]).
pub(crate) fn structure_function_rows(data: &[f64], row_len: usize, lag: usize, order: i32) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for row in data.chunks(row_len) {
        let mut part = 0.0;
        for i in 0..row_len - lag {
            part += (row[i + lag] - row[i]).powi(order);
        }
        sum += part;
        count += row_len - lag;
    }
    sum / count as f64
}

/// `S_p(l)`: mean of `(δ_l v)^p` pooled over all positions of all fields.
pub fn structure_function<F: AsRef<[f64]>>(fields: &[F], l: usize, p: i32) -> Result<f64> {
    if fields.is_empty() {
        return Err(Error::Contract("no fields given".into()));
    }
    if p < 1 {
        return Err(Error::Contract(format!("structure function order must be ≥ 1, got {p}")));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for f in fields {
        let f = f.as_ref();
        if l == 0 || l >= f.len() {
            return Err(Error::Scale { scale: l, len: f.len() });
        }
        // per-field partial sums: a mirrored pair of fields cancels exactly
        let mut part = 0.0;
        for i in 0..f.len() - l {
            part += (f[i + l] - f[i]).powi(p);
        }
        sum += part;
        count += f.len() - l;
    }
    Ok(sum / count as f64)
}

/// (S₂, S₃, S₄) at one lag.
fn moments<F: AsRef<[f64]>>(fields: &[F], l: usize) -> Result<(f64, f64, f64)> {
    Ok((structure_function(fields, l, 2)?, structure_function(fields, l, 3)?, structure_function(fields, l, 4)?))
}

fn checked_s2(s2: f64, l: usize) -> Result<f64> {
    if s2 > EPS_STAT {
        Ok(s2)
    } else {
        Err(Error::DegenerateStatistics(format!("S2({l}) = {s2} is not above {EPS_STAT}")))
    }
}

fn curve_with<F: AsRef<[f64]>>(
    fields: &[F],
    scales: &ScaleSet,
    kind: StatKind,
    stat: impl Fn(f64, f64, f64) -> f64,
) -> Result<StatCurve> {
    let n = fields.iter().map(|f| f.as_ref().len()).min().unwrap_or(0);
    let values = scales
        .lags(n)?
        .into_iter()
        .map(|l| {
            let (s2, s3, s4) = moments(fields, l)?;
            let s2 = checked_s2(s2, l)?;
            Ok(stat(s2, s3, s4))
        })
        .collect::<Result<Vec<_>>>()?;
    StatCurve::new(scales.clone(), values, kind)
}

/// ln S₂(l) on every scale, pooled over the fields.
pub fn log_s2_curve<F: AsRef<[f64]>>(fields: &[F], scales: &ScaleSet) -> Result<StatCurve> {
    curve_with(fields, scales, StatKind::LogS2, |s2, _, _| s2.ln())
}

/// 𝒮(l) = S₃/S₂^{3/2}, pooled over the fields.
pub fn skewness_curve<F: AsRef<[f64]>>(fields: &[F], scales: &ScaleSet) -> Result<StatCurve> {
    curve_with(fields, scales, StatKind::Skewness, |s2, s3, _| s3 / s2.powf(1.5))
}

/// ℱ(l) = S₄/S₂², pooled over the fields.
pub fn flatness_curve<F: AsRef<[f64]>>(fields: &[F], scales: &ScaleSet) -> Result<StatCurve> {
    curve_with(fields, scales, StatKind::Flatness, |s2, _, s4| s4 / (s2 * s2))
}

/// ln(ℱ(l)/3), pooled over the fields.
pub fn log_f3_curve<F: AsRef<[f64]>>(fields: &[F], scales: &ScaleSet) -> Result<StatCurve> {
    curve_with(fields, scales, StatKind::LogF3, |s2, _, s4| (s4 / (s2 * s2) / 3.0).ln())
}

/// Ensemble curves: each statistic computed per realization, then
/// reported as mean and standard deviation across realizations.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub log_s2: StatCurve,
    pub skewness: StatCurve,
    pub log_f3: StatCurve,
}

pub fn ensemble_stats<F: AsRef<[f64]> + Sync>(fields: &[F], scales: &ScaleSet) -> Result<EnsembleStats> {
    use rayon::prelude::*;
    if fields.is_empty() {
        return Err(Error::Contract("empty ensemble".into()));
    }
    let per: Vec<[Vec<f64>; 3]> = fields
        .par_iter()
        .map(|f| {
            let one = [f.as_ref()];
            Ok([
                log_s2_curve(&one, scales)?.values,
                skewness_curve(&one, scales)?.values,
                log_f3_curve(&one, scales)?.values,
            ])
        })
        .collect::<Result<_>>()?;
    let summarize = |k: usize, kind: StatKind| -> Result<StatCurve> {
        let r = per.len() as f64;
        let mean: Vec<f64> = (0..scales.len()).map(|i| per.iter().map(|c| c[k][i]).sum::<f64>() / r).collect();
        let std: Vec<f64> = (0..scales.len())
            .map(|i| (per.iter().map(|c| (c[k][i] - mean[i]).powi(2)).sum::<f64>() / r).sqrt())
            .collect();
        let mut curve = StatCurve::new(scales.clone(), mean, kind)?;
        curve.std = Some(std);
        Ok(curve)
    };
    Ok(EnsembleStats {
        log_s2: summarize(0, StatKind::LogS2)?,
        skewness: summarize(1, StatKind::Skewness)?,
        log_f3: summarize(2, StatKind::LogF3)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn increments_examples() {
        assert_eq!(increments(&[3.0, 1.0, 4.0, 1.0, 5.0], 2).unwrap(), vec![1.0, 0.0, 1.0]);
        assert!(increments(&[2.0; 8], 3).unwrap().iter().all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..20).map(|x| x as f64).collect();
        assert!(increments(&ramp, 7).unwrap().iter().all(|&v| v == 7.0));
        assert!(matches!(increments(&ramp, 20), Err(Error::Scale { .. })));
        assert!(matches!(increments(&ramp, 0), Err(Error::Scale { .. })));
    }

    #[test]
    fn ramp_structure_functions_and_ratios() {
        let ramp: Vec<f64> = (0..64).map(|x| x as f64).collect();
        for l in [1usize, 3, 10] {
            for p in 1..=4 {
                assert_eq!(structure_function(&[&ramp], l, p).unwrap(), (l as f64).powi(p));
            }
        }
        let scales = ScaleSet::from_lags(&[1, 2, 5, 9]).unwrap();
        let sk = skewness_curve(&[&ramp], &scales).unwrap();
        assert!(sk.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let fl = flatness_curve(&[&ramp], &scales).unwrap();
        assert!(fl.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_field_is_degenerate() {
        let c = vec![4.0; 32];
        assert_eq!(structure_function(&[&c], 5, 3).unwrap(), 0.0);
        let scales = ScaleSet::from_lags(&[1, 2]).unwrap();
        assert!(matches!(skewness_curve(&[&c], &scales), Err(Error::DegenerateStatistics(_))));
    }

    #[test]
    fn mirrored_ensemble_has_zero_skewness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..300).map(|_| rng.random::<f64>().powi(3)).collect();
        let g: Vec<f64> = f.iter().map(|v| -v).collect();
        let scales = ScaleSet::from_lags(&[1, 4, 16]).unwrap();
        let sk = skewness_curve(&[&f, &g], &scales).unwrap();
        assert!(sk.values.iter().all(|&v| v == 0.0), "{:?}", sk.values);
    }

    #[test]
    fn two_point_field_flatness_is_two() {
        // increments of i.i.d. ±1 take values {−2, 0, 2} with probs ¼, ½, ¼:
        // S₂ = 2, S₄ = 8, ℱ = 2
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f: Vec<f64> = (0..400_000).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let scales = ScaleSet::from_lags(&[1, 3]).unwrap();
        for v in flatness_curve(&[&f], &scales).unwrap().values {
            assert!((v - 2.0).abs() < 0.02, "ℱ = {v}");
        }
    }

    #[test]
    fn scale_set_validation() {
        assert!(ScaleSet::new(vec![1.0, 1.0]).is_err());
        assert!(ScaleSet::new(vec![0.0, 1.0]).is_err());
        assert!(ScaleSet::new(vec![]).is_err());
        let s = ScaleSet::log_spaced_integers(1, 4096, 25).unwrap();
        assert_eq!(s.values()[0], 1.0);
        assert_eq!(*s.values().last().unwrap(), 4096.0);
        assert!(s.len() <= 25 && s.len() >= 20);
        assert!(ScaleSet::new(vec![1.5]).unwrap().lags(10).is_err());
        assert!(matches!(ScaleSet::from_lags(&[4, 12]).unwrap().lags(12), Err(Error::Scale { .. })));
    }

    #[test]
    fn ensemble_std_is_zero_for_identical_realizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let scales = ScaleSet::from_lags(&[1, 2, 8]).unwrap();
        let e = ensemble_stats(&[f.clone(), f.clone()], &scales).unwrap();
        assert!(e.log_s2.std.as_ref().unwrap().iter().all(|&s| s.abs() < 1e-14));
        let single = log_s2_curve(&[&f], &scales).unwrap();
        for (a, b) in e.log_s2.values.iter().zip(&single.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
