//! Target curves for training: a parametric model with a dissipative,
//! an inertial (lognormal-intermittent) and an integral range, or curves
//! read from a CSV file. Also synthetic test fields used as oracles.

use crate::error::{Error, Result};
use crate::mstats::ScaleSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Parameters of the reference model. Scales are in sampling units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceModelParams {
    /// Dissipative (Kolmogorov) scale.
    pub eta: f64,
    /// Integral scale.
    #[serde(rename = "L")]
    pub integral: f64,
    /// Lognormal intermittency coefficient.
    pub c2: f64,
    /// Variance scale of S₂.
    pub sigma2: f64,
    /// Magnitude of the inertial-range skewness.
    pub s0: f64,
    /// Steepening of the skewness below the dissipative scale.
    pub nu: f64,
    /// Steepening of the flatness below the dissipative scale.
    pub kappa: f64,
}

impl Default for ReferenceModelParams {
    fn default() -> Self {
        Self { eta: 5.0, integral: 2350.0, c2: 0.025, sigma2: 1.0, s0: 0.25, nu: 0.3, kappa: 0.5 }
    }
}

impl ReferenceModelParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if !(p.eta > 0.0 && p.eta < p.integral && p.integral.is_finite()) {
            return bad("need 0 < eta < L");
        }
        if !(p.c2 > 0.0 && p.c2 < 0.1) {
            return bad("need 0 < c2 < 0.1");
        }
        if !(p.sigma2 > 0.0 && p.sigma2.is_finite()) {
            return bad("need sigma2 > 0");
        }
        if !(p.s0 >= 0.0 && p.nu >= 0.0 && p.kappa >= 0.0) {
            return bad("need s0, nu, kappa ≥ 0");
        }
        Ok(())
    }

    /// Second-order exponent of the inertial range, `ζ₂ = 2/3 + c₂`.
    pub fn zeta2(&self) -> f64 {
        2.0 / 3.0 + self.c2
    }

    /// Inertial fitting window `[20η, L/6]`.
    pub fn inertial_window(&self) -> (f64, f64) {
        (20.0 * self.eta, self.integral / 6.0)
    }

    /// Dissipative fitting window `[0.1η, 0.5η]`.
    pub fn dissipative_window(&self) -> (f64, f64) {
        (0.1 * self.eta, 0.5 * self.eta)
    }

    pub fn log_s2(&self, l: f64) -> f64 {
        let z2 = self.zeta2();
        let x = l / self.eta;
        let y = l / self.integral;
        self.sigma2.ln() + 2.0 * x.ln() - 0.5 * (2.0 - z2) * (1.0 + x * x).ln() - 0.5 * z2 * (1.0 + y * y).ln()
    }

    pub fn skewness(&self, l: f64) -> f64 {
        let r = self.eta / l;
        -self.s0 / (1.0 + l / self.integral) * (1.0 + r * r).powf(0.5 * self.nu)
    }

    /// `ln(ℱ/3)`: slope `−4c₂` in the inertial range, zero far above `L`.
    pub fn log_f3(&self, l: f64) -> f64 {
        let r = self.eta / l;
        let q = self.integral / l;
        4.0 * self.c2 * 0.5 * (1.0 + q * q).ln() * (1.0 + r * r).powf(0.5 * self.kappa)
    }
}

/// Target triple `(ln S₂ʳ, 𝒮ʳ, ln(ℱʳ/3))` on a scale set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCurves {
    pub scales: ScaleSet,
    pub log_s2: Vec<f64>,
    pub skew: Vec<f64>,
    pub log_f3: Vec<f64>,
}

impl ReferenceCurves {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Raw flatness `ℱʳ = 3·exp(ln(ℱʳ/3))`.
    pub fn flatness(&self) -> Vec<f64> {
        self.log_f3.iter().map(|v| 3.0 * v.exp()).collect()
    }
}

/// Evaluate the reference model on every scale.
pub fn synth_reference(params: &ReferenceModelParams, scales: &ScaleSet) -> Result<ReferenceCurves> {
    params.validate()?;
    let s = scales.values();
    Ok(ReferenceCurves {
        scales: scales.clone(),
        log_s2: s.iter().map(|&l| params.log_s2(l)).collect(),
        skew: s.iter().map(|&l| params.skewness(l)).collect(),
        log_f3: s.iter().map(|&l| params.log_f3(l)).collect(),
    })
}

pub const REFERENCE_CSV_HEADER: &str = "scale,logS2,skew,logF3";

pub fn write_reference_csv<W: Write>(mut out: W, curves: &ReferenceCurves) -> Result<()> {
    writeln!(out, "{REFERENCE_CSV_HEADER}")?;
    for (i, l) in curves.scales.values().iter().enumerate() {
        writeln!(out, "{l},{},{},{}", curves.log_s2[i], curves.skew[i], curves.log_f3[i])?;
    }
    Ok(())
}

pub fn save_reference_csv(path: &Path, curves: &ReferenceCurves) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_reference_csv(std::io::BufWriter::new(f), curves)
}

/// Parse reference curves; errors carry 1-based line numbers.
pub fn read_reference_csv<R: BufRead>(input: R) -> Result<ReferenceCurves> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let wanted = ["scale", "logS2", "skew", "logF3"];
    let missing: Vec<&str> = wanted.iter().copied().filter(|w| !cols.contains(w)).collect();
    if !missing.is_empty() {
        return Err(Error::Parse { line: 1, msg: format!("missing columns: {}", missing.join(", ")) });
    }
    let idx: Vec<usize> = wanted.iter().map(|w| cols.iter().position(|c| c == w).unwrap()).collect();
    let mut rows: Vec<[f64; 4]> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let mut row = [0.0; 4];
        for (k, &c) in idx.iter().enumerate() {
            let v: f64 = fields[c].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("column {} is not a number: {:?}", wanted[k], fields[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line: lineno, msg: format!("non-finite {}", wanted[k]) });
            }
            row[k] = v;
        }
        if row[0] <= 0.0 {
            return Err(Error::Parse { line: lineno, msg: format!("scale {} is not positive", row[0]) });
        }
        if let Some(prev) = rows.last() {
            if row[0] <= prev[0] {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("scales not strictly increasing ({} after {})", row[0], prev[0]),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    Ok(ReferenceCurves {
        scales: ScaleSet::new(rows.iter().map(|r| r[0]).collect())?,
        log_s2: rows.iter().map(|r| r[1]).collect(),
        skew: rows.iter().map(|r| r[2]).collect(),
        log_f3: rows.iter().map(|r| r[3]).collect(),
    })
}

pub fn load_reference_csv(path: &Path) -> Result<ReferenceCurves> {
    let f = std::fs::File::open(path)?;
    read_reference_csv(std::io::BufReader::new(f))
}

/// Piecewise-linear interpolation of every curve in `ln l`.
pub fn resample_to_scales(curves: &ReferenceCurves, target: &ScaleSet) -> Result<ReferenceCurves> {
    let src = curves.scales.values();
    let (lo, hi) = (src[0], src[src.len() - 1]);
    let lx: Vec<f64> = src.iter().map(|s| s.ln()).collect();
    let interp = |ys: &[f64], t: f64| -> f64 {
        let x = t.ln();
        match src.iter().position(|&s| s >= t) {
            Some(0) => ys[0],
            Some(j) if src[j] == t => ys[j],
            Some(j) => {
                let w = (x - lx[j - 1]) / (lx[j] - lx[j - 1]);
                ys[j - 1] + w * (ys[j] - ys[j - 1])
            }
            None => ys[ys.len() - 1],
        }
    };
    let t = target.values();
    if let Some(&bad) = t.iter().find(|&&s| s < lo || s > hi) {
        return Err(Error::Range(format!("scale {bad} outside reference range [{lo}, {hi}]")));
    }
    Ok(ReferenceCurves {
        scales: target.clone(),
        log_s2: t.iter().map(|&s| interp(&curves.log_s2, s)).collect(),
        skew: t.iter().map(|&s| interp(&curves.skew, s)).collect(),
        log_f3: t.iter().map(|&s| interp(&curves.log_f3, s)).collect(),
    })
}

/// Synthetic fields used as statistical oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFieldKind {
    IidGaussian,
    /// Amplitude spectrum `|k|^(−β/2)` with random phases; β = 5/3 gives
    /// a self-similar field with `S₂ ∝ l^{2/3}`.
    PowerLawSpectrum {
        beta: f64,
    },
}

pub fn make_test_field(kind: TestFieldKind, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        TestFieldKind::IidGaussian => Ok((0..n).map(|_| rng.sample(StandardNormal)).collect()),
        TestFieldKind::PowerLawSpectrum { beta } => {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Parameter(format!("spectral exponent must be positive, got {beta}")));
            }
            if !n.is_power_of_two() || n < 4 {
                return Err(Error::Parameter(format!("spectral synthesis needs a power-of-two length, got {n}")));
            }
            let mut spec = vec![Complex::new(0.0, 0.0); n];
            for k in 1..=n / 2 {
                let amp = (k as f64).powf(-beta / 2.0);
                let phase = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                if k == n / 2 {
                    // Nyquist coefficient must be real
                    spec[k] = Complex::new(amp * phase.cos().signum(), 0.0);
                } else {
                    spec[k] = Complex::from_polar(amp, phase);
                    spec[n - k] = spec[k].conj();
                }
            }
            let mut planner = rustfft::FftPlanner::<f64>::new();
            planner.plan_fft_inverse(n).process(&mut spec);
            let field: Vec<f64> = spec.iter().map(|c| c.re).collect();
            let mean = field.iter().sum::<f64>() / n as f64;
            let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            Ok(field.into_iter().map(|v| (v - mean) / sd).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mstats::{self, fit_loglog_slope, StatCurve, StatKind};

    #[test]
    fn defaults_are_valid() {
        let p = ReferenceModelParams::default();
        p.validate().unwrap();
        assert!((p.zeta2() - 0.691_666_666_666_666_7).abs() < 1e-15);
        let mut q = p;
        q.eta = 3000.0;
        assert!(matches!(q.validate(), Err(Error::Parameter(_))));
        let mut q = p;
        q.c2 = 0.2;
        assert!(synth_reference(&q, &ScaleSet::from_lags(&[1]).unwrap()).is_err());
    }

    #[test]
    fn curve_shapes() {
        let p = ReferenceModelParams::default();
        let scales = ScaleSet::log_spaced(0.1, 1e6, 400).unwrap();
        let c = synth_reference(&p, &scales).unwrap();
        for i in 0..c.len() {
            assert!(c.skew[i] < 0.0);
            if i > 0 {
                assert!(c.log_f3[i] <= c.log_f3[i - 1]);
            }
        }
        assert!(c.log_f3.last().unwrap().abs() < 1e-6);
        // plateau: S₂ → σ²(L/η)^ζ₂
        let plateau = p.sigma2.ln() + p.zeta2() * (p.integral / p.eta).ln();
        assert!((c.log_s2.last().unwrap() - plateau).abs() < 1e-3);
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let p = ReferenceModelParams::default();
        let c = synth_reference(&p, &ScaleSet::log_spaced_integers(1, 4096, 25).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_reference_csv(&mut buf, &c).unwrap();
        let back = read_reference_csv(buf.as_slice()).unwrap();
        for i in 0..c.len() {
            assert!((back.log_s2[i] - c.log_s2[i]).abs() < 1e-12);
            assert!((back.skew[i] - c.skew[i]).abs() < 1e-12);
            assert!((back.log_f3[i] - c.log_f3[i]).abs() < 1e-12);
        }

        let err = read_reference_csv("scale,logS2\n1,0\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line: 1, msg } => assert!(msg.contains("skew") && msg.contains("logF3")),
            e => panic!("{e}"),
        }
        let err = read_reference_csv("scale,logS2,skew,logF3\n1,0,0,0\n5,0,0,0\n3,0,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        let err = read_reference_csv("scale,logS2,skew,logF3\n1,0,x,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = read_reference_csv("scale,logS2,skew,logF3\n1,0,inf,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn resampling() {
        let p = ReferenceModelParams::default();
        let src = synth_reference(&p, &ScaleSet::log_spaced_integers(1, 4096, 25).unwrap()).unwrap();
        assert_eq!(resample_to_scales(&src, &src.scales).unwrap(), src);

        let two = ReferenceCurves {
            scales: ScaleSet::new(vec![2.0, 8.0]).unwrap(),
            log_s2: vec![1.0, 3.0],
            skew: vec![-0.2, -0.4],
            log_f3: vec![0.5, 0.1],
        };
        let mid = resample_to_scales(&two, &ScaleSet::new(vec![4.0]).unwrap()).unwrap();
        assert!((mid.log_s2[0] - 2.0).abs() < 1e-15);
        assert!((mid.skew[0] + 0.3).abs() < 1e-15);
        assert!((mid.log_f3[0] - 0.3).abs() < 1e-15);
        assert!(matches!(resample_to_scales(&two, &ScaleSet::new(vec![9.0]).unwrap()), Err(Error::Range(_))));

        let coarse = synth_reference(&p, &ScaleSet::log_spaced(1.0, 4096.0, 200).unwrap()).unwrap();
        let dense = ScaleSet::log_spaced(1.0, 4096.0, 1000).unwrap();
        let interp = resample_to_scales(&coarse, &dense).unwrap();
        let direct = synth_reference(&p, &dense).unwrap();
        for i in 0..dense.len() {
            assert!((interp.log_s2[i] - direct.log_s2[i]).abs() < 1e-3);
            assert!((interp.skew[i] - direct.skew[i]).abs() < 1e-3);
            assert!((interp.log_f3[i] - direct.log_f3[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn reference_slopes() {
        let p = ReferenceModelParams::default();
        let scales = ScaleSet::log_spaced(0.1, 1e5, 600).unwrap();
        let c = synth_reference(&p, &scales).unwrap();
        let s2 = StatCurve::new(scales.clone(), c.log_s2.clone(), StatKind::LogS2).unwrap();
        let f3 = StatCurve::new(scales, c.log_f3.clone(), StatKind::LogF3).unwrap();
        let inertial = fit_loglog_slope(&s2, p.inertial_window()).unwrap().slope;
        assert!((inertial - p.zeta2()).abs() < 0.005, "ζ₂ fit {inertial}");
        let diss = fit_loglog_slope(&s2, p.dissipative_window()).unwrap().slope;
        assert!((diss - 2.0).abs() < 0.1, "dissipative slope {diss}");
        let fl = fit_loglog_slope(&f3, p.inertial_window()).unwrap().slope;
        assert!((fl + 0.1).abs() < 0.005, "flatness slope {fl}");
    }

    #[test]
    fn test_fields() {
        let a = make_test_field(TestFieldKind::IidGaussian, 1000, 3).unwrap();
        assert_eq!(a, make_test_field(TestFieldKind::IidGaussian, 1000, 3).unwrap());
        let b = make_test_field(TestFieldKind::PowerLawSpectrum { beta: 5.0 / 3.0 }, 1024, 3).unwrap();
        assert_eq!(b, make_test_field(TestFieldKind::PowerLawSpectrum { beta: 5.0 / 3.0 }, 1024, 3).unwrap());
        let var = b.iter().map(|v| v * v).sum::<f64>() / 1024.0;
        assert!((var - 1.0).abs() < 1e-12);
        assert!(make_test_field(TestFieldKind::PowerLawSpectrum { beta: 0.0 }, 1024, 0).is_err());
        assert!(make_test_field(TestFieldKind::PowerLawSpectrum { beta: 1.0 }, 1000, 0).is_err());
    }

    #[test]
    fn iid_gaussian_increment_variance() {
        let f = make_test_field(TestFieldKind::IidGaussian, 1 << 20, 17).unwrap();
        for l in [1, 4, 16, 64] {
            let s2 = mstats::structure_function(&[&f], l, 2).unwrap();
            assert!((s2 - 2.0).abs() < 0.02, "S2({l}) = {s2}");
        }
    }

    #[test]
    fn power_law_field_is_self_similar() {
        let f = make_test_field(TestFieldKind::PowerLawSpectrum { beta: 5.0 / 3.0 }, 1 << 20, 5).unwrap();
        let scales = ScaleSet::log_spaced_integers(8, 512, 16).unwrap();
        let c = mstats::log_s2_curve(&[&f], &scales).unwrap();
        let slope = fit_loglog_slope(&c, (8.0, 512.0)).unwrap().slope;
        assert!((slope - 2.0 / 3.0).abs() < 0.05, "ζ₂ = {slope}");
    }
}
