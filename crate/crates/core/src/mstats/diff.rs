//! Tape-recorded statistics for the training criterion.
//!
//! Every statistic pools all rows of the input (batch and position
//! jointly) into a single expectation.

use super::{standard_gaussian_bins, EPS_KL, EPS_STAT, KL_GRID};
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

/// Structure functions `(S₂, S₃, S₄)` at one lag, as scalar vars.
pub fn moments(tape: &mut Tape, u: Var, lag: usize) -> Result<(Var, Var, Var)> {
    Ok((tape.structure_function(u, lag, 2)?, tape.structure_function(u, lag, 3)?, tape.structure_function(u, lag, 4)?))
}

/// `ln(S₂ + ε_stat)`.
pub fn log_s2(tape: &mut Tape, s2: Var) -> Result<Var> {
    let g = tape.add_const(s2, EPS_STAT)?;
    tape.ln(g)
}

/// `S₃ / (S₂ + ε_stat)^{3/2}`.
pub fn skewness(tape: &mut Tape, s2: Var, s3: Var) -> Result<Var> {
    let g = tape.add_const(s2, EPS_STAT)?;
    let d = tape.powf(g, 1.5)?;
    tape.div(s3, d)
}

/// `S₄ / (S₂ + ε_stat)²`.
pub fn flatness(tape: &mut Tape, s2: Var, s4: Var) -> Result<Var> {
    let g = tape.add_const(s2, EPS_STAT)?;
    let d = tape.square(g)?;
    tape.div(s4, d)
}

/// Centre and standardise every value of `u`, soft-histogram them and
/// return the KL divergence to the binned standard Gaussian.
pub fn kl_to_standard_gaussian(tape: &mut Tape, u: Var) -> Result<Var> {
    let m = tape.mean(u)?;
    let c = tape.sub(u, m)?;
    let c2 = tape.square(c)?;
    let var = tape.mean(c2)?;
    if tape.value(var).item() <= 0.0 {
        return Err(Error::DegenerateStatistics("zero variance".into()));
    }
    let sd = tape.powf(var, 0.5)?;
    let z = tape.div(c, sd)?;
    let p = tape.soft_histogram(z, KL_GRID)?;
    tape.kl_divergence(p, &standard_gaussian_bins(KL_GRID), EPS_KL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor3;
    use crate::mstats::{self, ScaleSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn differentiable_and_analysis_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let mut acc = 0.0;
                (0..700)
                    .map(|_| {
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        acc += z + 0.3 * z * z;
                        acc
                    })
                    .collect()
            })
            .collect();
        let flat: Vec<f64> = rows.concat();
        let mut tape = Tape::new();
        let u = tape.constant(Tensor3::new(3, 1, 700, flat).unwrap()).unwrap();
        let scales = ScaleSet::from_lags(&[1, 3, 17, 90]).unwrap();
        let ls2 = mstats::log_s2_curve(&rows, &scales).unwrap();
        let sk = mstats::skewness_curve(&rows, &scales).unwrap();
        let fl = mstats::flatness_curve(&rows, &scales).unwrap();
        for (i, l) in scales.lags(700).unwrap().into_iter().enumerate() {
            let (s2, s3, s4) = moments(&mut tape, u, l).unwrap();
            let a = log_s2(&mut tape, s2).unwrap();
            let b = skewness(&mut tape, s2, s3).unwrap();
            let c = flatness(&mut tape, s2, s4).unwrap();
            assert!(rel(tape.value(a).item(), ls2.values[i]) < 1e-10);
            assert!(rel(tape.value(b).item(), sk.values[i]) < 1e-10);
            assert!(rel(tape.value(c).item(), fl.values[i]) < 1e-10);
        }
        let kl = kl_to_standard_gaussian(&mut tape, u).unwrap();
        let kl_plain = mstats::kl_to_standard_gaussian(&rows).unwrap();
        assert!(rel(tape.value(kl).item(), kl_plain) < 1e-10);
    }

    #[test]
    fn guarded_path_is_finite_on_constant_field() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor3::filled(2, 1, 64, 1.5)).unwrap();
        let (s2, s3, s4) = moments(&mut tape, u, 4).unwrap();
        let vals = [
            log_s2(&mut tape, s2).unwrap(),
            skewness(&mut tape, s2, s3).unwrap(),
            flatness(&mut tape, s2, s4).unwrap(),
        ];
        assert!(vals.iter().all(|&v| tape.value(v).item().is_finite()));
        assert!(matches!(kl_to_standard_gaussian(&mut tape, u), Err(Error::DegenerateStatistics(_))));
    }
}
