use super::{Tape, Tensor3, Var};
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Summary of a reverse-mode vs central-difference comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Which coordinates of the inputs to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// Uniform random subsample of at most `count` coordinates.
    Sample {
        count: usize,
        seed: u64,
    },
    /// At most `count` random coordinates of every input.
    PerInput {
        count: usize,
        seed: u64,
    },
}

/// Compare the gradient of the scalar built by `f` with central finite
/// differences of step `h`, over every coordinate of `inputs` (or a
/// random subsample of them).
///
/// The relative error of a coordinate is `|a − n| / (max(|a|, |n|) + τ)`
/// with `τ = 1e-10·(1 + max |a|) + 4e4·ε·max(|f|, 1)/h`. The second term is
/// ten thousand times the rounding noise of a central difference of an f64
/// scalar of size `|f|`: gradients below it are not resolvable by finite
/// differences (for example the exactly-zero gradient of a bias that
/// feeds a batch norm).
pub fn grad_check<F>(op: &str, inputs: &[Tensor3], h: f64, coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Contract(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect::<Result<_>>()?;
    let loss = f(&mut tape, &vars)?;
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor3> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor3::zeros_like(t)))
        .collect();
    drop(grads);

    let coords: Vec<(usize, usize)> = {
        let all: Vec<(usize, usize)> =
            inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
        match coverage {
            Coverage::All => all,
            Coverage::Sample { count, seed } if count < all.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked: Vec<usize> = sample(&mut rng, all.len(), count).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|k| all[k]).collect()
            }
            Coverage::Sample { .. } => all,
            Coverage::PerInput { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = Vec::new();
                for (i, t) in inputs.iter().enumerate() {
                    let mut idx: Vec<usize> = sample(&mut rng, t.len(), count.min(t.len())).into_vec();
                    idx.sort_unstable();
                    picked.extend(idx.into_iter().map(|j| (i, j)));
                }
                picked
            }
        }
    };

    let eval = |perturbed: &[Tensor3]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect::<Result<_>>()?;
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let max_abs = coords.iter().map(|&(i, j)| analytic[i].data()[j].abs()).fold(0.0, f64::max);
    let tau = 1e-10 * (1.0 + max_abs) + 4e4 * f64::EPSILON * f0.abs().max(1.0) / h;
    let mut work: Vec<Tensor3> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    for &(i, j) in &coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + tau);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        n_checked: coords.len(),
        max_rel_err: max_rel,
        mean_rel_err: if coords.is_empty() { 0.0 } else { sum_rel / coords.len() as f64 },
    })
}

/// `Σ r ⊙ v` for a fixed standard-normal `r`: a scalar whose gradient
/// exercises every output coordinate of `v`.
pub fn random_projection(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let (nb, nc, nl) = tape.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..nb * nc * nl).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let r = tape.constant(Tensor3::new(nb, nc, nl, r)?)?;
    let prod = tape.mul(v, r)?;
    tape.sum(prod)
}
