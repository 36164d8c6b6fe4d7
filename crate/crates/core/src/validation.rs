//! Finite-difference gradient checks over every differentiable op and
//! over the full training criterion on a tiny model.

use crate::diffcore::{grad_check, random_projection, Coverage, GradCheckReport, HistGrid, Tape, Tensor3, Var};
use crate::error::Result;
use crate::mstats::{diff, EPS_KL};
use crate::refcurves::{synth_reference, ReferenceModelParams};
use crate::trainer::{compute_loss, FlatnessForm, LossScales, LossTarget};
use crate::unet::{Mode, ModelSpec, UNetModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Tolerance for ops that are linear in their inputs.
pub const LINEAR_TOL: f64 = 1e-8;
/// Tolerance for everything else.
pub const NONLINEAR_TOL: f64 = 1e-4;

/// A gradient-check report with the tolerance it is held to.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(report: GradCheckReport, tolerance: f64) -> Self {
        let passed = report.passes(tolerance);
        Self { report, tolerance, passed }
    }
}

fn normal(rng: &mut ChaCha8Rng, b: usize, c: usize, l: usize) -> Tensor3 {
    Tensor3::new(b, c, l, (0..b * c * l).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

fn positive(rng: &mut ChaCha8Rng, b: usize, c: usize, l: usize) -> Tensor3 {
    Tensor3::new(b, c, l, (0..b * c * l).map(|_| rng.random_range(0.5..2.0)).collect()).expect("shape matches")
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
/// Name, inputs, (step, tolerance) and the op under test.
type OpCase = (&'static str, Vec<Tensor3>, (f64, f64), OpFn);

/// Project the op output onto a fixed random direction so every output
/// coordinate contributes to the checked scalar.
fn projected(seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpFn {
    Box::new(move |t: &mut Tape, v: &[Var]| {
        let y = f(t, v)?;
        random_projection(t, y, seed)
    })
}

/// Check every differentiable op against central differences.
pub fn op_gradchecks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let x = normal(r, 2, 3, 16);
    let y = normal(r, 2, 3, 16);
    let pos = positive(r, 2, 3, 16);
    let s = Tensor3::scalar(1.7);
    let wc = normal(r, 4, 3, 4);
    let wt = normal(r, 3, 4, 5);
    let bias = normal(r, 1, 4, 1);
    let gamma = positive(r, 1, 3, 1);
    let beta = normal(r, 1, 3, 1);
    let field = normal(r, 2, 1, 40);
    let mut probs = positive(r, 1, 1, 12);
    let total: f64 = probs.data().iter().sum();
    probs.data_mut().iter_mut().for_each(|v| *v /= total);
    let q: Vec<f64> = positive(r, 1, 1, 12).data().iter().map(|v| v / 15.0).collect();
    let rm: Vec<f64> = (0..3).map(|_| r.sample(StandardNormal)).collect();
    let rv: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();

    let lin = |h: f64| (h, LINEAR_TOL);
    let nl = |h: f64| (h, NONLINEAR_TOL);
    let cases: Vec<OpCase> = vec![
        ("add", vec![x.clone(), y.clone()], lin(1e-4), projected(1, |t, v| t.add(v[0], v[1]))),
        ("add (scalar broadcast)", vec![x.clone(), s.clone()], lin(1e-4), projected(2, |t, v| t.add(v[0], v[1]))),
        ("sub", vec![x.clone(), y.clone()], lin(1e-4), projected(3, |t, v| t.sub(v[0], v[1]))),
        ("add_const", vec![x.clone()], lin(1e-4), projected(4, |t, v| t.add_const(v[0], 0.3))),
        ("mul_const", vec![x.clone()], lin(1e-4), projected(5, |t, v| t.mul_const(v[0], -1.3))),
        ("neg", vec![x.clone()], lin(1e-4), projected(6, |t, v| t.neg(v[0]))),
        ("mean", vec![x.clone()], lin(1e-4), Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0]))),
        ("sum", vec![x.clone()], lin(1e-4), Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0]))),
        (
            "conv1d",
            vec![x.clone(), wc.clone(), bias.clone()],
            lin(1e-4),
            projected(7, |t, v| t.conv1d(v[0], v[1], Some(v[2]))),
        ),
        (
            "conv_transpose1d",
            vec![x.clone(), wt.clone(), bias.clone()],
            lin(1e-4),
            projected(8, |t, v| t.conv_transpose1d(v[0], v[1], Some(v[2]))),
        ),
        ("avg_pool1d", vec![x.clone()], lin(1e-4), projected(9, |t, v| t.avg_pool1d(v[0]))),
        ("upsample1d", vec![x.clone()], lin(1e-4), projected(10, |t, v| t.upsample1d(v[0]))),
        ("cumsum", vec![x.clone()], lin(1e-4), projected(11, |t, v| t.cumsum(v[0]))),
        ("slice", vec![x.clone()], lin(1e-4), projected(12, |t, v| t.slice(v[0], 3, 9))),
        ("increments", vec![x.clone()], lin(1e-4), projected(13, |t, v| t.increments(v[0], 5))),
        ("mul", vec![x.clone(), y.clone()], nl(1e-6), projected(14, |t, v| t.mul(v[0], v[1]))),
        ("mul (scalar broadcast)", vec![x.clone(), s.clone()], nl(1e-6), projected(15, |t, v| t.mul(v[0], v[1]))),
        ("div", vec![x.clone(), pos.clone()], nl(1e-6), projected(16, |t, v| t.div(v[0], v[1]))),
        ("div (scalar broadcast)", vec![s.clone(), pos.clone()], nl(1e-6), projected(17, |t, v| t.div(v[0], v[1]))),
        ("square", vec![x.clone()], nl(1e-6), projected(18, |t, v| t.square(v[0]))),
        ("powf", vec![pos.clone()], nl(1e-6), projected(19, |t, v| t.powf(v[0], 1.5))),
        ("ln", vec![pos.clone()], nl(1e-6), projected(20, |t, v| t.ln(v[0]))),
        ("relu", vec![x.clone()], nl(1e-6), projected(21, |t, v| t.relu(v[0]))),
        (
            "batch_norm_train",
            vec![x.clone(), gamma.clone(), beta.clone()],
            nl(1e-6),
            projected(22, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
        ),
        (
            "batch_norm_eval",
            vec![x.clone(), gamma.clone(), beta.clone()],
            lin(1e-4),
            projected(23, move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)),
        ),
        (
            "structure_function p=2",
            vec![field.clone()],
            nl(1e-6),
            Box::new(|t: &mut Tape, v: &[Var]| t.structure_function(v[0], 3, 2)),
        ),
        (
            "structure_function p=3",
            vec![field.clone()],
            nl(1e-6),
            Box::new(|t: &mut Tape, v: &[Var]| t.structure_function(v[0], 3, 3)),
        ),
        (
            "structure_function p=4",
            vec![field.clone()],
            nl(1e-6),
            Box::new(|t: &mut Tape, v: &[Var]| t.structure_function(v[0], 3, 4)),
        ),
        (
            "soft_histogram",
            vec![field.clone()],
            nl(1e-6),
            projected(24, |t, v| t.soft_histogram(v[0], HistGrid { bins: 20, range: 3.0, bandwidth: 0.2 })),
        ),
        (
            "kl_divergence",
            vec![probs],
            nl(1e-6),
            Box::new(move |t: &mut Tape, v: &[Var]| t.kl_divergence(v[0], &q, EPS_KL)),
        ),
        (
            "kl_to_standard_gaussian",
            vec![field.clone()],
            nl(1e-6),
            Box::new(|t: &mut Tape, v: &[Var]| diff::kl_to_standard_gaussian(t, v[0])),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, (h, tol), f)| {
            let report = grad_check(name, &inputs, h, Coverage::All, f)?;
            Ok(CheckResult::new(report, tol))
        })
        .collect()
}

/// Check the gradient of the full criterion with respect to every
/// parameter tensor of a model, at `per_tensor` random coordinates each.
pub fn model_loss_gradcheck(
    spec: &ModelSpec,
    n_train: usize,
    batch: usize,
    per_tensor: usize,
    seed: u64,
) -> Result<CheckResult> {
    let model = UNetModel::build(spec.clone(), seed)?;
    let m = spec.length_multiple();
    let pad = (m - n_train % m) % m + 2 * m;
    let len = n_train + pad;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = normal(&mut rng, batch, 1, len);
    let scales = LossScales::Count(8).resolve(n_train)?;
    let target =
        LossTarget::new(&synth_reference(&ReferenceModelParams::default(), &scales)?, n_train, FlatnessForm::Raw)?;
    let inputs: Vec<Tensor3> = model.params.iter().map(|p| p.value.clone()).collect();
    let report =
        grad_check("training criterion", &inputs, 1e-5, Coverage::PerInput { count: per_tensor, seed }, |t, vars| {
            let x = t.constant(noise.clone())?;
            let (y, _) = model.forward_with(t, x, vars, Mode::Train)?;
            Ok(compute_loss(t, y, n_train, &target, 1.0, 0.1)?.0)
        })?;
    Ok(CheckResult::new(report, NONLINEAR_TOL))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_gradchecks(3).unwrap() {
            assert!(c.passed, "{} max rel err {:e}", c.report.op, c.report.max_rel_err);
        }
    }

    #[test]
    fn criterion_gradient_on_tiny_model() {
        let c = model_loss_gradcheck(&ModelSpec::default(), 256, 2, 3, 11).unwrap();
        assert!(c.passed, "max rel err {:e} over {}", c.report.max_rel_err, c.report.n_checked);
    }
}
