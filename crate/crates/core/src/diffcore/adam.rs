use super::{Parameter, Tensor3};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Adam moments and hyperparameters for a fixed parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[Parameter], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &Parameter| vec![0.0; p.value.len()];
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update. Gradients are read, not reset.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves both the parameters and the state untouched.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!("optimizer tracks {} parameters, got {}", state.m.len(), params.len())));
    }
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFiniteGradient { param: p.name.clone() });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let Parameter { value, grad, .. } = p;
        update(value, grad, m, v, (b1, b2, c1, c2, state.eps, lr));
    }
    Ok(())
}

fn update(value: &mut Tensor3, grad: &Tensor3, m: &mut [f64], v: &mut [f64], h: (f64, f64, f64, f64, f64, f64)) {
    let (b1, b2, c1, c2, eps, lr) = h;
    for (((x, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *x -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter {
        Parameter::new("theta", Tensor3::scalar(v))
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![scalar_param(1.5)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, 2e-3).unwrap();
        assert_eq!(p[0].value.item(), 1.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        for &g in &[3.0, -0.25, 1e-3] {
            let mut p = vec![scalar_param(0.0)];
            p[0].grad = Tensor3::scalar(g);
            let mut s = AdamState::new(&p);
            let lr = 2e-3;
            adam_step(&mut p, &mut s, lr).unwrap();
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((p[0].value.item() - expected).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = vec![scalar_param(1.0)];
        let mut s = AdamState::new(&p);
        for _ in 0..200 {
            let theta = p[0].value.item();
            p[0].grad = Tensor3::scalar(2.0 * theta);
            adam_step(&mut p, &mut s, 1e-2).unwrap();
        }
        assert!(p[0].value.item().abs() < 0.05, "θ = {}", p[0].value.item());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = vec![scalar_param(1.0), Parameter::new("dec.bias", Tensor3::scalar(0.0))];
        p[1].grad = Tensor3::scalar(f64::NAN);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &mut s, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "dec.bias"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut p = vec![scalar_param(1.0)];
        let mut s = AdamState::new(&p);
        for t in 1..=5 {
            adam_step(&mut p, &mut s, 1e-3).unwrap();
            assert_eq!(s.step, t);
        }
    }
}
