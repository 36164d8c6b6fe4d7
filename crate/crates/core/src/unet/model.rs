use super::spec::{ConvSpec, ModelSpec};
use crate::diffcore::{BatchStats, Parameter, Tape, Tensor3, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of train-mode batches folded in; zero means uninitialised.
    pub updates: u64,
}

impl BnRunning {
    fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], updates: 0 }
    }
}

/// Parameter indices of one conv + batch-norm layer.
#[derive(Debug, Clone, Copy)]
struct LayerParams {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
}

/// The U-net with its parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel {
    pub spec: ModelSpec,
    pub params: Vec<Parameter>,
    pub bn: Vec<BnRunning>,
    pub seed: u64,
}

fn layer_names(spec: &ModelSpec) -> Vec<String> {
    let mut names: Vec<String> = (0..spec.encoder.len()).map(|i| format!("enc{i}")).collect();
    names.push("bridge.conv".into());
    names.push("bridge.tconv".into());
    names.extend((0..spec.decoder.len()).map(|i| format!("dec{i}")));
    names
}

/// Number of conv layers before the bridge transpose conv; layers at or
/// after this index are transpose convolutions.
fn first_tconv(spec: &ModelSpec) -> usize {
    spec.encoder.len() + 1
}

impl UNetModel {
    /// Build a model with fan-in scaled uniform weights (ReLU gain),
    /// zero biases, unit γ and zero β. Deterministic in `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let layers = spec.layers();
        let tconv_from = first_tconv(&spec);
        for (i, (l, name)) in layers.iter().zip(layer_names(&spec)).enumerate() {
            let ConvSpec { cin, cout, k } = *l;
            let fan_in = (cin * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..cin * cout * k).map(|_| rng.random_range(-bound..bound)).collect();
            let shape = if i >= tconv_from { (cin, cout, k) } else { (cout, cin, k) };
            params.push(Parameter::new(format!("{name}.weight"), Tensor3::new(shape.0, shape.1, shape.2, w)?));
            params.push(Parameter::new(format!("{name}.bias"), Tensor3::zeros(1, cout, 1)));
            params.push(Parameter::new(format!("{name}.bn.gamma"), Tensor3::filled(1, cout, 1, 1.0)));
            params.push(Parameter::new(format!("{name}.bn.beta"), Tensor3::zeros(1, cout, 1)));
        }
        let bn = layers.iter().map(|l| BnRunning::new(l.cout)).collect();
        Ok(Self { spec, params, bn, seed })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn stats_initialized(&self) -> bool {
        self.bn.iter().all(|b| b.updates > 0)
    }

    fn layer(&self, i: usize) -> LayerParams {
        LayerParams { weight: 4 * i, bias: 4 * i + 1, gamma: 4 * i + 2, beta: 4 * i + 3 }
    }

    pub fn check_input(&self, x: &Tensor3) -> Result<()> {
        let cin = self.spec.encoder[0].cin;
        if x.channels() != cin {
            return Err(Error::Shape(format!("input has {} channels, model expects {cin}", x.channels())));
        }
        let m = self.spec.length_multiple();
        if !x.length().is_multiple_of(m) {
            return Err(Error::Shape(format!("input length {} is not divisible by {m}", x.length())));
        }
        Ok(())
    }

    /// Record the forward pass of `x` on `tape`.
    ///
    /// Pure with respect to the model: in train mode the batch statistics
    /// of every BN layer are returned for [`UNetModel::apply_batch_stats`].
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        let pvars: Vec<Var> =
            self.params.iter().enumerate().map(|(i, p)| tape.param(p.value.clone(), i)).collect::<Result<_>>()?;
        self.forward_with(tape, x, &pvars, mode)
    }

    /// [`UNetModel::forward`] with the parameters supplied as tape
    /// variables (one per entry of `self.params`, same shapes).
    pub fn forward_with(&self, tape: &mut Tape, x: Var, pvars: &[Var], mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        self.check_input(tape.value(x))?;
        if pvars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter vars for {} parameters",
                pvars.len(),
                self.params.len()
            )));
        }
        if mode == Mode::Eval && !self.stats_initialized() {
            return Err(Error::UninitializedStats("eval-mode forward before any train-mode pass".into()));
        }
        let mut stats = Vec::new();
        let depth = self.spec.encoder.len();
        let n_layers = self.spec.layers().len();
        let mut block = |tape: &mut Tape, h: Var, i: usize, relu: bool| -> Result<Var> {
            let lp = self.layer(i);
            let (w, b) = (pvars[lp.weight], pvars[lp.bias]);
            let h = if i >= first_tconv(&self.spec) {
                tape.conv_transpose1d(h, w, Some(b))?
            } else {
                tape.conv1d(h, w, Some(b))?
            };
            let (g, be) = (pvars[lp.gamma], pvars[lp.beta]);
            let eps = self.spec.bn_eps;
            let h = match mode {
                Mode::Train => {
                    let (h, s) = tape.batch_norm_train(h, g, be, eps)?;
                    stats.push(s);
                    h
                }
                Mode::Eval => tape.batch_norm_eval(h, g, be, &self.bn[i].mean, &self.bn[i].var, eps)?,
            };
            if relu {
                tape.relu(h)
            } else {
                Ok(h)
            }
        };

        let mut taps = Vec::with_capacity(depth);
        let mut h = x;
        for i in 0..depth {
            let a = block(tape, h, i, true)?;
            taps.push(a);
            h = tape.avg_pool1d(a)?;
        }
        h = block(tape, h, depth, true)?;
        h = block(tape, h, depth + 1, true)?;
        for d in 0..depth {
            h = tape.upsample1d(h)?;
            for s in self.spec.skips.iter().filter(|s| s.decoder == d) {
                h = tape.add(h, taps[s.encoder])?;
            }
            let layer = depth + 2 + d;
            let relu = layer + 1 < n_layers || self.spec.final_relu;
            h = block(tape, h, layer, relu)?;
        }
        Ok((h, stats))
    }

    /// Fold train-mode batch statistics into the running estimates
    /// (`running ← (1−m)·running + m·batch`, unbiased batch variance).
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.bn.len() {
            return Err(Error::Contract(format!("{} batch statistics for {} BN layers", stats.len(), self.bn.len())));
        }
        let m = self.spec.bn_momentum;
        for (run, s) in self.bn.iter_mut().zip(stats) {
            let unbias = s.count as f64 / (s.count as f64 - 1.0);
            for c in 0..run.mean.len() {
                run.mean[c] = (1.0 - m) * run.mean[c] + m * s.mean[c];
                run.var[c] = (1.0 - m) * run.var[c] + m * s.var[c] * unbias;
            }
            run.updates += 1;
        }
        Ok(())
    }

    /// Replace the running statistics by the plain average of the
    /// train-mode batch statistics over `batches` (unbiased variances),
    /// with the weights held fixed. The result does not depend on the
    /// previous running statistics; `updates` becomes the batch count.
    pub fn recalibrate_bn<I: IntoIterator<Item = Tensor3>>(&mut self, batches: I) -> Result<()> {
        let mut acc: Vec<BnRunning> = self
            .bn
            .iter()
            .map(|b| BnRunning { mean: vec![0.0; b.mean.len()], var: vec![0.0; b.var.len()], updates: 0 })
            .collect();
        for x in batches {
            let mut tape = Tape::new();
            let xv = tape.constant(x)?;
            let (_, stats) = self.forward(&mut tape, xv, Mode::Train)?;
            for (a, s) in acc.iter_mut().zip(&stats) {
                let unbias = s.count as f64 / (s.count as f64 - 1.0);
                for c in 0..a.mean.len() {
                    a.mean[c] += s.mean[c];
                    a.var[c] += s.var[c] * unbias;
                }
                a.updates += 1;
            }
        }
        if acc.first().is_some_and(|a| a.updates == 0) {
            return Err(Error::Contract("batch-norm recalibration needs at least one batch".into()));
        }
        for a in &mut acc {
            let k = a.updates as f64;
            a.mean.iter_mut().for_each(|v| *v /= k);
            a.var.iter_mut().for_each(|v| *v /= k);
        }
        self.bn = acc;
        Ok(())
    }

    /// Evaluate the network on `noise` and return its output. In train
    /// mode the running statistics are updated.
    pub fn run(&mut self, noise: &Tensor3, mode: Mode) -> Result<Tensor3> {
        let mut tape = Tape::new();
        let x = tape.constant(noise.clone())?;
        let (y, stats) = self.forward(&mut tape, x, mode)?;
        if mode == Mode::Train {
            self.apply_batch_stats(&stats)?;
        }
        Ok(tape.value(y).clone())
    }

    /// Eval-mode inference without mutating the model.
    pub fn infer(&self, noise: &Tensor3) -> Result<Tensor3> {
        let mut tape = Tape::new();
        let x = tape.constant(noise.clone())?;
        let (y, _) = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }
}
