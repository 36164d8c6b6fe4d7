//! Training criterion, learning-rate schedule and the epoch loop.

use crate::diffcore::{accumulate_grads, adam_step, AdamState, Tape, Tensor3, Var};
use crate::error::{Error, Result};
use crate::mstats::{diff, ScaleSet, EPS_STAT};
use crate::refcurves::{
    load_reference_csv, resample_to_scales, synth_reference, ReferenceCurves, ReferenceModelParams,
};
use crate::unet::{save_checkpoint, Mode, ModelSpec, UNetModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// One piece of a piecewise-constant learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSegment {
    pub from_epoch: usize,
    pub lr: f64,
}

/// Piecewise-constant schedule; the last segment extends indefinitely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule(pub Vec<LrSegment>);

impl Default for LrSchedule {
    fn default() -> Self {
        Self(vec![
            LrSegment { from_epoch: 0, lr: 2e-3 },
            LrSegment { from_epoch: 100, lr: 1e-3 },
            LrSegment { from_epoch: 1000, lr: 5e-4 },
        ])
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let s = &self.0;
        if s.first().map(|g| g.from_epoch) != Some(0) {
            return Err(Error::Parameter("learning-rate schedule must start at epoch 0".into()));
        }
        if s.iter().any(|g| !(g.lr > 0.0 && g.lr.is_finite())) {
            return Err(Error::Parameter("learning rates must be positive".into()));
        }
        if s.windows(2).any(|w| w[1].from_epoch <= w[0].from_epoch || w[1].lr > w[0].lr) {
            return Err(Error::Parameter("schedule epochs must increase and rates must not".into()));
        }
        Ok(())
    }

    /// Rate for `epoch`; a segment boundary belongs to the later segment.
    pub fn rate(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::Contract(format!("negative epoch {epoch}")));
        }
        let e = epoch as usize;
        self.0
            .iter()
            .rev()
            .find(|g| g.from_epoch <= e)
            .map(|g| g.lr)
            .ok_or_else(|| Error::Contract("empty learning-rate schedule".into()))
    }
}

/// Learning rate of the default schedule.
pub fn lr_schedule(epoch: i64) -> Result<f64> {
    LrSchedule::default().rate(epoch)
}

/// Whether the flatness loss compares `ℱ` or `ln(ℱ/3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlatnessForm {
    #[default]
    Raw,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Loss scales: a count of log-spaced integer lags in `[1, N/2]`, or an
/// explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossScales {
    Count(usize),
    Explicit(Vec<usize>),
}

impl LossScales {
    pub fn resolve(&self, n: usize) -> Result<ScaleSet> {
        match self {
            Self::Count(c) => ScaleSet::log_spaced_integers(1, n / 2, *c),
            Self::Explicit(v) => ScaleSet::from_lags(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSource {
    Synth(ReferenceModelParams),
    Csv(PathBuf),
}

impl ReferenceSource {
    /// Reference curves on `scales`, exact for the parametric model and
    /// log-linearly interpolated for a CSV table.
    pub fn curves(&self, scales: &ScaleSet) -> Result<ReferenceCurves> {
        match self {
            Self::Synth(p) => synth_reference(p, scales),
            Self::Csv(path) => resample_to_scales(&load_reference_csv(path)?, scales),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Length of the generated field the losses see.
    pub n_train: usize,
    /// Extra input samples, half trimmed from each side of the output.
    pub pad: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    /// Weight of the three curve losses.
    pub alpha: f64,
    /// Weight of the Gaussianity loss.
    pub beta: f64,
    pub loss_scales: LossScales,
    pub flatness_form: FlatnessForm,
    pub precision: Precision,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub reference: ReferenceSource,
    pub model: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 1 << 15,
            pad: 8192,
            batch: 8,
            epochs: 2000,
            lr_schedule: LrSchedule::default(),
            alpha: 1.0,
            beta: 0.1,
            loss_scales: LossScales::Count(25),
            flatness_form: FlatnessForm::Raw,
            precision: Precision::F64,
            checkpoint_every: 100,
            reference: ReferenceSource::Synth(ReferenceModelParams::default()),
            model: ModelSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn input_len(&self) -> usize {
        self.n_train + self.pad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        self.model.validate()?;
        let m = self.model.length_multiple();
        if self.n_train < 4 || !self.input_len().is_multiple_of(m) || !self.pad.is_multiple_of(2) {
            return bad(format!("n_train + pad must be divisible by {m} with even pad"));
        }
        if self.batch < 2 {
            return bad("batch norm needs a batch of at least 2".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.precision == Precision::F32 {
            return bad("single-precision training is not implemented".into());
        }
        if let ReferenceSource::Synth(p) = &self.reference {
            p.validate()?;
        }
        self.lr_schedule.validate()?;
        self.loss_scales.resolve(self.n_train)?.lags(self.n_train)?;
        Ok(())
    }
}

/// Reference values on integer lags, in the form the criterion compares.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTarget {
    pub lags: Vec<usize>,
    pub log_s2: Vec<f64>,
    pub skew: Vec<f64>,
    /// `ℱʳ` or `ln(ℱʳ/3)` according to `form`.
    pub flat: Vec<f64>,
    pub form: FlatnessForm,
}

impl LossTarget {
    pub fn new(curves: &ReferenceCurves, n: usize, form: FlatnessForm) -> Result<Self> {
        let flat = match form {
            FlatnessForm::Raw => curves.flatness(),
            FlatnessForm::Log => curves.log_f3.clone(),
        };
        Ok(Self { lags: curves.scales.lags(n)?, log_s2: curves.log_s2.clone(), skew: curves.skew.clone(), flat, form })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let scales = cfg.loss_scales.resolve(cfg.n_train)?;
        Self::new(&cfg.reference.curves(&scales)?, cfg.n_train, cfg.flatness_form)
    }
}

/// Scalar values of the criterion and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub s2: f64,
    pub skew: f64,
    pub flat: f64,
    pub kl: f64,
    /// Some `S₂` fell to `ε_stat` or below and was guarded.
    pub degenerate: bool,
}

/// Central `n` samples of the network output, cumulatively summed.
pub fn field_from_output(tape: &mut Tape, output: Var, n: usize) -> Result<Var> {
    let len = tape.value(output).length();
    if n > len || !(len - n).is_multiple_of(2) {
        return Err(Error::Shape(format!("cannot trim output of length {len} symmetrically to {n}")));
    }
    let inner = tape.slice(output, (len - n) / 2, n)?;
    tape.cumsum(inner)
}

/// `α(𝓛_S₂ + 𝓛_𝒮 + 𝓛_ℱ) + β·𝓛_KL` on the field `u` (batch, 1, n).
pub fn field_loss(tape: &mut Tape, u: Var, target: &LossTarget, alpha: f64, beta: f64) -> Result<(Var, LossBreakdown)> {
    let mut terms: [Vec<Var>; 3] = Default::default();
    let mut degenerate = false;
    for (i, &lag) in target.lags.iter().enumerate() {
        let (s2, s3, s4) = diff::moments(tape, u, lag)?;
        degenerate |= tape.value(s2).item() <= EPS_STAT;
        let ls2 = diff::log_s2(tape, s2)?;
        let sk = diff::skewness(tape, s2, s3)?;
        let mut fl = diff::flatness(tape, s2, s4)?;
        if target.form == FlatnessForm::Log {
            let f3 = tape.mul_const(fl, 1.0 / 3.0)?;
            fl = tape.ln(f3)?;
        }
        for (k, (v, r)) in [(ls2, target.log_s2[i]), (sk, target.skew[i]), (fl, target.flat[i])].into_iter().enumerate()
        {
            let d = tape.add_const(v, -r)?;
            terms[k].push(tape.square(d)?);
        }
    }
    let mut sums = Vec::with_capacity(3);
    for t in &terms {
        let mut acc = tape.constant(Tensor3::scalar(0.0))?;
        for &v in t {
            acc = tape.add(acc, v)?;
        }
        sums.push(acc);
    }
    let kl = diff::kl_to_standard_gaussian(tape, u)?;
    let curves = tape.add(sums[0], sums[1])?;
    let curves = tape.add(curves, sums[2])?;
    let a = tape.mul_const(curves, alpha)?;
    let b = tape.mul_const(kl, beta)?;
    let total = tape.add(a, b)?;
    let item = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        total: item(total),
        s2: item(sums[0]),
        skew: item(sums[1]),
        flat: item(sums[2]),
        kl: item(kl),
        degenerate,
    };
    Ok((total, breakdown))
}

/// Trim, integrate and score a batch of network outputs.
pub fn compute_loss(
    tape: &mut Tape,
    output: Var,
    n_train: usize,
    target: &LossTarget,
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    let u = field_from_output(tape, output, n_train)?;
    field_loss(tape, u, target, alpha, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_s2: f64,
    pub loss_skew: f64,
    pub loss_flat: f64,
    pub loss_kl: f64,
    pub wall_time_s: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,loss,loss_s2,loss_skew,loss_flat,loss_kl,wall_time_s";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}",
            self.epoch,
            self.lr,
            self.loss,
            self.loss_s2,
            self.loss_skew,
            self.loss_flat,
            self.loss_kl,
            self.wall_time_s
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog(pub Vec<EpochRecord>);

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UNetModel,
    pub adam: AdamState,
    pub log: TrainLog,
    pub final_checkpoint: PathBuf,
}

/// Seeded source of fresh standard-normal training inputs, independent of
/// the weight initialisation stream.
pub struct NoiseStream(ChaCha8Rng);

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self::on_stream(seed, 1)
    }

    fn on_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn batch(&mut self, batch: usize, len: usize) -> Tensor3 {
        let v: Vec<f64> = (0..batch * len).map(|_| StandardNormal.sample(&mut self.0)).collect();
        Tensor3::new(batch, 1, len, v).expect("shape matches data")
    }
}

/// One optimisation step: forward, criterion, backward, Adam. Returns
/// the loss breakdown measured before the update.
pub fn train_step(
    model: &mut UNetModel,
    adam: &mut AdamState,
    noise: &Tensor3,
    cfg: &TrainConfig,
    target: &LossTarget,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let x = tape.constant(noise.clone())?;
    let (y, stats) = model.forward(&mut tape, x, Mode::Train)?;
    let (loss, breakdown) = compute_loss(&mut tape, y, cfg.n_train, target, cfg.alpha, cfg.beta)?;
    if !breakdown.total.is_finite() {
        return Ok(breakdown);
    }
    let grads = tape.backward(loss)?;
    model.zero_grad();
    accumulate_grads(&grads, &mut model.params);
    drop(grads);
    adam_step(&mut model.params, adam, lr)?;
    model.apply_batch_stats(&stats)?;
    Ok(breakdown)
}

/// Noise batches averaged when batch-norm statistics are recomputed.
pub const BN_RECALIBRATION_BATCHES: usize = 16;

/// Recompute the running batch-norm statistics for the current weights
/// from a fixed noise stream, so that eval-mode inference matches what
/// the criterion saw. The moving averages kept during training lag behind
/// the weights, and any resulting offset in the increments is amplified
/// by the cumulative sum into a drift.
pub fn recalibrate_bn(model: &mut UNetModel, cfg: &TrainConfig) -> Result<()> {
    let mut noise = NoiseStream::on_stream(cfg.seed, 2);
    let batches: Vec<Tensor3> =
        (0..BN_RECALIBRATION_BATCHES).map(|_| noise.batch(cfg.batch, cfg.input_len())).collect();
    model.recalibrate_bn(batches)
}

fn meta(cfg: &TrainConfig, epoch: usize) -> serde_json::Value {
    serde_json::json!({ "config": cfg, "epochs_completed": epoch })
}

/// Train from scratch, writing `train_log.csv`, periodic checkpoints in
/// `out_dir/checkpoints/` and `out_dir/final.nntb`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let target = LossTarget::from_config(cfg)?;
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_log.csv"))?);
    writeln!(log_file, "{TRAIN_LOG_HEADER}")?;

    let mut model = UNetModel::build(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut noise = NoiseStream::new(cfg.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.rate(epoch as i64)?;
        let x = noise.batch(cfg.batch, cfg.input_len());
        let b = train_step(&mut model, &mut adam, &x, cfg, &target, lr)?;
        if !b.total.is_finite() {
            let path = out_dir.join(format!("diagnostic_epoch{epoch:05}.nntb"));
            save_checkpoint(&path, &model, Some(&adam), Some(&meta(cfg, epoch)))?;
            return Err(Error::NonFiniteLoss { epoch, checkpoint: path });
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: b.total,
            loss_s2: b.s2,
            loss_skew: b.skew,
            loss_flat: b.flat,
            loss_kl: b.kl,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        writeln!(log_file, "{}", rec.csv_row())?;
        log_file.flush()?;
        log::info!(
            "epoch {epoch}: loss {:.4e} (S2 {:.3e}, skew {:.3e}, flat {:.3e}, KL {:.3e})",
            b.total,
            b.s2,
            b.skew,
            b.flat,
            b.kl
        );
        log.0.push(rec);
        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            let path = out_dir.join("checkpoints").join(format!("epoch{done:05}.nntb"));
            recalibrate_bn(&mut model, cfg)?;
            save_checkpoint(&path, &model, Some(&adam), Some(&meta(cfg, done)))?;
        }
    }
    if cfg.epochs > 0 {
        recalibrate_bn(&mut model, cfg)?;
    }
    let final_checkpoint = out_dir.join("final.nntb");
    save_checkpoint(&final_checkpoint, &model, Some(&adam), Some(&meta(cfg, cfg.epochs)))?;
    Ok(TrainOutcome { model, adam, log, final_checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0).unwrap(), 2e-3);
        assert_eq!(lr_schedule(50).unwrap(), 2e-3);
        assert_eq!(lr_schedule(99).unwrap(), 2e-3);
        assert_eq!(lr_schedule(100).unwrap(), 1e-3);
        assert_eq!(lr_schedule(999).unwrap(), 1e-3);
        assert_eq!(lr_schedule(1500).unwrap(), 5e-4);
        assert_eq!(lr_schedule(5000).unwrap(), 5e-4);
        assert!(matches!(lr_schedule(-1), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_validation() {
        let s = LrSchedule(vec![LrSegment { from_epoch: 0, lr: 1e-3 }, LrSegment { from_epoch: 10, lr: 2e-3 }]);
        assert!(s.validate().is_err());
        let s = LrSchedule(vec![LrSegment { from_epoch: 5, lr: 1e-3 }]);
        assert!(s.validate().is_err());
        LrSchedule::default().validate().unwrap();
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig { batch: 1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { pad: 10, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { precision: Precision::F32, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { beta: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"batch": 4, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let c: TrainConfig = serde_json::from_str(r#"{"batch": 4, "loss_scales": [1, 2, 8]}"#).unwrap();
        assert_eq!(c.batch, 4);
        assert_eq!(c.loss_scales, LossScales::Explicit(vec![1, 2, 8]));
    }

    #[test]
    fn trim_and_integrate() {
        let mut tape = Tape::new();
        let out = tape.constant(Tensor3::from_vec((0..8).map(f64::from).collect()).unwrap()).unwrap();
        let u = field_from_output(&mut tape, out, 4).unwrap();
        assert_eq!(tape.value(u).data(), &[2.0, 5.0, 9.0, 14.0]);
        assert!(field_from_output(&mut tape, out, 5).is_err());
    }
}
