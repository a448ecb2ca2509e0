//! Optimizer, training loop, sampling and evaluation.

use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfcast_autodiff::{Ctx, ParamId, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{denormalize, NativeRange, SequenceWindow};
use crate::error::{Error, Result};
use crate::flow::{draw_interpolant, euler_sample, gaussian, rf_loss_var, EmaState, SamplerConfig};
use crate::metrics::{MetricsSummary, ThresholdSet, Verification};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate, annealed to `min_lr` by a half cosine.
    pub lr: f64,
    pub min_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Caps the total number of optimizer steps when set.
    pub max_steps: Option<u64>,
    pub ema_decay: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub sampler_steps: usize,
    /// Noise seed of validation sampling, fixed across epochs.
    pub val_seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            min_lr: 0.0,
            batch: 8,
            epochs: 500,
            max_steps: None,
            ema_decay: 0.95,
            seed: 0,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            sampler_steps: 5,
            val_seed: 1234,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self { epochs: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!("need 0 <= min_lr <= lr with lr > 0, got {} and {}", self.min_lr, self.lr)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("train.ema_decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        if self.batch == 0 || self.epochs == 0 || self.sampler_steps == 0 || self.validate_every == 0 {
            return Err(Error::Config("train.batch, epochs, sampler_steps and validate_every must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("train.max_steps must be positive when set".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("train.beta1/beta2 must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0 and grad_clip > 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch) as u64
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        let full = self.epochs as u64 * self.steps_per_epoch(n_train);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Half-cosine from `lr` at step 0 to `min_lr` at step `total - 1`.
pub fn cosine_lr(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return cfg.lr;
    }
    let p = (step.min(total - 1)) as f64 / (total - 1) as f64;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Adaptive moments with decoupled weight decay on `Weight` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.entries().iter().map(|e| Tensor::zeros(e.value().shape().to_vec())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)], lr: f64, cfg: &TrainConfig, grad_scale: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.0;
            let decays = params.kind(*id).decays();
            let p = params.get_mut(*id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64 * grad_scale;
                let mn = b1 * *mv as f64 + (1.0 - b1) * gv;
                let vn = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let mut x = *pv as f64;
                if decays {
                    x -= lr * cfg.weight_decay * x;
                }
                x -= lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
                *pv = x as f32;
            }
        }
    }
}

/// Stacks per-window `[C, H, W]` arrays into `[N, C, H, W]`.
pub fn stack(frames: &[&Array3<f32>]) -> Result<Tensor<f32>> {
    let Some(first) = frames.first() else { return Err(Error::Invalid("empty batch".into())) };
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if f.dim() != (c, h, w) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", (c, h, w), f.dim())));
        }
        data.extend(f.iter().copied());
    }
    Ok(Tensor::new(vec![frames.len(), c, h, w], data))
}

fn unstack(t: &Tensor<f32>) -> Vec<Array3<f32>> {
    let (n, c, h, w) = t.dims4();
    let arr = Array4::from_shape_vec((n, c, h, w), t.data().to_vec()).expect("shape matches data");
    (0..n).map(|i| arr.slice(s![i, .., .., ..]).to_owned()).collect()
}

/// One optimizer step's diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: u64,
    pub step: u64,
    pub csi_m: f64,
    pub best_csi_m: f64,
    /// Set when this validation raised the best score.
    pub improved: bool,
}

/// Serializable generator position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Invalid(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Model, weights and optimizer state of a run in progress.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub ema: EmaState<f32>,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub best_csi_m: Option<f64>,
    /// EMA weights at the best validation score.
    pub best_params: Option<ParamStore<f32>>,
    pub history: Vec<StepRecord>,
    pub validation: Vec<ValRecord>,
}

/// Per-epoch window order, independent of the main generator.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e90c_u64.wrapping_mul(epoch + 1));
    idx.shuffle(&mut rng);
    idx
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut params = ParamStore::new();
        let model = Model::new(&config.model, &mut params, &mut rng)?;
        let ema = EmaState::new(&params, config.train.ema_decay)?;
        let opt = AdamW::new(&params);
        Ok(Self {
            config,
            model,
            params,
            ema,
            opt,
            rng,
            step: 0,
            best_csi_m: None,
            best_params: None,
            history: Vec::new(),
            validation: Vec::new(),
        })
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            fingerprint: self.config.fingerprint(),
            step: self.step,
            best_csi_m: self.best_csi_m,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
            ema: self.ema.shadow.clone(),
            opt: self.opt.clone(),
            history: self.history.clone(),
            validation: self.validation.clone(),
        }
    }

    /// Continues a run from `ckpt`.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.check_config(&ckpt.config)?;
        let mut fresh = ParamStore::new();
        let model = Model::new(&ckpt.config.model, &mut fresh, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.check_layout(&fresh)?;
        let ema = EmaState { shadow: ckpt.ema, decay: ckpt.config.train.ema_decay };
        Ok(Self {
            model,
            params: ckpt.params,
            ema,
            opt: ckpt.opt,
            rng: ckpt.rng.restore()?,
            step: ckpt.step,
            best_csi_m: ckpt.best_csi_m,
            best_params: None,
            history: ckpt.history,
            validation: ckpt.validation,
            config: ckpt.config,
        })
    }

    /// Runs one optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&SequenceWindow], total_steps: u64, epoch: u64) -> Result<StepRecord> {
        let tc = &self.config.train;
        let lr = cosine_lr(tc, self.step, total_steps);
        let mut x_t = Vec::with_capacity(batch.len());
        let mut target = Vec::with_capacity(batch.len());
        let mut times = Vec::with_capacity(batch.len());
        for w in batch {
            let x1 = stack(&[&w.target])?;
            let s = draw_interpolant(x1, &mut self.rng);
            x_t.push(s.x_t);
            target.push(s.target_v);
            times.push(s.t);
        }
        let cat = |v: Vec<Tensor<f32>>| {
            let mut shape = v[0].shape().to_vec();
            shape[0] = v.len();
            Tensor::new(shape, v.into_iter().flat_map(|t| t.data().to_vec()).collect())
        };
        let conds: Vec<&Array3<f32>> = batch.iter().map(|w| &w.condition).collect();
        let tape = Tape::<f32>::new();
        let (loss_value, grads, updates) = {
            let ctx = Ctx::new(&tape, &self.params, true, true);
            let v = self.model.forward(&ctx, tape.constant(cat(x_t)), &times, tape.constant(stack(&conds)?))?;
            let loss = rf_loss_var(v, tape.constant(cat(target)))?;
            let loss_value = loss.value().data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { what: "loss", step: self.step, lr, grad_norm: f64::NAN });
            }
            let g = tape.backward(loss);
            (loss_value, ctx.param_grads(&g), ctx.take_buffer_updates())
        };
        let grad_norm = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { what: "gradient", step: self.step, lr, grad_norm });
        }
        let scale = if grad_norm > tc.grad_clip { tc.grad_clip / grad_norm } else { 1.0 };
        let tc = tc.clone();
        self.opt.step(&mut self.params, &grads, lr, &tc, scale);
        for (id, value) in updates {
            self.params.set(id, value);
        }
        self.ema.update(&self.params)?;
        let rec = StepRecord { step: self.step, epoch, loss: loss_value, lr, grad_norm };
        self.step += 1;
        self.history.push(rec);
        Ok(rec)
    }

    /// Continues training until `total_steps`, validating with EMA weights at
    /// epoch ends. `on_step` sees every step record.
    pub fn fit(
        &mut self,
        train: &[SequenceWindow],
        val: &[SequenceWindow],
        range: NativeRange,
        mut on_step: impl FnMut(&StepRecord),
        mut on_validate: impl FnMut(&Trainer, &ValRecord) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Invalid("training split is empty".into()));
        }
        let tc = self.config.train.clone();
        let spe = tc.steps_per_epoch(train.len());
        let total = tc.total_steps(train.len());
        let thresholds = self.config.thresholds()?;
        while self.step < total {
            let epoch = self.step / spe;
            let order = epoch_order(tc.seed, epoch, train.len());
            let pos = (self.step % spe) as usize;
            let chunk = &order[pos * tc.batch..((pos + 1) * tc.batch).min(order.len())];
            let batch: Vec<&SequenceWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let rec = self.train_step(&batch, total, epoch)?;
            on_step(&rec);
            let epoch_done = self.step % spe == 0;
            let due = (epoch + 1) % tc.validate_every as u64 == 0 || self.step == total;
            if epoch_done && due && !val.is_empty() {
                let csi = self.validate(val, range, &thresholds)?;
                let improved = self.best_csi_m.is_none_or(|b| csi > b);
                if improved {
                    self.best_csi_m = Some(csi);
                    self.best_params = Some(self.ema.shadow.clone());
                }
                let rec = ValRecord { epoch, step: self.step, csi_m: csi, best_csi_m: self.best_csi_m.unwrap_or(csi), improved };
                self.validation.push(rec);
                on_validate(self, &rec)?;
            }
        }
        Ok(())
    }

    /// CSI-M of EMA-weight forecasts on `val` with the fixed validation noise seed.
    pub fn validate(&self, val: &[SequenceWindow], range: NativeRange, thresholds: &ThresholdSet) -> Result<f64> {
        let tc = &self.config.train;
        let summary = evaluate(&self.model, &self.ema.shadow, val, range, thresholds, tc.sampler_steps, tc.val_seed, tc.batch)?;
        Ok(summary.csi_m)
    }
}

/// Draws `z0` for each window from one generator seeded by `seed`, then
/// integrates the velocity field with `steps` Euler steps.
/// Outputs are clipped to `[0, 1]`.
pub fn sample(
    model: &Model,
    params: &ParamStore<f32>,
    conditions: &[&Array3<f32>],
    steps: usize,
    seed: u64,
    batch: usize,
) -> Result<Vec<Array3<f32>>> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(conditions.len());
    for chunk in conditions.chunks(batch.max(1)) {
        let (_, h, w) = chunk[0].dim();
        let z0: Tensor<f32> = gaussian(&[chunk.len(), cfg.k, h, w], &mut rng);
        let cond = stack(chunk)?;
        let pyramid: Vec<std::rc::Rc<Tensor<f32>>> = {
            let tape = Tape::<f32>::new();
            let ctx = Ctx::new(&tape, params, false, false);
            model.encode_condition(&ctx, tape.constant(cond))?.iter().map(|v| v.value()).collect()
        };
        let mut failure = None;
        let z = euler_sample(
            |z, t| {
                let tape = Tape::<f32>::new();
                let ctx = Ctx::new(&tape, params, false, false);
                let pyr: Vec<_> = pyramid.iter().map(|p| tape.leaf_rc(p.clone(), false)).collect();
                let times = vec![t; chunk.len()];
                match model.velocity_forward(&ctx, tape.constant(z.clone()), &times, &pyr) {
                    Ok(v) => (*v.value()).clone(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        Tensor::zeros(z.shape().to_vec())
                    }
                }
            },
            z0,
            SamplerConfig { steps },
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        out.extend(unstack(&z.map(|v| v.clamp(0.0, 1.0))));
    }
    Ok(out)
}

/// Pooled verification of sampled forecasts in native units.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f32>,
    windows: &[SequenceWindow],
    range: NativeRange,
    thresholds: &ThresholdSet,
    steps: usize,
    seed: u64,
    batch: usize,
) -> Result<MetricsSummary> {
    let conds: Vec<&Array3<f32>> = windows.iter().map(|w| &w.condition).collect();
    let preds = sample(model, params, &conds, steps, seed, batch)?;
    let targets: Vec<Array3<f32>> = windows.iter().map(|w| w.target.clone()).collect();
    verify(&preds, &targets, range, thresholds)
}

/// Verification of normalized forecasts against normalized targets, in native units.
pub fn verify(preds: &[Array3<f32>], targets: &[Array3<f32>], range: NativeRange, thresholds: &ThresholdSet) -> Result<MetricsSummary> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Invalid(format!("{} forecasts for {} targets", preds.len(), targets.len())));
    }
    let k = targets[0].dim().0;
    let mut v = Verification::new(thresholds.clone(), k);
    for (p, o) in preds.iter().zip(targets) {
        v.add(to_native(p, range).view(), to_native(o, range).view())?;
    }
    Ok(v.summary())
}

fn to_native(x: &Array3<f32>, range: NativeRange) -> Array3<f32> {
    let mut out = x.clone();
    for (i, frame) in x.outer_iter().enumerate() {
        out.slice_mut(s![i, .., ..]).assign(&denormalize(frame, range));
    }
    out
}

/// Evaluation output consumed by the report command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub step: u64,
    pub split: String,
    pub windows: usize,
    pub sampler_steps: usize,
    pub seed: u64,
    pub cadence_minutes: f64,
    pub model: MetricsSummary,
    pub persistence: MetricsSummary,
}

/// Repeats the last condition frame at every lead step.
pub fn persistence(window: &SequenceWindow) -> Array3<f32> {
    let (j, h, w) = window.condition.dim();
    let last = window.condition.slice(s![j - 1, .., ..]);
    let mut out = Array3::zeros((window.k(), h, w));
    for mut f in out.outer_iter_mut() {
        f.assign(&last);
    }
    out
}

/// Random generator for callers that need one seeded like the trainer.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform flow times for tests and tools.
pub fn draw_times(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}
