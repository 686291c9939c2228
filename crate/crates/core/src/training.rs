//! Optimisation loop for the detector and a finite-difference gradient
//! check.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::ccg::CcgModel;
use crate::data::WindowBatch;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Spike magnitude in units of the window's channel standard deviation.
pub const SPIKE_SCALE: f64 = 6.0;
/// Loss weight of timesteps hidden from the model.
pub const MASK_WEIGHT: f64 = 2.0;
/// Epochs over which the DAG weight ramps up.
pub const DAG_RAMP_EPOCHS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub inject_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            weight_decay: 1e-4,
            warmup_steps: 500,
            clip_norm: 1.0,
            epochs: 1,
            batch_size: 64,
            seed: 0,
            inject_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return bad("weight_decay must be non-negative and clip_norm positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.inject_rate) {
            return bad("inject_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total` and the effective DAG weight after
/// `epochs_done` (fractional) epochs.
pub fn schedules(step: usize, total: usize, epochs_done: f64, cfg: &TrainConfig, lambda_dag: f64) -> (f64, f64) {
    let warm = cfg.warmup_steps;
    let lr = if step < warm || total <= warm {
        if total <= warm && step >= warm {
            log::warn!("schedule of {total} steps never leaves its {warm}-step warmup");
        }
        cfg.lr_peak * (step as f64 / warm.max(1) as f64).min(1.0)
    } else {
        let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
        cfg.lr_peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    };
    let lam = lambda_dag * (epochs_done / DAG_RAMP_EPOCHS).clamp(0.0, 1.0);
    (lr, lam)
}

/// Scale `g` in place so its norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = libm::sqrt(g.iter().map(|v| v * v).sum());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Moment accumulators of the decoupled-decay adaptive optimiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    /// One update of `theta`; coordinates with `frozen[i]` set are left
    /// untouched.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64, frozen: Option<&[bool]>) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - libm::pow(BETA1, self.step as f64);
        let bc2 = 1.0 - libm::pow(BETA2, self.step as f64);
        for i in 0..theta.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= lr * weight_decay * theta[i] + lr * mhat / (libm::sqrt(vhat) + ADAM_EPS);
        }
    }
}

/// Windows after outlier injection together with their clean originals.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub input: WindowBatch,
    pub target: WindowBatch,
    /// Per `(window, timestep, channel)`: true where a spike was added.
    pub mask: Vec<bool>,
}

fn channel_std(window: &[f64], len: usize, c: usize, ch: usize) -> f64 {
    let mean = (0..len).map(|t| window[t * c + ch]).sum::<f64>() / len as f64;
    let var = (0..len).map(|t| (window[t * c + ch] - mean).powi(2)).sum::<f64>() / len as f64;
    let s = libm::sqrt(var);
    if s < crate::data::STD_FLOOR {
        1.0
    } else {
        s
    }
}

/// Add `round(rate · T)` spikes per window, each at a distinct timestep on
/// one random channel, of size `u · 6 · std` with `|u|` uniform in
/// `[0.5, 1]` and random sign.
pub fn inject_outliers(batch: &WindowBatch, rate: f64, seed: u64) -> Result<Injection> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(alloc::format!("injection rate {rate} outside [0, 1]")));
    }
    let (t, c) = (batch.len, batch.channels);
    let mut input = batch.clone();
    let mut mask = vec![false; batch.windows.len()];
    let count = libm::round(rate * t as f64) as usize;
    if count == 0 {
        return Ok(Injection { input, target: batch.clone(), mask });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in 0..batch.batch_size() {
        let window = batch.window(b);
        let stds: Vec<f64> = (0..c).map(|ch| channel_std(window, t, c, ch)).collect();
        for step in index::sample(&mut rng, t, count.min(t)) {
            let ch = rng.random_range(0..c);
            let u = rng.random_range(0.5..=1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let at = b * t * c + step * c + ch;
            input.windows[at] += u * SPIKE_SCALE * stds[ch];
            mask[at] = true;
        }
    }
    Ok(Injection { input, target: batch.clone(), mask })
}

/// Choose `round(rate · T)` timesteps per window; returns per-timestep loss
/// weights and zeroes those timesteps in `input`.
pub fn emphasis_mask(
    input: &mut [f64],
    batch: usize,
    len: usize,
    channels: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut w = vec![1.0; batch * len];
    let count = libm::round(rate * len as f64) as usize;
    for b in 0..batch {
        if count == 0 {
            break;
        }
        for step in index::sample(rng, len, count.min(len)) {
            w[b * len + step] = MASK_WEIGHT;
            input[(b * len + step) * channels..(b * len + step + 1) * channels].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    w
}

/// One optimiser step of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub dag: f64,
    pub freq: f64,
    pub lr: f64,
    pub lambda_dag: f64,
    pub grad_norm: f64,
}

/// Expand a per-block frozen flag to per-coordinate flags.
pub fn frozen_coordinates(model: &CcgModel, frozen_blocks: &[bool]) -> Vec<bool> {
    model.params.blocks.iter().zip(frozen_blocks).flat_map(|(b, &f)| core::iter::repeat_n(f, b.len())).collect()
}

/// Train `model` on `windows` for `cfg.epochs` epochs. Blocks flagged in
/// `frozen_blocks` are not updated.
pub fn train(
    model: &mut CcgModel,
    windows: &WindowBatch,
    cfg: &TrainConfig,
    frozen_blocks: Option<&[bool]>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let n = windows.batch_size();
    if n == 0 {
        return Err(Error::Empty("training windows"));
    }
    if windows.len != model.params.window || windows.channels != model.params.channels {
        return Err(Error::ShapeMismatch(alloc::format!(
            "windows {}x{} for model {}x{}",
            windows.len,
            windows.channels,
            model.params.window,
            model.params.channels
        )));
    }
    let frozen = frozen_blocks.map(|f| frozen_coordinates(model, f));
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::new(model.params.len());
    let mut theta = model.params.flat_view();
    let mut trace = Vec::with_capacity(total);
    let (t, c) = (windows.len, windows.channels);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step = trace.len();
            let (lr, lam) = schedules(step + 1, total, step as f64 / per_epoch as f64, cfg, model.config.lambda_dag);
            let sub = windows.select(chunk);
            let inj = inject_outliers(&sub, cfg.inject_rate, rng.random())?;
            let mut input = inj.input.windows;
            let weights = emphasis_mask(&mut input, chunk.len(), t, c, model.config.mask_rate, &mut rng);
            let x = Tensor::from_vec([chunk.len(), t, c], input);
            let y = Tensor::from_vec([chunk.len(), t, c], inj.target.windows);
            let (parts, mut grad) = model.loss_and_grad(&x, &y, &weights, lam)?;
            if let Some(part) = parts.non_finite() {
                return Err(Error::NonFiniteLoss { part, step });
            }
            if let Some(f) = &frozen {
                grad.iter_mut().zip(f).filter(|(_, &fz)| fz).for_each(|(g, _)| *g = 0.0);
            }
            let grad_norm = clip_grad_norm(&mut grad, cfg.clip_norm);
            opt.update(&mut theta, &grad, lr, cfg.weight_decay, frozen.as_deref());
            model.params.set_flat(&theta)?;
            trace.push(StepRecord {
                step,
                total: parts.total,
                rec: parts.rec,
                dag: parts.dag,
                freq: parts.freq,
                lr,
                lambda_dag: lam,
                grad_norm,
            });
        }
    }
    if !model.params.is_finite() {
        return Err(Error::NonFiniteLoss { part: "parameters", step: trace.len() });
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per block; smaller blocks are checked in full.
    pub per_block: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-3, per_block: 200, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Compare `grad` with central differences of `loss` around `theta`,
/// block by block.
pub fn finite_diff_check(
    theta: &[f64],
    grad: &[f64],
    blocks: &[(String, Range<usize>)],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    if theta.len() != grad.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{} parameters, {} gradients", theta.len(), grad.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(blocks.len());
    for (name, range) in blocks {
        let len = range.len();
        let picks: Vec<usize> = if len <= opts.per_block {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut rng, len, opts.per_block).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for &k in &picks {
            let i = range.start + k;
            probe[i] = theta[i] + opts.step;
            let up = loss(&probe)?;
            probe[i] = theta[i] - opts.step;
            let down = loss(&probe)?;
            probe[i] = theta[i];
            let num = (up - down) / (2.0 * opts.step);
            let err = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(opts.floor);
            worst = worst.max(err);
        }
        out.push(BlockCheck { name: name.clone(), checked: picks.len(), max_rel_err: worst });
    }
    Ok(FdReport { tolerance: opts.tolerance, blocks: out })
}

/// Gradient check of the detector's composite loss on one fixed batch.
pub fn check_model_gradient(
    model: &CcgModel,
    input: &Tensor,
    target: &Tensor,
    weights: &[f64],
    lambda_dag: f64,
    opts: &FdOptions,
) -> Result<FdReport> {
    let (_, grad) = model.loss_and_grad(input, target, weights, lambda_dag)?;
    let theta = model.params.flat_view();
    let blocks: Vec<(String, Range<usize>)> =
        model.params.blocks.iter().map(|b| b.name.clone()).zip(model.params.offsets()).collect();
    let mut probe = model.clone();
    finite_diff_check(
        &theta,
        &grad,
        &blocks,
        |th| {
            probe.params.set_flat(th)?;
            Ok(probe.loss(input, target, weights, lambda_dag)?.total)
        },
        opts,
    )
}
