//! Watermark embedding: only the adapter factors are optimized, against
//! `lambda_i * L_i + lambda_w * L_w` with the weights driven by the
//! controller in [`crate::dlwt`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{batch_bit_accuracy, bce_with_logits, WatermarkDecoder, WatermarkMessage};
use crate::decoder::{make_latents, AdapterSet, InjectionSpec, ToyDecoder};
use crate::dlwt::{dlwt_step, Branch, DlwtConfig, DlwtState};
use crate::error::{invalid, Error, Result};
use crate::lora::{LoraSpec, ScaleMode, Variant};
use crate::metrics::{mse, psnr_from_mse};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::verify::{empirical_rates, EmpiricalRates};

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate from `lr` to this value over `steps`.
    pub final_lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub dlwt: DlwtConfig,
    /// Controller period `K` in steps.
    pub eval_every: usize,
    /// Held-out latents used for the controller inputs.
    pub eval_size: usize,
    /// Fixed training latents sampled from each step; `0` draws fresh latents.
    pub train_pool: usize,
    pub seed: u64,
    /// Target layers; empty means every upsampler convolution.
    pub injection: Vec<String>,
    pub variant: Variant,
    pub rank: usize,
    pub alpha: f64,
    pub scale_mode: ScaleMode,
    /// Hex payload; random from the seed when absent.
    pub payload: Option<String>,
    pub acc_target: f64,
    /// Consecutive successful evaluations required before stopping early.
    pub patience: usize,
    /// Fixed `(lambda_i, lambda_w)` that bypass the controller.
    pub frozen_weights: Option<(f64, f64)>,
    pub fnr_images: usize,
    pub fpr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            final_lr: None,
            optimizer: OptimizerKind::default(),
            dlwt: DlwtConfig::default(),
            eval_every: 10,
            eval_size: 64,
            train_pool: 1024,
            seed: 0,
            injection: Vec::new(),
            variant: Variant::Lora,
            rank: 8,
            alpha: 8.0,
            scale_mode: ScaleMode::Literal,
            payload: None,
            acc_target: 0.99,
            patience: 5,
            frozen_weights: None,
            fnr_images: 200,
            fpr: 0.005,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 || self.eval_size == 0 || self.patience == 0 {
            return Err(invalid!("steps, batch, eval_every, eval_size and patience must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        if self.final_lr.is_some_and(|f| !(f > 0.0)) {
            return Err(invalid!("final_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.acc_target) {
            return Err(invalid!("acc_target must be in [0, 1]"));
        }
        if let Some((li, lw)) = self.frozen_weights {
            if !(li >= 0.0 && lw >= 0.0) {
                return Err(invalid!("frozen loss weights must be non-negative"));
            }
        }
        self.dlwt.validate()
    }

    pub fn lora_spec(&self) -> LoraSpec {
        LoraSpec { variant: self.variant, rank: self.rank, alpha: self.alpha, scale_mode: self.scale_mode }
    }

    pub fn injection_spec(&self, decoder: &ToyDecoder<f32>) -> InjectionSpec {
        if self.injection.is_empty() {
            InjectionSpec::upsamplers(decoder)
        } else {
            InjectionSpec::new(self.injection.iter().cloned())
        }
    }

    pub fn message(&self, n_bits: usize) -> Result<WatermarkMessage> {
        match &self.payload {
            Some(hex) => WatermarkMessage::from_hex(hex, n_bits),
            None => WatermarkMessage::random(n_bits, &mut Rng::new(self.seed).substream("payload")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub psnr: f64,
    pub acc: f64,
    /// Weights in effect for this step's loss.
    pub lambda_i: f64,
    pub lambda_w: f64,
    pub loss_i: f64,
    pub loss_w: f64,
    pub loss: f64,
    /// Controller branch applied after this evaluation (`0` when bypassed).
    pub branch: u8,
    /// Weights after the controller update.
    pub next_lambda_i: f64,
    pub next_lambda_w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
    Diverged { step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps_run: usize,
    pub stop: StopReason,
    pub final_acc: f64,
    pub final_psnr: f64,
    /// Step of the first evaluation reaching the accuracy target.
    pub at99_step: Option<usize>,
    pub trainable_params: usize,
    pub decoder_params: usize,
    pub payload: String,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub threshold_k: Option<usize>,
}

/// Fully deterministic record of a run; wall-clock times live in
/// [`TrainTiming`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub summary: TraceSummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    /// Seconds since the start of training, per trace row.
    pub eval_seconds: Vec<f64>,
    pub at99_seconds: Option<f64>,
    pub total_seconds: f64,
}

pub const TRACE_CSV_HEADER: &str = "step,psnr,acc,lambda_i,lambda_w,loss_i,loss_w,loss,branch,next_lambda_i,next_lambda_w";

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.step, r.psnr, r.acc, r.lambda_i, r.lambda_w, r.loss_i, r.loss_w, r.loss, r.branch, r.next_lambda_i, r.next_lambda_w
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Vec<TraceRow>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRACE_CSV_HEADER) {
            return Err(invalid!("trace CSV header mismatch"));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 11 {
                    return Err(invalid!("trace CSV row has {} fields", f.len()));
                }
                let num = |i: usize| f[i].parse::<f64>().map_err(|_| invalid!("bad number `{}` in trace", f[i]));
                Ok(TraceRow {
                    step: f[0].parse().map_err(|_| invalid!("bad step `{}`", f[0]))?,
                    psnr: num(1)?,
                    acc: num(2)?,
                    lambda_i: num(3)?,
                    lambda_w: num(4)?,
                    loss_i: num(5)?,
                    loss_w: num(6)?,
                    loss: num(7)?,
                    branch: f[8].parse().map_err(|_| invalid!("bad branch `{}`", f[8]))?,
                    next_lambda_i: num(9)?,
                    next_lambda_w: num(10)?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adapters: AdapterSet<f32>,
    pub trace: TrainTrace,
    pub timing: TrainTiming,
    pub message: WatermarkMessage,
}

impl TrainOutcome {
    /// Turns a diverged run into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.trace.summary.stop {
            StopReason::Diverged { step } => Err(Error::Divergence { step }),
            _ => Ok(self),
        }
    }
}

/// Latents whose frozen prefix activations and clean outputs are cached.
struct LatentSet {
    prefix: Tensor<f32>,
    clean: Tensor<f32>,
}

impl LatentSet {
    fn build(decoder: &ToyDecoder<f32>, first: usize, z: &Tensor<f32>) -> Result<Self> {
        let n = z.shape()[0];
        let (mut prefixes, mut cleans) = (Vec::new(), Vec::new());
        for start in (0..n).step_by(CHUNK) {
            let part = z.slice_outer(start, CHUNK.min(n - start))?;
            let p = decoder.forward_range(0, first, part, None)?;
            cleans.push(decoder.forward_range(first, decoder.stages.len(), p.clone(), None)?);
            prefixes.push(p);
        }
        Ok(LatentSet { prefix: Tensor::concat_outer(&prefixes)?, clean: Tensor::concat_outer(&cleans)? })
    }

    fn len(&self) -> usize {
        self.prefix.shape()[0]
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let p = idx.iter().map(|&i| self.prefix.slice_outer(i, 1)).collect::<Result<Vec<_>>>()?;
        let c = idx.iter().map(|&i| self.clean.slice_outer(i, 1)).collect::<Result<Vec<_>>>()?;
        Ok((Tensor::concat_outer(&p)?, Tensor::concat_outer(&c)?))
    }
}

/// Mean PSNR of adapted vs clean output and mean bit accuracy.
pub fn evaluate(
    decoder: &ToyDecoder<f32>,
    adapters: &AdapterSet<f32>,
    codec: &WatermarkDecoder<f32>,
    latents: &Tensor<f32>,
    w: &WatermarkMessage,
) -> Result<(f64, f64)> {
    let first = decoder.first_adapted(adapters)?.unwrap_or(0);
    let set = LatentSet::build(decoder, first, latents)?;
    evaluate_cached(decoder, first, adapters, codec, &set, w)
}

fn evaluate_cached(
    decoder: &ToyDecoder<f32>,
    first: usize,
    adapters: &AdapterSet<f32>,
    codec: &WatermarkDecoder<f32>,
    set: &LatentSet,
    w: &WatermarkMessage,
) -> Result<(f64, f64)> {
    let n = set.len();
    let (mut psnr_sum, mut acc_sum) = (0.0, 0.0);
    for start in (0..n).step_by(CHUNK) {
        let count = CHUNK.min(n - start);
        let prefix = set.prefix.slice_outer(start, count)?;
        let clean = set.clean.slice_outer(start, count)?;
        let x = decoder.forward_range(first, decoder.stages.len(), prefix, Some(adapters))?;
        for i in 0..count {
            psnr_sum += psnr_from_mse(mse(&x.slice_outer(i, 1)?, &clean.slice_outer(i, 1)?)?);
        }
        acc_sum += batch_bit_accuracy(&codec.logits(&x)?, w)?.iter().sum::<f64>();
    }
    Ok((psnr_sum / n as f64, acc_sum / n as f64))
}

/// Matched-bit counts of adapted and clean generations of `count` latents.
pub fn detection_scores(
    decoder: &ToyDecoder<f32>,
    adapters: &AdapterSet<f32>,
    codec: &WatermarkDecoder<f32>,
    w: &WatermarkMessage,
    count: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let first = decoder.first_adapted(adapters)?.unwrap_or(0);
    let z = make_latents::<f32>(count, &decoder.config, rng)?;
    let set = LatentSet::build(decoder, first, &z)?;
    let n = w.len();
    let score = |logits: Tensor<f32>| -> Result<Vec<usize>> {
        Ok(batch_bit_accuracy(&logits, w)?.into_iter().map(|a| (a * n as f64).round() as usize).collect())
    };
    let (mut marked, mut clean) = (Vec::new(), Vec::new());
    for start in (0..count).step_by(CHUNK) {
        let c = CHUNK.min(count - start);
        let x = decoder.forward_range(first, decoder.stages.len(), set.prefix.slice_outer(start, c)?, Some(adapters))?;
        marked.extend(score(codec.logits(&x)?)?);
        clean.extend(score(codec.logits(&set.clean.slice_outer(start, c)?)?)?);
    }
    Ok((marked, clean))
}

pub fn train(decoder: &ToyDecoder<f32>, codec: &WatermarkDecoder<f32>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(decoder, codec, cfg, &mut |_, _| Ok(()))
}

/// [`train`] with `on_row(row, seconds)` called as each trace row is
/// recorded, so a caller can persist a partial trace.
pub fn train_with(
    decoder: &ToyDecoder<f32>,
    codec: &WatermarkDecoder<f32>,
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&TraceRow, f64) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !codec.is_frozen() {
        return Err(Error::CodecNotFrozen);
    }
    let clock = Instant::now();
    let root = Rng::new(cfg.seed);
    let message = cfg.message(codec.n_bits())?;
    let mut adapters = decoder.attach(&cfg.injection_spec(decoder), cfg.lora_spec(), &mut root.substream("adapters"))?;
    let first = decoder.first_adapted(&adapters)?.expect("attach produced adapters");
    let eval_z = make_latents::<f32>(cfg.eval_size, &decoder.config, &mut root.substream("eval-latents"))?;
    let eval_set = LatentSet::build(decoder, first, &eval_z)?;
    let pool = if cfg.train_pool > 0 {
        let z = make_latents::<f32>(cfg.train_pool, &decoder.config, &mut root.substream("train-latents"))?;
        Some(LatentSet::build(decoder, first, &z)?)
    } else {
        None
    };
    let mut batch_rng = root.substream("latents");
    let targets = message.targets::<f32>(cfg.batch);
    let mut opt = Optimizer::<f32>::new(cfg.optimizer, cfg.lr)?;
    let mut state = match cfg.frozen_weights {
        Some((lambda_i, lambda_w)) => DlwtState { lambda_i, lambda_w },
        None => DlwtState::default(),
    };

    let mut rows = Vec::new();
    let mut timing = TrainTiming::default();
    let mut at99_step = None;
    let mut streak = 0usize;
    let mut stop = StopReason::MaxSteps;
    let mut steps_run = 0;

    for step in 1..=cfg.steps {
        let (prefix, clean) = match &pool {
            Some(p) => {
                let idx: Vec<usize> = (0..cfg.batch).map(|_| batch_rng.below(p.len())).collect();
                p.gather(&idx)?
            }
            None => {
                let z = make_latents::<f32>(cfg.batch, &decoder.config, &mut batch_rng)?;
                let s = LatentSet::build(decoder, first, &z)?;
                (s.prefix, s.clean)
            }
        };
        let (x, cache) = decoder.forward_cached_from(first, &prefix, Some(&adapters))?;
        let loss_i = mse(&x, &clean)?;
        let (logits, codec_cache) = codec.logits_cached(&x)?;
        let (loss_w, grad_logits) = bce_with_logits(&logits, &targets)?;
        let loss = state.lambda_i * loss_i + state.lambda_w * loss_w;
        steps_run = step;
        if !loss.is_finite() {
            stop = StopReason::Diverged { step };
            break;
        }
        let inv_n = 2.0 / x.len() as f32;
        let grad_i = x.zip_map(&clean, |a, b| (a - b) * inv_n)?;
        let grad_w = codec.backward(&grad_logits, &codec_cache, true, false)?.input.expect("requested");
        let mut grad = grad_i.scale(state.lambda_i as f32);
        grad.axpy(state.lambda_w as f32, &grad_w)?;
        let grads = decoder.decode_backward(&grad, &cache, &adapters)?;
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().flat_map(|g| g.tensors()).collect();
        if let Some(lo) = cfg.final_lr {
            let progress = (step - 1) as f64 / cfg.steps.max(2).saturating_sub(1) as f64;
            opt.set_lr(lo + 0.5 * (cfg.lr - lo) * (1.0 + (std::f64::consts::PI * progress).cos()))?;
        }
        opt.step(&mut adapters.factors_mut(), &grad_refs)?;

        if step % cfg.eval_every != 0 && step != cfg.steps {
            continue;
        }
        let (psnr, acc) = evaluate_cached(decoder, first, &adapters, codec, &eval_set, &message)?;
        if psnr.is_nan() || acc.is_nan() {
            stop = StopReason::Diverged { step };
            break;
        }
        let (next, branch) = match cfg.frozen_weights {
            Some(_) => (state, 0),
            None => {
                let (s, b) = dlwt_step(state, psnr, acc, &cfg.dlwt)?;
                (s, b.id())
            }
        };
        rows.push(TraceRow {
            step,
            psnr,
            acc,
            lambda_i: state.lambda_i,
            lambda_w: state.lambda_w,
            loss_i,
            loss_w,
            loss,
            branch,
            next_lambda_i: next.lambda_i,
            next_lambda_w: next.lambda_w,
        });
        let elapsed = clock.elapsed().as_secs_f64();
        on_row(rows.last().expect("just pushed"), elapsed)?;
        timing.eval_seconds.push(elapsed);
        if at99_step.is_none() && acc >= cfg.acc_target {
            at99_step = Some(step);
            timing.at99_seconds = Some(elapsed);
        }
        state = next;
        streak = if psnr >= cfg.dlwt.rho && acc == 1.0 { streak + 1 } else { 0 };
        let settled = cfg.frozen_weights.is_some() || (state.lambda_i == 0.0 && state.lambda_w == 0.0);
        if streak >= cfg.patience && settled {
            stop = StopReason::EarlyStop;
            break;
        }
    }

    let last = rows.last();
    let mut summary = TraceSummary {
        steps_run,
        stop,
        final_acc: last.map_or(f64::NAN, |r| r.acc),
        final_psnr: last.map_or(f64::NAN, |r| r.psnr),
        at99_step,
        trainable_params: adapters.param_count(),
        decoder_params: decoder.param_count(),
        payload: message.to_hex(),
        fnr: None,
        fpr: None,
        threshold_k: None,
    };
    if !matches!(stop, StopReason::Diverged { .. }) && cfg.fnr_images > 0 {
        let (marked, clean) = detection_scores(decoder, &adapters, codec, &message, cfg.fnr_images, &mut root.substream("fnr"))?;
        let EmpiricalRates { threshold_k, fnr, fpr } = empirical_rates(&marked, &clean, message.len(), cfg.fpr)?;
        summary.fnr = Some(fnr);
        summary.fpr = Some(fpr);
        summary.threshold_k = Some(threshold_k);
    }
    timing.total_seconds = clock.elapsed().as_secs_f64();
    Ok(TrainOutcome { adapters, trace: TrainTrace { rows, summary }, timing, message })
}

/// Whether a row's controller update was the given branch.
pub fn row_branch(row: &TraceRow) -> Option<Branch> {
    match row.branch {
        1 => Some(Branch::RaiseWatermark),
        2 => Some(Branch::RaiseImage),
        3 => Some(Branch::RaiseBoth),
        4 => Some(Branch::Decay),
        _ => None,
    }
}
