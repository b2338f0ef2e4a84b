//! Two-phase training: base pretraining on the infilling objective, then the
//! control branch with the base frozen.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctrlnet::{backward_joint, forward_joint, init_ctrlnet, trace_joint, CtrlConfig, CtrlParams, ModelInput};
use crate::error::{ensure, Error, Result};
use crate::flow::{
    cfm_target, interpolate_flow, masked_sse, sample_flowstep, sample_mask, standard_normal, FlowStepInterval,
    TemporalMask,
};
use crate::model::{
    backward_base, concat_input, frame_tokens, init_base, param_hash, trace_base, BaseParams, ModelConfig,
};
use crate::nn::ParamSet;
use crate::synthdata::{extract_emotion, EmotionTrack, FeatureMatrix, Layout, SynthUtterance};
use crate::tensor::{round_to_f32, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Ctrlnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    /// Frame budget per batch; at least one utterance is always included.
    pub batch_frames: usize,
    pub learning_rate: f64,
    /// Learning rate of the full-scale recipe, recorded as metadata only.
    pub reference_learning_rate: f64,
    pub flow_interval: FlowStepInterval,
    pub seed: u64,
    pub adam: AdamConfig,
    pub log_every: usize,
    pub mask_ratio: (f64, f64),
    /// Sliding window applied to extracted emotion tracks (control phase).
    pub emotion_window: usize,
}

impl TrainConfig {
    pub const REFERENCE_LEARNING_RATE: f64 = 1e-5;

    pub fn base(steps: usize, seed: u64) -> Self {
        Self {
            phase: Phase::Base,
            steps,
            batch_frames: 256,
            learning_rate: 1e-3,
            reference_learning_rate: Self::REFERENCE_LEARNING_RATE,
            flow_interval: FlowStepInterval::FULL,
            seed,
            adam: AdamConfig::default(),
            log_every: 50,
            mask_ratio: (0.7, 1.0),
            emotion_window: 8,
        }
    }

    pub fn ctrlnet(steps: usize, seed: u64, t_emo: f64) -> Result<Self> {
        Ok(Self {
            phase: Phase::Ctrlnet,
            flow_interval: FlowStepInterval::up_to(t_emo)?,
            ..Self::base(steps, seed)
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Config, "train.steps must be at least 1");
        ensure!(self.batch_frames >= 1, Config, "train.batch_frames must be at least 1");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate >= 0.0,
            Config,
            "train.learning_rate must be finite and non-negative"
        );
        ensure!(self.log_every >= 1, Config, "train.log_every must be at least 1");
        ensure!(
            self.emotion_window >= 1,
            Config,
            "train.emotion_window must be at least 1"
        );
        FlowStepInterval::new(self.flow_interval.lo, self.flow_interval.hi)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Every flow step drawn, in order.
    pub flow_steps: Vec<f64>,
}

impl TrainLog {
    /// `step,loss,wall_ms` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,wall_ms\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.9},{:.3}\n", r.step, r.loss, r.wall_ms));
        }
        s
    }
}

/// One training example: which utterance, and its random draws.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub index: usize,
    pub mask: TemporalMask,
    pub t: f64,
    pub x0: FeatureMatrix,
}

/// Random stream used for batch composition and per-sample draws.
pub fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Draws utterances until the frame budget would be exceeded, then the
/// mask, flow step and noise of each.
pub fn draw_batch(rng: &mut impl Rng, data: &[SynthUtterance], config: &TrainConfig) -> Result<Vec<BatchItem>> {
    ensure!(!data.is_empty(), Config, "training set is empty");
    let mut items = Vec::new();
    let mut frames = 0;
    loop {
        let index = rng.random_range(0..data.len());
        let t = data[index].features.frames();
        if !items.is_empty() && frames + t > config.batch_frames {
            break;
        }
        frames += t;
        items.push(index);
    }
    items
        .into_iter()
        .map(|index| {
            let x1 = &data[index].features;
            let mask = sample_mask(x1.frames(), rng, config.mask_ratio)?;
            let t = sample_flowstep(&config.flow_interval, rng);
            let x0 = standard_normal(x1.freq_bins(), x1.frames(), rng);
            Ok(BatchItem { index, mask, t, x0 })
        })
        .collect()
}

struct Prepared {
    x_t: FeatureMatrix,
    masked: FeatureMatrix,
    target: FeatureMatrix,
}

fn prepare(item: &BatchItem, utt: &SynthUtterance) -> Result<Prepared> {
    let x1 = &utt.features;
    Ok(Prepared {
        x_t: interpolate_flow(&item.x0, x1, item.t)?,
        masked: item.mask.keep_unmasked(x1),
        target: cfm_target(&item.x0, x1)?,
    })
}

/// `d loss / d pred` for a loss normalized by `count`.
fn masked_residual_grad(pred: &FeatureMatrix, target: &FeatureMatrix, mask: &TemporalMask, count: usize) -> Mat {
    let scale = 2.0 / count as f64;
    Mat::from_fn(pred.data.rows, pred.data.cols, |r, c| {
        if mask.frames[c] {
            scale * (pred.data.get(r, c) - target.data.get(r, c))
        } else {
            0.0
        }
    })
}

fn batch_count(batch: &[BatchItem], freq_bins: usize) -> Result<usize> {
    let n: usize = batch.iter().map(|b| b.mask.active() * freq_bins).sum();
    ensure!(n > 0, Contract, "batch has no masked frames");
    Ok(n)
}

/// Masked flow-matching loss of the base model over a batch (mean over all
/// masked entries of all items).
pub fn base_batch_loss(base: &BaseParams, data: &[SynthUtterance], batch: &[BatchItem]) -> Result<f64> {
    let count = batch_count(batch, base.config.freq_bins)?;
    let mut sse = 0.0;
    for item in batch {
        let utt = &data[item.index];
        let p = prepare(item, utt)?;
        let concat = concat_input(base, &p.x_t, &p.masked, &utt.spec.tokens)?;
        let trace = trace_base(&concat, item.t, base, &Default::default(), None, false)?;
        sse += masked_sse(&trace.field, &p.target, &item.mask).0;
    }
    Ok(sse / count as f64)
}

pub fn base_batch_grad(base: &BaseParams, data: &[SynthUtterance], batch: &[BatchItem]) -> Result<(f64, BaseParams)> {
    let count = batch_count(batch, base.config.freq_bins)?;
    let mut grads = base.zeros_like();
    let mut sse = 0.0;
    for item in batch {
        let utt = &data[item.index];
        let p = prepare(item, utt)?;
        let concat = concat_input(base, &p.x_t, &p.masked, &utt.spec.tokens)?;
        let tokens = frame_tokens(&base.config, &utt.spec.tokens, concat.rows)?;
        let trace = trace_base(&concat, item.t, base, &Default::default(), None, true)?;
        sse += masked_sse(&trace.field, &p.target, &item.mask).0;
        let d_field = masked_residual_grad(&trace.field, &p.target, &item.mask, count);
        backward_base(base, &concat, &tokens, &trace, &d_field, Some(&mut grads));
    }
    Ok((sse / count as f64, grads))
}

/// Same objective through the combined model at control scale 1.
pub fn ctrl_batch_loss(
    base: &BaseParams,
    ctrl: &CtrlParams,
    data: &[SynthUtterance],
    tracks: &[EmotionTrack],
    batch: &[BatchItem],
) -> Result<f64> {
    let count = batch_count(batch, base.config.freq_bins)?;
    let mut sse = 0.0;
    for item in batch {
        let utt = &data[item.index];
        let p = prepare(item, utt)?;
        let input = ModelInput {
            x_t: &p.x_t,
            masked: &p.masked,
            tokens: &utt.spec.tokens,
        };
        let field = forward_joint(
            input,
            &tracks[item.index],
            item.t,
            base,
            ctrl,
            &item.mask,
            1.0,
            &Default::default(),
        )?;
        sse += masked_sse(&field, &p.target, &item.mask).0;
    }
    Ok(sse / count as f64)
}

pub fn ctrl_batch_grad(
    base: &BaseParams,
    ctrl: &CtrlParams,
    data: &[SynthUtterance],
    tracks: &[EmotionTrack],
    batch: &[BatchItem],
) -> Result<(f64, CtrlParams)> {
    let count = batch_count(batch, base.config.freq_bins)?;
    let mut grads = ctrl.zeros_like();
    let mut sse = 0.0;
    for item in batch {
        let utt = &data[item.index];
        let p = prepare(item, utt)?;
        let input = ModelInput {
            x_t: &p.x_t,
            masked: &p.masked,
            tokens: &utt.spec.tokens,
        };
        let trace = trace_joint(input, &tracks[item.index], item.t, base, ctrl, &item.mask, 1.0)?;
        sse += masked_sse(&trace.base.field, &p.target, &item.mask).0;
        let d_field = masked_residual_grad(&trace.base.field, &p.target, &item.mask, count);
        backward_joint(base, ctrl, &trace, &item.mask, &d_field, &mut grads);
    }
    Ok((sse / count as f64, grads))
}

/// Adam without weight decay. Updated parameters are rounded onto the f32
/// grid so checkpoints reload bit-exactly.
pub struct Adam {
    config: AdamConfig,
    learning_rate: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, learning_rate: f64, params: &impl ParamSet) -> Self {
        let shapes: Vec<usize> = params.tensors("").iter().map(|(_, _, v)| v.len()).collect();
        Self {
            config,
            learning_rate,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        let grads = grads.tensors("");
        for (i, w) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = self.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                w[j] = round_to_f32(w[j] - update);
            }
        }
    }
}

fn should_log(step: usize, config: &TrainConfig) -> bool {
    step == 1 || step.is_multiple_of(config.log_every) || step == config.steps
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            what: "training loss".into(),
        })
    }
}

/// Trains the base from scratch on the infilling objective.
pub fn pretrain_base(
    data: &[SynthUtterance],
    config: &TrainConfig,
    model_cfg: &ModelConfig,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<(BaseParams, TrainLog)> {
    config.validate()?;
    ensure!(config.phase == Phase::Base, Config, "pretrain_base needs phase = base");
    ensure!(
        config.flow_interval == FlowStepInterval::FULL,
        Config,
        "base pretraining samples flow steps over [0, 1]"
    );
    let mut base = init_base(model_cfg, config.seed)?;
    let mut rng = batch_rng(config.seed);
    let mut adam = Adam::new(config.adam, config.learning_rate, &base);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 1..=config.steps {
        let batch = draw_batch(&mut rng, data, config)?;
        log.flow_steps.extend(batch.iter().map(|b| b.t));
        let (loss, grads) = base_batch_grad(&base, data, &batch)?;
        check_finite(step, loss)?;
        adam.update(&mut base, &grads);
        if should_log(step, config) {
            let rec = LogRecord {
                step,
                loss,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            observer(&rec);
            log.records.push(rec);
        }
    }
    Ok((base, log))
}

/// Emotion conditioning for every training utterance.
pub fn emotion_tracks(layout: &Layout, data: &[SynthUtterance], window: usize) -> Vec<EmotionTrack> {
    data.iter()
        .map(|u| extract_emotion(layout, &u.features, window))
        .collect()
}

/// Trains a freshly initialized control branch; the base is verified unchanged
/// by hash at the end.
pub fn train_ctrlnet(
    data: &[SynthUtterance],
    layout: &Layout,
    base: &BaseParams,
    ctrl_cfg: &CtrlConfig,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<(CtrlParams, TrainLog)> {
    config.validate()?;
    ensure!(
        config.phase == Phase::Ctrlnet,
        Config,
        "train_ctrlnet needs phase = ctrlnet"
    );
    ensure!(
        config.flow_interval.lo == 0.0 && config.flow_interval.hi == ctrl_cfg.t_emo,
        Config,
        "control training samples flow steps over [0, t_emo] = [0, {}], got [{}, {}]",
        ctrl_cfg.t_emo,
        config.flow_interval.lo,
        config.flow_interval.hi
    );
    let before = param_hash(base);
    let tracks = emotion_tracks(layout, data, config.emotion_window);
    let mut ctrl = init_ctrlnet(base, ctrl_cfg, config.seed)?;
    let mut rng = batch_rng(config.seed);
    let mut adam = Adam::new(config.adam, config.learning_rate, &ctrl);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 1..=config.steps {
        let batch = draw_batch(&mut rng, data, config)?;
        log.flow_steps.extend(batch.iter().map(|b| b.t));
        let (loss, grads) = ctrl_batch_grad(base, &ctrl, data, &tracks, &batch)?;
        check_finite(step, loss)?;
        adam.update(&mut ctrl, &grads);
        if should_log(step, config) {
            let rec = LogRecord {
                step,
                loss,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            observer(&rec);
            log.records.push(rec);
        }
    }
    let after = param_hash(base);
    if before != after {
        return Err(Error::FrozenBaseMutated { before, after });
    }
    Ok((ctrl, log))
}

/// Central finite differences against the analytic gradient on `trials`
/// randomly chosen scalar parameters. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-7)`; the floor sits
/// above the rounding noise of a central difference at `eps = 1e-5`.
pub fn grad_check<P, F>(params: &P, loss_and_grad: F, eps: f64, trials: usize, rng: &mut impl Rng) -> Result<f64>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<(f64, P)>,
{
    let (_, analytic) = loss_and_grad(params)?;
    let sizes: Vec<usize> = params.tensors("").iter().map(|(_, _, v)| v.len()).collect();
    let total: usize = sizes.iter().sum();
    ensure!(total > 0, Contract, "no parameters to check");
    let analytic_flat: Vec<f64> = analytic
        .tensors("")
        .iter()
        .flat_map(|(_, _, v)| v.iter().copied())
        .collect();
    let locate = |mut flat: usize| {
        for (i, &n) in sizes.iter().enumerate() {
            if flat < n {
                return (i, flat);
            }
            flat -= n;
        }
        unreachable!()
    };
    let eval_at = |tensor: usize, offset: usize, delta: f64| -> Result<f64> {
        let mut p = params.clone();
        p.tensors_mut()[tensor][offset] += delta;
        Ok(loss_and_grad(&p)?.0)
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let flat = rng.random_range(0..total);
        let (tensor, offset) = locate(flat);
        let numeric = (eval_at(tensor, offset, eps)? - eval_at(tensor, offset, -eps)?) / (2.0 * eps);
        let err = (analytic_flat[flat] - numeric).abs() / numeric.abs().max(analytic_flat[flat].abs()).max(1e-7);
        worst = worst.max(err);
    }
    Ok(worst)
}
