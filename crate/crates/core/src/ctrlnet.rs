//! The trainable control branch.
//!
//! Copies of the selected base blocks run as their own chain on an
//! emotion-augmented input. After each copied block a zero-initialized
//! frame-wise projection produces the feature that is injected, masked and
//! scaled, into the base stream right after the matching base block.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::flow::TemporalMask;
use crate::model::{
    backward_base, check_flow_step, concat_input, forward_base, frame_tokens, trace_base, BaseParams, BaseTrace,
    HiddenSeq,
};
use crate::nn::{BlockCache, BlockParams, Linear, ParamSet, TensorList};
use crate::synthdata::{EmotionTrack, FeatureMatrix, EMOTION_DIMS};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrlConfig {
    /// Base blocks receiving control, ascending.
    pub selected_blocks: Vec<usize>,
    /// Control is active only for flow steps `t < t_emo`.
    pub t_emo: f64,
    pub lambda_default: f64,
}

impl CtrlConfig {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        ensure!(
            !self.selected_blocks.is_empty(),
            Config,
            "selected_blocks must not be empty"
        );
        ensure!(
            self.selected_blocks.windows(2).all(|w| w[0] < w[1]),
            Config,
            "selected_blocks must be strictly ascending: {:?}",
            self.selected_blocks
        );
        ensure!(
            self.t_emo > 0.0 && self.t_emo <= 1.0,
            Config,
            "t_emo must lie in (0, 1], got {}",
            self.t_emo
        );
        ensure!(
            self.lambda_default.is_finite() && self.lambda_default >= 0.0,
            Config,
            "lambda must be finite and non-negative"
        );
        if let Some(&k) = self.selected_blocks.iter().find(|&&k| k >= blocks) {
            return Err(crate::error::Error::Contract(format!(
                "selected block {k} does not exist (model has {blocks})"
            )));
        }
        Ok(())
    }

    /// Control applies at flow step `t` only strictly below `t_emo`.
    pub fn effective_lambda(&self, t: f64, lambda: f64) -> f64 {
        if t < self.t_emo {
            lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtrlParams {
    pub config: CtrlConfig,
    /// `D_emo -> 3F`, per frame.
    pub emotion_projection: Linear,
    pub input_projection_copy: Linear,
    /// One per selected block, in `selected_blocks` order.
    pub block_copies: Vec<BlockParams>,
    /// `D -> D`, zero at initialization.
    pub zero_projections: Vec<Linear>,
}

impl ParamSet for CtrlParams {
    fn tensors(&self, prefix: &str) -> TensorList<'_> {
        let p = |n: &str| {
            if prefix.is_empty() {
                n.to_string()
            } else {
                format!("{prefix}.{n}")
            }
        };
        let mut v = self.emotion_projection.tensors(&p("emotion_projection"));
        v.extend(self.input_projection_copy.tensors(&p("input_projection_copy")));
        for (k, b) in self.config.selected_blocks.iter().zip(&self.block_copies) {
            v.extend(b.tensors(&p(&format!("block_copies.{k}"))));
        }
        for (k, z) in self.config.selected_blocks.iter().zip(&self.zero_projections) {
            v.extend(z.tensors(&p(&format!("zero_projections.{k}"))));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.emotion_projection.tensors_mut();
        v.extend(self.input_projection_copy.tensors_mut());
        for b in &mut self.block_copies {
            v.extend(b.tensors_mut());
        }
        for z in &mut self.zero_projections {
            v.extend(z.tensors_mut());
        }
        v
    }
}

impl CtrlParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

/// Scale of the random emotion projection at initialization.
const EMOTION_PROJECTION_GAIN: f64 = 0.5;

pub fn init_ctrlnet(base: &BaseParams, cfg: &CtrlConfig, seed: u64) -> Result<CtrlParams> {
    cfg.validate(base.config.blocks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = base.config.width;
    Ok(CtrlParams {
        config: cfg.clone(),
        emotion_projection: Linear::init(
            &mut rng,
            EMOTION_DIMS,
            base.config.input_width(),
            EMOTION_PROJECTION_GAIN,
        ),
        input_projection_copy: base.input_projection.clone(),
        block_copies: cfg.selected_blocks.iter().map(|&k| base.blocks[k].clone()).collect(),
        zero_projections: cfg
            .selected_blocks
            .iter()
            .map(|_| Linear::zeros(width, width))
            .collect(),
    })
}

/// Inputs shared by the base and the control branch.
#[derive(Clone, Copy)]
pub struct ModelInput<'a> {
    pub x_t: &'a FeatureMatrix,
    pub masked: &'a FeatureMatrix,
    pub tokens: &'a [usize],
}

pub(crate) struct CtrlTrace {
    emotion_t: Mat,
    control_input: Mat,
    stream: Vec<HiddenSeq>,
    caches: Vec<BlockCache>,
    /// Control feature per selected block, in `selected_blocks` order.
    pub features: Vec<HiddenSeq>,
}

fn check_emotion(emotion: &EmotionTrack, frames: usize) -> Result<()> {
    ensure!(
        emotion.frames() == frames,
        Contract,
        "emotion track has {} frames, sample has {frames}",
        emotion.frames()
    );
    Ok(())
}

pub(crate) fn trace_ctrl(
    concat: &Mat,
    emotion: &EmotionTrack,
    cond_act: &[f64],
    base: &BaseParams,
    ctrl: &CtrlParams,
) -> Result<CtrlTrace> {
    check_emotion(emotion, concat.rows)?;
    let emotion_t = emotion.data.transpose();
    let mut control_input = ctrl.emotion_projection.forward(&emotion_t);
    control_input.add_assign(concat);
    let mut h = ctrl.input_projection_copy.forward(&control_input);
    let n = ctrl.block_copies.len();
    let mut stream = Vec::with_capacity(n + 1);
    let mut caches = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for (block, zero) in ctrl.block_copies.iter().zip(&ctrl.zero_projections) {
        stream.push(h);
        let (out, cache) = block.forward(stream.last().unwrap(), cond_act, base.config.heads);
        caches.push(cache);
        features.push(zero.forward(&out));
        h = out;
    }
    stream.push(h);
    Ok(CtrlTrace {
        emotion_t,
        control_input,
        stream,
        caches,
        features,
    })
}

/// Control features keyed by base block index.
pub fn forward_ctrl(
    input: ModelInput<'_>,
    emotion: &EmotionTrack,
    t: f64,
    base: &BaseParams,
    ctrl: &CtrlParams,
) -> Result<BTreeMap<usize, HiddenSeq>> {
    check_flow_step(t)?;
    let concat = concat_input(base, input.x_t, input.masked, input.tokens)?;
    let time = base.time_embedding.forward(t);
    let trace = trace_ctrl(&concat, emotion, &time.cond_act, base, ctrl)?;
    Ok(ctrl
        .config
        .selected_blocks
        .iter()
        .copied()
        .zip(trace.features)
        .collect())
}

/// `lambda * (m ⊙ feature)`, the term added to the base stream.
pub fn control_injection(feature: &HiddenSeq, mask: &TemporalMask, lambda: f64) -> Result<HiddenSeq> {
    ensure!(
        mask.len() == feature.rows,
        Contract,
        "mask covers {} frames, feature has {}",
        mask.len(),
        feature.rows
    );
    let mut out = feature.clone();
    for f in 0..out.rows {
        let m = mask.value(f);
        for v in out.row_mut(f) {
            *v = lambda * (m * *v);
        }
    }
    Ok(out)
}

/// `Z_new = base_out + lambda * (m ⊙ ctrl_feature)`, frame-wise.
pub fn blend(base_out: &HiddenSeq, ctrl_feature: &HiddenSeq, mask: &TemporalMask, lambda: f64) -> Result<HiddenSeq> {
    ensure!(
        base_out.shape() == ctrl_feature.shape(),
        Contract,
        "blend shapes differ: {:?} vs {:?}",
        base_out.shape(),
        ctrl_feature.shape()
    );
    let mut out = base_out.clone();
    out.add_assign(&control_injection(ctrl_feature, mask, lambda)?);
    Ok(out)
}

fn injections(
    base: &BaseParams,
    ctrl: &CtrlParams,
    features: &[HiddenSeq],
    mask: &TemporalMask,
    lambda: f64,
) -> Result<Vec<Option<HiddenSeq>>> {
    let mut out: Vec<Option<HiddenSeq>> = vec![None; base.config.blocks];
    for (&k, feat) in ctrl.config.selected_blocks.iter().zip(features) {
        out[k] = Some(control_injection(feat, mask, lambda)?);
    }
    Ok(out)
}

/// Field of the combined model. The control scale is forced to 0 for
/// `t >= t_emo`; with an effective scale of 0 the control branch is not run.
#[allow(clippy::too_many_arguments)]
pub fn forward_joint(
    input: ModelInput<'_>,
    emotion: &EmotionTrack,
    t: f64,
    base: &BaseParams,
    ctrl: &CtrlParams,
    mask: &TemporalMask,
    lambda: f64,
    skip: &BTreeSet<usize>,
) -> Result<FeatureMatrix> {
    check_flow_step(t)?;
    check_emotion(emotion, input.x_t.frames())?;
    ensure!(
        mask.len() == input.x_t.frames(),
        Contract,
        "mask covers {} frames, sample has {}",
        mask.len(),
        input.x_t.frames()
    );
    let concat = concat_input(base, input.x_t, input.masked, input.tokens)?;
    let hidden = base.input_projection.forward(&concat);
    let lambda = ctrl.config.effective_lambda(t, lambda);
    if lambda == 0.0 {
        return Ok(forward_base(&hidden, t, base, skip, None)?.field);
    }
    let time = base.time_embedding.forward(t);
    let trace = trace_ctrl(&concat, emotion, &time.cond_act, base, ctrl)?;
    let inj = injections(base, ctrl, &trace.features, mask, lambda)?;
    Ok(forward_base(&hidden, t, base, skip, Some(&inj))?.field)
}

/// Everything the reverse pass of the combined model needs.
pub(crate) struct JointTrace {
    pub concat: Mat,
    pub frame_tokens: Vec<usize>,
    pub base: BaseTrace,
    pub ctrl: CtrlTrace,
    pub lambda: f64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn trace_joint(
    input: ModelInput<'_>,
    emotion: &EmotionTrack,
    t: f64,
    base: &BaseParams,
    ctrl: &CtrlParams,
    mask: &TemporalMask,
    lambda: f64,
) -> Result<JointTrace> {
    check_flow_step(t)?;
    let concat = concat_input(base, input.x_t, input.masked, input.tokens)?;
    let time = base.time_embedding.forward(t);
    let lambda = ctrl.config.effective_lambda(t, lambda);
    let ctrl_trace = trace_ctrl(&concat, emotion, &time.cond_act, base, ctrl)?;
    let inj = injections(base, ctrl, &ctrl_trace.features, mask, lambda)?;
    let base_trace = trace_base(&concat, t, base, &BTreeSet::new(), Some(&inj), true)?;
    Ok(JointTrace {
        frame_tokens: frame_tokens(&base.config, input.tokens, concat.rows)?,
        concat,
        base: base_trace,
        ctrl: ctrl_trace,
        lambda,
    })
}

/// Accumulates control-branch gradients for `d_field`; base parameters get none.
pub(crate) fn backward_joint(
    base: &BaseParams,
    ctrl: &CtrlParams,
    trace: &JointTrace,
    mask: &TemporalMask,
    d_field: &Mat,
    grads: &mut CtrlParams,
) {
    let base_grads = backward_base(base, &trace.concat, &trace.frame_tokens, &trace.base, d_field, None);
    let n = ctrl.block_copies.len();
    let width = base.config.width;
    let frames = trace.concat.rows;
    let mut dh = Mat::zeros(frames, width);
    let mut unused_cond = vec![0.0; width];
    for j in (0..n).rev() {
        let k = ctrl.config.selected_blocks[j];
        let mut d_feat = base_grads.d_after_block[k].clone();
        for f in 0..frames {
            let s = trace.lambda * mask.value(f);
            d_feat.row_mut(f).iter_mut().for_each(|v| *v *= s);
        }
        let d_out =
            ctrl.zero_projections[j].backward(&trace.ctrl.stream[j + 1], &d_feat, Some(&mut grads.zero_projections[j]));
        dh.add_assign(&d_out);
        dh = ctrl.block_copies[j].backward(
            &trace.ctrl.caches[j],
            &trace.base.time.cond_act,
            &dh,
            base.config.heads,
            Some(&mut grads.block_copies[j]),
            &mut unused_cond,
        );
    }
    let d_input =
        ctrl.input_projection_copy
            .backward(&trace.ctrl.control_input, &dh, Some(&mut grads.input_projection_copy));
    ctrl.emotion_projection
        .backward(&trace.ctrl.emotion_t, &d_input, Some(&mut grads.emotion_projection));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_base, ModelConfig};
    use crate::nn::normal_vec;

    fn tiny() -> ModelConfig {
        ModelConfig {
            freq_bins: 8,
            width: 8,
            blocks: 4,
            heads: 1,
            mlp_ratio: 2,
            vocab: 5,
            frames_per_token: 2,
            max_frames: 32,
        }
    }

    fn cfg(blocks: Vec<usize>) -> CtrlConfig {
        CtrlConfig {
            selected_blocks: blocks,
            t_emo: 0.5,
            lambda_default: 1.0,
        }
    }

    fn sample(seed: u64, t: usize) -> (FeatureMatrix, FeatureMatrix, EmotionTrack) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMatrix {
            data: Mat::from_vec(8, t, normal_vec(&mut rng, 8 * t, 1.0)),
        };
        let m = FeatureMatrix {
            data: Mat::from_vec(8, t, normal_vec(&mut rng, 8 * t, 1.0)),
        };
        let e = EmotionTrack::new(Mat::from_vec(
            2,
            t,
            normal_vec(&mut rng, 2 * t, 0.3)
                .into_iter()
                .map(|v| v.clamp(-1.0, 1.0))
                .collect(),
        ))
        .unwrap();
        (x, m, e)
    }

    fn perturbed(base: &BaseParams, c: &CtrlConfig) -> CtrlParams {
        let mut ctrl = init_ctrlnet(base, c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for z in &mut ctrl.zero_projections {
            z.w.data = normal_vec(&mut rng, z.w.data.len(), 0.3);
        }
        ctrl
    }

    #[test]
    fn init_copies_blocks_and_zeroes_projections() {
        let base = init_base(&tiny(), 1).unwrap();
        let c = cfg(vec![0, 2, 3]);
        let ctrl = init_ctrlnet(&base, &c, 7).unwrap();
        for (j, &k) in c.selected_blocks.iter().enumerate() {
            assert_eq!(ctrl.block_copies[j], base.blocks[k]);
        }
        assert_eq!(ctrl.input_projection_copy, base.input_projection);
        let probe = Mat::from_fn(3, 8, |r, c| (r as f64 - c as f64) * 0.7);
        for z in &ctrl.zero_projections {
            assert!(z.forward(&probe).data.iter().all(|&v| v == 0.0));
        }
        assert_eq!(init_ctrlnet(&base, &c, 7).unwrap(), ctrl);
    }

    #[test]
    fn config_contracts() {
        let base = init_base(&tiny(), 1).unwrap();
        assert!(init_ctrlnet(&base, &cfg(vec![1, 9]), 0).is_err());
        assert!(init_ctrlnet(&base, &cfg(vec![]), 0).is_err());
        assert!(init_ctrlnet(&base, &cfg(vec![2, 1]), 0).is_err());
        let mut c = cfg(vec![1]);
        c.t_emo = 0.0;
        assert!(init_ctrlnet(&base, &c, 0).is_err());
        c.t_emo = 1.5;
        assert!(init_ctrlnet(&base, &c, 0).is_err());
    }

    #[test]
    fn fresh_branch_emits_zero_features() {
        let base = init_base(&tiny(), 1).unwrap();
        let ctrl = init_ctrlnet(&base, &cfg(vec![0, 1, 3]), 2).unwrap();
        let (x, m, e) = sample(5, 6);
        let input = ModelInput {
            x_t: &x,
            masked: &m,
            tokens: &[1, 2, 3],
        };
        let feats = forward_ctrl(input, &e, 0.2, &base, &ctrl).unwrap();
        assert_eq!(feats.keys().copied().collect::<Vec<_>>(), vec![0, 1, 3]);
        assert!(feats.values().all(|f| f.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn emotion_ignored_when_projection_is_zero() {
        let base = init_base(&tiny(), 1).unwrap();
        let mut ctrl = perturbed(&base, &cfg(vec![1, 2]));
        ctrl.emotion_projection = Linear::zeros(2, 24);
        let (x, m, e) = sample(5, 6);
        let zero = EmotionTrack::constant(0.0, 0.0, 6).unwrap();
        let input = ModelInput {
            x_t: &x,
            masked: &m,
            tokens: &[1, 2, 3],
        };
        let a = forward_ctrl(input, &e, 0.2, &base, &ctrl).unwrap();
        let b = forward_ctrl(input, &zero, 0.2, &base, &ctrl).unwrap();
        for k in [1, 2] {
            assert!(a[&k].bit_eq(&b[&k]));
        }
        let c = forward_ctrl(input, &e, 0.2, &base, &ctrl).unwrap();
        assert!(a[&1].bit_eq(&c[&1]));
    }

    #[test]
    fn emotion_length_mismatch_is_rejected() {
        let base = init_base(&tiny(), 1).unwrap();
        let ctrl = init_ctrlnet(&base, &cfg(vec![1]), 2).unwrap();
        let (x, m, _) = sample(5, 6);
        let e = EmotionTrack::constant(0.0, 0.0, 5).unwrap();
        let input = ModelInput {
            x_t: &x,
            masked: &m,
            tokens: &[1],
        };
        assert!(forward_ctrl(input, &e, 0.2, &base, &ctrl).is_err());
    }

    #[test]
    fn blend_examples() {
        let base_out = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1);
        let feat = Mat::from_fn(3, 4, |r, c| 1.0 + r as f64 - c as f64);
        let full = TemporalMask::full(3);
        assert!(blend(&base_out, &feat, &full, 0.0).unwrap().bit_eq(&base_out));
        assert!(blend(&base_out, &feat, &TemporalMask::empty(3), 0.8)
            .unwrap()
            .bit_eq(&base_out));
        let mut sum = base_out.clone();
        sum.add_assign(&feat);
        assert!(blend(&base_out, &feat, &full, 1.0).unwrap().bit_eq(&sum));
        let partial = TemporalMask {
            frames: vec![false, true, false],
        };
        let out = blend(&base_out, &feat, &partial, 0.5).unwrap();
        assert_eq!(out.row(0), base_out.row(0));
        assert_eq!(out.row(2), base_out.row(2));
        assert_eq!(out.get(1, 2), base_out.get(1, 2) + 0.5 * feat.get(1, 2));
    }

    #[test]
    fn injection_is_linear_in_lambda_and_zero_off_mask() {
        let feat = Mat::from_fn(4, 3, |r, c| (r + c) as f64 - 1.5);
        let mask = TemporalMask {
            frames: vec![true, false, true, false],
        };
        let one = control_injection(&feat, &mask, 1.0).unwrap();
        let scaled = control_injection(&feat, &mask, 0.375).unwrap();
        for (a, b) in one.data.iter().zip(&scaled.data) {
            assert_eq!(a * 0.375, *b);
        }
        for f in [1, 3] {
            assert!(scaled.row(f).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn joint_field_gating() {
        let base = init_base(&tiny(), 1).unwrap();
        let c = cfg(vec![0, 2]);
        let fresh = init_ctrlnet(&base, &c, 2).unwrap();
        let trained = perturbed(&base, &c);
        let (x, m, e) = sample(8, 6);
        let input = ModelInput {
            x_t: &x,
            masked: &m,
            tokens: &[0, 4, 2],
        };
        let mask = TemporalMask::full(6);
        let none = BTreeSet::new();
        for &t in &[0.1, 0.5, 0.9] {
            let h = crate::model::assemble_input(&x, &m, &[0, 4, 2], &base).unwrap();
            let plain = forward_base(&h, t, &base, &none, None).unwrap().field;
            for &lambda in &[0.0, 0.5, 1.0] {
                let j = forward_joint(input, &e, t, &base, &fresh, &mask, lambda, &none).unwrap();
                assert!(j.data.bit_eq(&plain.data), "fresh branch t={t} lambda={lambda}");
            }
            let gated = forward_joint(input, &e, t, &base, &trained, &mask, 1.0, &none).unwrap();
            assert_eq!(gated.data.bit_eq(&plain.data), t >= c.t_emo, "t={t}");
            let off = forward_joint(input, &e, t, &base, &trained, &mask, 0.0, &none).unwrap();
            assert!(off.data.bit_eq(&plain.data));
        }
    }
}
