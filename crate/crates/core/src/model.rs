//! The frozen base network: a small diffusion transformer predicting the flow
//! field from `(x_t, masked sample, tokens, t)`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::nn::{
    layer_norm, layer_norm_backward, normal_vec, BlockCache, BlockParams, Linear, ParamSet, TensorList, TimeCache,
    TimeEmbed,
};
use crate::synthdata::FeatureMatrix;
use crate::tensor::Mat;

/// Frame-major activations, `T x D`.
pub type HiddenSeq = Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub freq_bins: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub frames_per_token: usize,
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            freq_bins: 16,
            width: 64,
            blocks: 8,
            heads: 1,
            mlp_ratio: 4,
            vocab: 16,
            frames_per_token: 4,
            max_frames: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.blocks >= 1, Config, "model.blocks must be at least 1");
        ensure!(self.heads >= 1, Config, "model.heads must be at least 1");
        ensure!(
            self.width >= 2 && self.width.is_multiple_of(self.heads),
            Config,
            "model.width ({}) must be divisible by model.heads ({})",
            self.width,
            self.heads
        );
        ensure!(self.width.is_multiple_of(2), Config, "model.width must be even");
        ensure!(self.mlp_ratio >= 1, Config, "model.mlp_ratio must be at least 1");
        ensure!(self.freq_bins >= 1, Config, "model.freq_bins must be positive");
        ensure!(
            self.frames_per_token >= 1,
            Config,
            "model.frames_per_token must be positive"
        );
        Ok(())
    }

    /// Token id used to pad transcripts up to the frame count.
    pub fn filler_token(&self) -> usize {
        self.vocab
    }

    pub fn input_width(&self) -> usize {
        3 * self.freq_bins
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams {
    pub config: ModelConfig,
    /// `3F -> D`, applied per frame.
    pub input_projection: Linear,
    /// `(V + 1) x F`; the last row is the filler token.
    pub token_embedding: Mat,
    pub time_embedding: TimeEmbed,
    pub blocks: Vec<BlockParams>,
    /// Plain layer norm then `D -> F`.
    pub output_head: Linear,
}

impl ParamSet for BaseParams {
    fn tensors(&self, prefix: &str) -> TensorList<'_> {
        let p = |n: &str| {
            if prefix.is_empty() {
                n.to_string()
            } else {
                format!("{prefix}.{n}")
            }
        };
        let mut v = self.input_projection.tensors(&p("input_projection"));
        v.push((
            p("token_embedding"),
            vec![self.token_embedding.rows, self.token_embedding.cols],
            &self.token_embedding.data[..],
        ));
        v.extend(self.time_embedding.tensors(&p("time_embedding")));
        for (k, b) in self.blocks.iter().enumerate() {
            v.extend(b.tensors(&p(&format!("blocks.{k}"))));
        }
        v.extend(self.output_head.tensors(&p("output_head")));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.input_projection.tensors_mut();
        v.push(&mut self.token_embedding.data[..]);
        v.extend(self.time_embedding.tensors_mut());
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(self.output_head.tensors_mut());
        v
    }
}

impl BaseParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

/// SHA-256 over every tensor's name, shape and exact bit pattern.
pub fn param_hash(params: &impl ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, shape, values) in params.tensors("") {
        h.update(name.as_bytes());
        for s in shape {
            h.update((s as u64).to_le_bytes());
        }
        for v in values {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Scaled-normal weights, zero biases; deterministic in `seed`.
pub fn init_base(config: &ModelConfig, seed: u64) -> Result<BaseParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.width;
    let f = config.freq_bins;
    let input_projection = Linear::init(&mut rng, config.input_width(), d, 1.0);
    let token_embedding = Mat::from_vec(
        config.vocab + 1,
        f,
        normal_vec(&mut rng, (config.vocab + 1) * f, 1.0 / (f as f64).sqrt()),
    );
    let time_embedding = TimeEmbed::init(&mut rng, d);
    let blocks = (0..config.blocks)
        .map(|_| BlockParams::init(&mut rng, d, config.mlp_ratio))
        .collect();
    let output_head = Linear::init(&mut rng, d, f, 1.0);
    Ok(BaseParams {
        config: config.clone(),
        input_projection,
        token_embedding,
        time_embedding,
        blocks,
        output_head,
    })
}

/// Token id covering each frame; frames past the transcript get the filler.
pub fn frame_tokens(config: &ModelConfig, tokens: &[usize], frames: usize) -> Result<Vec<usize>> {
    let l = config.frames_per_token;
    ensure!(
        tokens.len() * l <= frames.div_ceil(l) * l,
        Contract,
        "{} tokens cover more than {frames} frames",
        tokens.len()
    );
    ensure!(
        tokens.iter().all(|&t| t <= config.vocab),
        Contract,
        "token id outside embedding table"
    );
    Ok((0..frames)
        .map(|f| tokens.get(f / l).copied().unwrap_or(config.filler_token()))
        .collect())
}

/// Per frame: `[x_t ; masked ; embedding(token)]`, a `T x 3F` matrix.
pub fn concat_input(params: &BaseParams, x_t: &FeatureMatrix, masked: &FeatureMatrix, tokens: &[usize]) -> Result<Mat> {
    let f = params.config.freq_bins;
    ensure!(
        x_t.data.shape() == masked.data.shape(),
        Contract,
        "x_t is {:?} but masked is {:?}",
        x_t.data.shape(),
        masked.data.shape()
    );
    ensure!(
        x_t.freq_bins() == f,
        Contract,
        "sample has {} bins, model expects {f}",
        x_t.freq_bins()
    );
    let t = x_t.frames();
    ensure!(
        t >= 1 && t <= params.config.max_frames,
        Contract,
        "frame count {t} outside [1, {}]",
        params.config.max_frames
    );
    let per_frame = frame_tokens(&params.config, tokens, t)?;
    let mut out = Mat::zeros(t, 3 * f);
    for (frame, &tok) in per_frame.iter().enumerate() {
        let row = out.row_mut(frame);
        for r in 0..f {
            row[r] = x_t.data.get(r, frame);
            row[f + r] = masked.data.get(r, frame);
        }
        row[2 * f..].copy_from_slice(params.token_embedding.row(tok));
    }
    Ok(out)
}

pub fn assemble_input(
    x_t: &FeatureMatrix,
    masked: &FeatureMatrix,
    tokens: &[usize],
    params: &BaseParams,
) -> Result<HiddenSeq> {
    let concat = concat_input(params, x_t, masked, tokens)?;
    Ok(params.input_projection.forward(&concat))
}

pub fn validate_skip_set(config: &ModelConfig, skip: &BTreeSet<usize>) -> Result<()> {
    if let Some(&k) = skip.iter().find(|&&k| k >= config.blocks) {
        return Err(crate::error::Error::Contract(format!(
            "skip index {k} out of range [0, {})",
            config.blocks
        )));
    }
    Ok(())
}

/// Activations kept for the reverse pass.
pub struct BaseTrace {
    pub field: FeatureMatrix,
    /// Residual stream after block `k` (after any injection).
    pub block_outputs: Vec<HiddenSeq>,
    pub(crate) time: TimeCache,
    pub(crate) caches: Vec<Option<BlockCache>>,
    head_normed: Mat,
    head_rstd: Vec<f64>,
}

pub struct BaseOutput {
    pub field: FeatureMatrix,
    pub block_outputs: Vec<HiddenSeq>,
}

/// Runs the block stack on an assembled input. Blocks in `skip` are the
/// identity; `injections[k]`, when present, is added after block `k`.
pub fn forward_base(
    hidden: &HiddenSeq,
    t: f64,
    params: &BaseParams,
    skip: &BTreeSet<usize>,
    injections: Option<&[Option<HiddenSeq>]>,
) -> Result<BaseOutput> {
    check_flow_step(t)?;
    let time = params.time_embedding.forward(t);
    let trace = run_blocks(hidden.clone(), &time, params, skip, injections, false)?;
    Ok(BaseOutput {
        field: trace.field,
        block_outputs: trace.block_outputs,
    })
}

pub(crate) fn check_flow_step(t: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&t), Contract, "flow step {t} outside [0, 1]");
    Ok(())
}

/// Full forward from a `T x 3F` concatenation, keeping caches when asked.
pub(crate) fn trace_base(
    concat: &Mat,
    t: f64,
    params: &BaseParams,
    skip: &BTreeSet<usize>,
    injections: Option<&[Option<HiddenSeq>]>,
    keep_cache: bool,
) -> Result<BaseTrace> {
    check_flow_step(t)?;
    let time = params.time_embedding.forward(t);
    let hidden = params.input_projection.forward(concat);
    let mut trace = run_blocks(hidden, &time, params, skip, injections, keep_cache)?;
    trace.time = time;
    Ok(trace)
}

fn run_blocks(
    mut h: HiddenSeq,
    time: &TimeCache,
    params: &BaseParams,
    skip: &BTreeSet<usize>,
    injections: Option<&[Option<HiddenSeq>]>,
    keep_cache: bool,
) -> Result<BaseTrace> {
    let cfg = &params.config;
    validate_skip_set(cfg, skip)?;
    ensure!(
        h.cols == cfg.width,
        Contract,
        "hidden width {} != model width {}",
        h.cols,
        cfg.width
    );
    if let Some(inj) = injections {
        ensure!(
            inj.len() == cfg.blocks,
            Contract,
            "{} injections for {} blocks",
            inj.len(),
            cfg.blocks
        );
        for m in inj.iter().flatten() {
            ensure!(
                m.shape() == h.shape(),
                Contract,
                "injection shape {:?} != {:?}",
                m.shape(),
                h.shape()
            );
        }
    }
    let mut block_outputs = Vec::with_capacity(cfg.blocks);
    let mut caches = Vec::with_capacity(cfg.blocks);
    for (k, block) in params.blocks.iter().enumerate() {
        if skip.contains(&k) {
            caches.push(None);
        } else {
            let (out, cache) = block.forward(&h, &time.cond_act, cfg.heads);
            h = out;
            caches.push(keep_cache.then_some(cache));
        }
        if let Some(Some(inj)) = injections.map(|i| &i[k]) {
            h.add_assign(inj);
        }
        block_outputs.push(h.clone());
    }
    let (head_normed, head_rstd) = layer_norm(&h);
    let field_tf = params.output_head.forward(&head_normed);
    Ok(BaseTrace {
        field: FeatureMatrix {
            data: field_tf.transpose(),
        },
        block_outputs,
        time: TimeCache::empty(),
        caches,
        head_normed,
        head_rstd,
    })
}

pub(crate) struct BaseGradients {
    /// Gradient w.r.t. the residual stream right after block `k`.
    pub d_after_block: Vec<Mat>,
}

/// Reverse pass from `d_field` (`F x T`). Parameter gradients are accumulated
/// into `grads` when given; the time MLP and token table are included.
pub(crate) fn backward_base(
    params: &BaseParams,
    concat: &Mat,
    tokens_per_frame: &[usize],
    trace: &BaseTrace,
    d_field: &Mat,
    mut grads: Option<&mut BaseParams>,
) -> BaseGradients {
    let cfg = &params.config;
    let d_out = d_field.transpose();
    let dnorm = params.output_head.backward(
        &trace.head_normed,
        &d_out,
        grads.as_deref_mut().map(|g| &mut g.output_head),
    );
    let mut dh = layer_norm_backward(&trace.head_normed, &trace.head_rstd, &dnorm);
    let mut d_after_block = vec![Mat::zeros(0, 0); cfg.blocks];
    let mut d_cond_act = vec![0.0; cfg.width];
    for k in (0..cfg.blocks).rev() {
        d_after_block[k] = dh.clone();
        if let Some(cache) = &trace.caches[k] {
            dh = params.blocks[k].backward(
                cache,
                &trace.time.cond_act,
                &dh,
                cfg.heads,
                grads.as_deref_mut().map(|g| &mut g.blocks[k]),
                &mut d_cond_act,
            );
        }
    }
    if let Some(g) = grads {
        let dconcat = params
            .input_projection
            .backward(concat, &dh, Some(&mut g.input_projection));
        let f = cfg.freq_bins;
        for (frame, &tok) in tokens_per_frame.iter().enumerate() {
            let src = &dconcat.row(frame)[2 * f..];
            for (dst, s) in g.token_embedding.row_mut(tok).iter_mut().zip(src) {
                *dst += s;
            }
        }
        params
            .time_embedding
            .backward(&trace.time, &d_cond_act, &mut g.time_embedding);
    }
    BaseGradients { d_after_block }
}
