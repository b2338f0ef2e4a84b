//! Oracle metrics, conditional synthesis, the emotion-change benchmark and the
//! experiment engines built on them.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctrlnet::{forward_joint, CtrlConfig, CtrlParams, ModelInput};
use crate::error::{ensure, Result};
use crate::flow::{integrate_ode, resample_from, standard_normal, SampleSchedule, TemporalMask};
use crate::model::{assemble_input, forward_base, BaseParams};
use crate::synthdata::{
    build_emochange_case, decode_tokens, estimate_speaker, extract_emotion, window_interpolate, Codebook,
    EmotionSegment, EmotionTrack, EvalCase, FeatureMatrix, Layout, SynthDomain, SynthUtterance, UtteranceSpec,
};
use crate::train::{train_ctrlnet, TrainConfig};

/// Smoothing window applied by [`av_cos`] before comparison.
pub const EVAL_WINDOW: usize = 8;

/// Fraction of token windows whose decoded id differs from `ref_tokens`.
pub fn ter(ref_tokens: &[usize], gen: &FeatureMatrix, layout: &Layout, codebook: &Codebook) -> Result<f64> {
    let decoded = decode_tokens(layout, codebook, gen)?;
    ensure!(
        decoded.len() == ref_tokens.len(),
        Contract,
        "{} reference tokens but {} token windows",
        ref_tokens.len(),
        decoded.len()
    );
    ensure!(!ref_tokens.is_empty(), Contract, "empty token sequence");
    let wrong = decoded.iter().zip(ref_tokens).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / ref_tokens.len() as f64)
}

fn common_length(a: &EmotionTrack, b: &EmotionTrack) -> (EmotionTrack, EmotionTrack) {
    if a.frames() == b.frames() {
        (a.clone(), b.clone())
    } else {
        let n = a.frames().max(b.frames());
        (a.resample(n), b.resample(n))
    }
}

/// `1 - RMSE / 2` per channel, averaged over arousal and valence.
pub fn emo_sim(reference: &EmotionTrack, gen: &EmotionTrack) -> f64 {
    let (a, b) = common_length(reference, gen);
    let channel = |x: &[f64], y: &[f64]| {
        let mse = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len().max(1) as f64;
        1.0 - mse.sqrt() / 2.0
    };
    (channel(a.arousal(), b.arousal()) + channel(a.valence(), b.valence())) / 2.0
}

fn centered(track: &EmotionTrack) -> Vec<f64> {
    [track.arousal(), track.valence()]
        .into_iter()
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
            row.iter().map(move |v| v - mean)
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine between the mean-centered two-channel tracks after smoothing;
/// 0 when either centered track is identically zero.
pub fn av_cos(reference: &EmotionTrack, gen: &EmotionTrack, window: usize) -> f64 {
    let (a, b) = common_length(&window_interpolate(reference, window), &window_interpolate(gen, window));
    cosine(&centered(&a), &centered(&b))
}

pub fn speaker_sim(
    reference: &FeatureMatrix,
    gen: &FeatureMatrix,
    layout: &Layout,
    codebook: &Codebook,
) -> Result<f64> {
    let a = estimate_speaker(layout, codebook, reference)?;
    let b = estimate_speaker(layout, codebook, gen)?;
    Ok(cosine(&a, &b))
}

/// The base model with an optional control branch.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub base: &'a BaseParams,
    pub ctrl: Option<&'a CtrlParams>,
}

impl<'a> Models<'a> {
    pub fn base_only(base: &'a BaseParams) -> Self {
        Self { base, ctrl: None }
    }

    pub fn with_ctrl(base: &'a BaseParams, ctrl: &'a CtrlParams) -> Self {
        Self { base, ctrl: Some(ctrl) }
    }
}

/// Generates speech for `case.target_tokens` continuing `case.reference`.
/// `emotion` covers reference plus generated frames. Returns only the
/// generated frames.
pub fn synthesize(
    models: Models<'_>,
    case: &EvalCase,
    emotion: &EmotionTrack,
    schedule: &SampleSchedule,
    skip: &BTreeSet<usize>,
    rng: &mut impl Rng,
) -> Result<FeatureMatrix> {
    let layout_l = models.base.config.frames_per_token;
    let t_ref = case.reference.frames();
    let t_gen = case.target_tokens.len() * layout_l;
    let total = t_ref + t_gen;
    ensure!(
        emotion.frames() == total,
        Contract,
        "emotion covers {} frames, prompt plus target is {total}",
        emotion.frames()
    );
    ensure!(
        case.reference_tokens.len() * layout_l == t_ref,
        Contract,
        "reference has {t_ref} frames but {} tokens",
        case.reference_tokens.len()
    );
    let f = case.reference.freq_bins();
    let masked = FeatureMatrix::concat_frames(&[&case.reference, &FeatureMatrix::zeros(f, t_gen)]);
    let mask = TemporalMask::suffix(total, t_ref);
    let mut tokens = case.reference_tokens.clone();
    tokens.extend_from_slice(&case.target_tokens);
    let x0 = standard_normal(f, total, rng);
    let base = models.base;
    let out = integrate_ode(
        |x, t, lambda| match models.ctrl {
            Some(ctrl) => {
                let input = ModelInput {
                    x_t: x,
                    masked: &masked,
                    tokens: &tokens,
                };
                forward_joint(input, emotion, t, base, ctrl, &mask, lambda, skip)
            }
            None => {
                let hidden = assemble_input(x, &masked, &tokens, base)?;
                Ok(forward_base(&hidden, t, base, skip, None)?.field)
            }
        },
        &x0,
        schedule,
    )?;
    Ok(out.frame_range(t_ref, total))
}

/// Emotion condition for a case: the prompt's smoothed track, replayed over
/// the generated region.
pub fn condition_track(layout: &Layout, case: &EvalCase, window: usize) -> EmotionTrack {
    let track = extract_emotion(layout, &case.reference, window);
    EmotionTrack::concat(&[&track, &track])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub cases: usize,
    pub speakers: u64,
    /// Speaker ids start here; ids at or above the training speaker count are unseen.
    pub first_speaker: u64,
    pub tokens_per_half: usize,
    pub level: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            cases: 64,
            speakers: 8,
            first_speaker: 32,
            tokens_per_half: 3,
            level: 0.8,
            noise_std: 0.03,
            seed: 7,
        }
    }
}

/// Sign patterns `(arousal A, valence A, arousal B, valence B)`.
const EMOTION_COMBOS: [[f64; 4]; 8] = [
    [1.0, 1.0, -1.0, -1.0],
    [-1.0, -1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0, 1.0],
    [-1.0, 1.0, -1.0, -1.0],
];

/// Emotion-change cases: each prompt is two single-emotion halves of one
/// speaker, cycling through the fixed combos and speakers.
pub fn build_benchmark(domain: &SynthDomain, config: &BenchmarkConfig) -> Result<Vec<EvalCase>> {
    ensure!(config.cases >= 1, Config, "benchmark.cases must be at least 1");
    ensure!(config.speakers >= 1, Config, "benchmark.speakers must be at least 1");
    ensure!(
        config.tokens_per_half >= 1,
        Config,
        "benchmark.tokens_per_half must be at least 1"
    );
    ensure!(
        config.level > 0.0 && config.level <= 1.0,
        Config,
        "benchmark.level must lie in (0, 1]"
    );
    let layout = &domain.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.cases)
        .map(|i| {
            let combo = EMOTION_COMBOS[i % EMOTION_COMBOS.len()];
            let speaker_id = config.first_speaker + (i / EMOTION_COMBOS.len()) as u64 % config.speakers;
            let mut half = |a: f64, v: f64| UtteranceSpec {
                tokens: (0..config.tokens_per_half)
                    .map(|_| rng.random_range(0..layout.vocab))
                    .collect(),
                emotion_segments: vec![EmotionSegment {
                    frames: config.tokens_per_half * layout.frames_per_token,
                    arousal: a * config.level,
                    valence: v * config.level,
                }],
                speaker_id,
                noise_std: config.noise_std,
            };
            let spec_a = half(combo[0], combo[1]);
            let spec_b = half(combo[2], combo[3]);
            let pattern: Vec<usize> = (0..2 * config.tokens_per_half)
                .map(|_| rng.random_range(0..layout.vocab))
                .collect();
            let noise_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            build_emochange_case(domain, &spec_a, &spec_b, &pattern, noise_seed)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_tag: String,
    pub ter: f64,
    pub spk_sim: f64,
    pub emo_sim: f64,
    pub av_cos: f64,
    pub wall_ms: f64,
}

pub const RECORD_HEADER: &str = "config_tag,ter,spk_sim,emo_sim,av_cos,wall_ms";

impl ExperimentRecord {
    fn csv_fields(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.config_tag, self.ter, self.spk_sim, self.emo_sim, self.av_cos, self.wall_ms
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.ter, self.spk_sim, self.emo_sim, self.av_cos, self.wall_ms]
            .iter()
            .all(|v| v.is_finite());
        ensure!(finite, Contract, "record {} has a non-finite metric", self.config_tag);
        ensure!(
            (0.0..=1.0).contains(&self.ter)
                && (0.0..=1.0).contains(&self.emo_sim)
                && (-1.0..=1.0).contains(&self.spk_sim)
                && (-1.0..=1.0).contains(&self.av_cos)
                && self.wall_ms >= 0.0,
            Contract,
            "record {} has a metric out of range",
            self.config_tag
        );
        Ok(())
    }
}

pub fn records_csv(records: &[ExperimentRecord]) -> String {
    let mut s = format!("{RECORD_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_fields());
        s.push('\n');
    }
    s
}

/// How the benchmark is run: sampler schedule, emotion window for the
/// condition, and the seed from which every case's noise is derived.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub schedule: SampleSchedule,
    pub emotion_window: usize,
    pub seed: u64,
}

/// Per-case noise stream; independent of evaluation order.
pub fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub ter: f64,
    pub spk_sim: f64,
    pub emo_sim: f64,
    pub av_cos: f64,
    pub generated: FeatureMatrix,
}

pub fn evaluate_case(
    models: Models<'_>,
    layout: &Layout,
    codebook: &Codebook,
    index: usize,
    case: &EvalCase,
    settings: &EvalSettings,
    skip: &BTreeSet<usize>,
) -> Result<CaseResult> {
    let emotion = condition_track(layout, case, settings.emotion_window);
    let mut rng = case_rng(settings.seed, index);
    let generated = synthesize(models, case, &emotion, &settings.schedule, skip, &mut rng)?;
    let ref_track = extract_emotion(layout, &case.reference, 1);
    let gen_track = extract_emotion(layout, &generated, 1);
    Ok(CaseResult {
        ter: ter(&case.target_tokens, &generated, layout, codebook)?,
        spk_sim: speaker_sim(&case.reference, &generated, layout, codebook)?,
        emo_sim: emo_sim(&ref_track, &gen_track),
        av_cos: av_cos(&ref_track, &gen_track, EVAL_WINDOW),
        generated,
    })
}

/// Mean metrics over the benchmark; `wall_ms` is the mean synthesis time of
/// one pass over the cases.
pub fn evaluate(
    models: Models<'_>,
    layout: &Layout,
    codebook: &Codebook,
    cases: &[EvalCase],
    settings: &EvalSettings,
    skip: &BTreeSet<usize>,
    tag: &str,
) -> Result<ExperimentRecord> {
    ensure!(!cases.is_empty(), Config, "evaluation set is empty");
    let start = Instant::now();
    let results = cases
        .iter()
        .enumerate()
        .map(|(i, c)| evaluate_case(models, layout, codebook, i, c, settings, skip))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mean = |f: fn(&CaseResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let record = ExperimentRecord {
        config_tag: tag.to_string(),
        ter: mean(|r| r.ter),
        spk_sim: mean(|r| r.spk_sim),
        emo_sim: mean(|r| r.emo_sim),
        av_cos: mean(|r| r.av_cos),
        wall_ms: start.elapsed().as_secs_f64() * 1e3 / n,
    };
    record.validate()?;
    Ok(record)
}

/// Mean wall time of one synthesis: a discarded warm-up, then `runs` timed
/// repetitions on a monotonic clock.
pub fn time_synthesis(
    models: Models<'_>,
    layout: &Layout,
    case: &EvalCase,
    settings: &EvalSettings,
    runs: usize,
) -> Result<f64> {
    ensure!(runs >= 1, Config, "timing needs at least one run");
    let emotion = condition_track(layout, case, settings.emotion_window);
    let none = BTreeSet::new();
    let mut rng = case_rng(settings.seed, 0);
    synthesize(models, case, &emotion, &settings.schedule, &none, &mut rng)?;
    let start = Instant::now();
    for _ in 0..runs {
        synthesize(models, case, &emotion, &settings.schedule, &none, &mut rng)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / runs as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockImportance {
    pub block: usize,
    pub delta_ter: f64,
    pub delta_spk_sim: f64,
    pub record: ExperimentRecord,
}

/// Skips each base block in turn. Rows are sorted by TER increase, largest
/// first, ties by block index.
pub fn block_importance_scan(
    base: &BaseParams,
    layout: &Layout,
    codebook: &Codebook,
    cases: &[EvalCase],
    settings: &EvalSettings,
) -> Result<(ExperimentRecord, Vec<BlockImportance>)> {
    let models = Models::base_only(base);
    let baseline = evaluate(models, layout, codebook, cases, settings, &BTreeSet::new(), "baseline")?;
    let mut rows = (0..base.config.blocks)
        .map(|k| {
            let skip: BTreeSet<usize> = [k].into_iter().collect();
            let record = evaluate(models, layout, codebook, cases, settings, &skip, &format!("skip={k}"))?;
            Ok(BlockImportance {
                block: k,
                delta_ter: record.ter - baseline.ter,
                delta_spk_sim: record.spk_sim - baseline.spk_sim,
                record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.delta_ter.total_cmp(&a.delta_ter).then(a.block.cmp(&b.block)));
    Ok((baseline, rows))
}

pub const BLOCK_SCAN_HEADER: &str = "config_tag,ter,spk_sim,emo_sim,av_cos,wall_ms,block_index,delta_ter,delta_spk_sim";

pub fn block_scan_csv(rows: &[BlockImportance]) -> String {
    let mut s = format!("{BLOCK_SCAN_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.record.csv_fields(),
            r.block,
            r.delta_ter,
            r.delta_spk_sim
        ));
    }
    s
}

/// The `n` blocks whose removal hurts TER most.
pub fn critical_blocks(rows: &[BlockImportance], n: usize) -> Vec<usize> {
    rows.iter().take(n).map(|r| r.block).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowstepPoint {
    pub t: f64,
    pub emo_sim: f64,
    pub av_cos: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowstepCurve {
    pub points: Vec<FlowstepPoint>,
    /// Smallest grid step whose mean emo_sim exceeds [`FlowstepCurve::THRESHOLD`]
    /// of the value at the largest grid step.
    pub t_emo_hat: f64,
}

impl FlowstepCurve {
    pub const THRESHOLD: f64 = 0.9;
}

/// `{0, 0.05, ..., 1}`.
pub fn default_t_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

pub const FLOWSTEP_HEADER: &str = "t,emo_sim,av_cos";

pub fn flowstep_csv(curve: &FlowstepCurve) -> String {
    let mut s = format!("{FLOWSTEP_HEADER}\n");
    for p in &curve.points {
        s.push_str(&format!("{:.2},{:.6},{:.6}\n", p.t, p.emo_sim, p.av_cos));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowstepSettings {
    pub grid: Vec<f64>,
    pub draws: usize,
    pub nfe: usize,
    pub emotion_window: usize,
    pub seed: u64,
}

impl FlowstepSettings {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.grid.is_empty(), Config, "flow-step grid is empty");
        ensure!(
            self.grid.windows(2).all(|w| w[0] < w[1]) && self.grid.iter().all(|t| (0.0..=1.0).contains(t)),
            Config,
            "flow-step grid must be strictly increasing inside [0, 1]"
        );
        ensure!(self.draws >= 1, Config, "flowstep.draws must be at least 1");
        ensure!(self.nfe >= 1, Config, "flowstep.nfe must be at least 1");
        Ok(())
    }
}

/// Re-noises each sample to every grid step and regenerates it with
/// `field(sample, x, t)`, comparing emotion tracks against the original.
pub fn flowstep_curve<F>(
    layout: &Layout,
    samples: &[(FeatureMatrix, Vec<usize>)],
    settings: &FlowstepSettings,
    mut field: F,
) -> Result<FlowstepCurve>
where
    F: FnMut(usize, &FeatureMatrix, f64) -> Result<FeatureMatrix>,
{
    settings.validate()?;
    ensure!(
        !samples.is_empty(),
        Config,
        "flow-step analysis needs at least one sample"
    );
    let mut points = Vec::with_capacity(settings.grid.len());
    for &t in &settings.grid {
        let (mut es, mut ac) = (0.0, 0.0);
        for (si, (x1, _)) in samples.iter().enumerate() {
            let original = extract_emotion(layout, x1, settings.emotion_window);
            for d in 0..settings.draws {
                // same noise at every grid step for a given (sample, draw)
                let mut draw_rng = ChaCha8Rng::seed_from_u64(settings.seed ^ ((si as u64) << 32 | d as u64));
                let x0 = standard_normal(x1.freq_bins(), x1.frames(), &mut draw_rng);
                let out = resample_from(&x0, x1, t, |x, tt| field(si, x, tt), settings.nfe)?;
                let track = extract_emotion(layout, &out, settings.emotion_window);
                es += emo_sim(&original, &track);
                ac += av_cos(&original, &track, EVAL_WINDOW);
            }
        }
        let n = (samples.len() * settings.draws) as f64;
        points.push(FlowstepPoint {
            t,
            emo_sim: es / n,
            av_cos: ac / n,
        });
    }
    let reference = points.last().expect("non-empty grid").emo_sim;
    let t_emo_hat = points
        .iter()
        .find(|p| p.emo_sim > FlowstepCurve::THRESHOLD * reference)
        .map(|p| p.t)
        .unwrap_or(1.0);
    Ok(FlowstepCurve { points, t_emo_hat })
}

/// [`flowstep_curve`] driven by the base model with a full mask (no prompt).
pub fn flowstep_analysis(
    base: &BaseParams,
    layout: &Layout,
    samples: &[(FeatureMatrix, Vec<usize>)],
    settings: &FlowstepSettings,
) -> Result<FlowstepCurve> {
    let none = BTreeSet::new();
    flowstep_curve(layout, samples, settings, |si, x, t| {
        let (x1, tokens) = &samples[si];
        let masked = FeatureMatrix::zeros(x1.freq_bins(), x1.frames());
        let hidden = assemble_input(x, &masked, tokens, base)?;
        Ok(forward_base(&hidden, t, base, &none, None)?.field)
    })
}

/// Benchmark prompts as standalone utterances for flow-step analysis.
pub fn prompts_of(cases: &[EvalCase]) -> Vec<(FeatureMatrix, Vec<usize>)> {
    cases
        .iter()
        .map(|c| (c.reference.clone(), c.reference_tokens.clone()))
        .collect()
}

/// Default scale grid.
pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 1.0];

/// One record per control scale; metrics over the benchmark and timing over
/// `timing_runs` syntheses of the first case.
#[allow(clippy::too_many_arguments)]
pub fn scale_sweep(
    base: &BaseParams,
    ctrl: &CtrlParams,
    layout: &Layout,
    codebook: &Codebook,
    cases: &[EvalCase],
    settings: &EvalSettings,
    lambdas: &[f64],
    timing_runs: usize,
) -> Result<Vec<ExperimentRecord>> {
    ensure!(!lambdas.is_empty(), Config, "lambda grid is empty");
    let models = Models::with_ctrl(base, ctrl);
    lambdas
        .iter()
        .map(|&lambda| {
            let s = EvalSettings {
                schedule: SampleSchedule::new(settings.schedule.nfe, lambda, settings.schedule.interval)?,
                ..settings.clone()
            };
            let mut record = evaluate(
                models,
                layout,
                codebook,
                cases,
                &s,
                &BTreeSet::new(),
                &format!("lambda={lambda}"),
            )?;
            record.wall_ms = time_synthesis(models, layout, &cases[0], &s, timing_runs)?;
            Ok(record)
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let a: Vec<f64> = rx.iter().map(|v| v - mx).collect();
    let b: Vec<f64> = ry.iter().map(|v| v - my).collect();
    cosine(&a, &b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Interval,
    Window,
    Selective,
}

/// One arm of an ablation: a complete control-training recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub tag: String,
    pub ctrl: CtrlConfig,
    pub train: TrainConfig,
}

impl AblationKind {
    /// Arms must share steps and seed and differ only in the ablated setting.
    pub fn check(self, arms: &[AblationArm]) -> Result<()> {
        ensure!(arms.len() >= 2, Config, "an ablation needs at least two arms");
        let first = &arms[0];
        for arm in &arms[1..] {
            ensure!(
                arm.train.steps == first.train.steps && arm.train.seed == first.train.seed,
                Config,
                "ablation arm {} differs in steps or seed from {}",
                arm.tag,
                first.tag
            );
            let same_interval =
                arm.ctrl.t_emo == first.ctrl.t_emo && arm.train.flow_interval == first.train.flow_interval;
            let same_window = arm.train.emotion_window == first.train.emotion_window;
            let same_blocks = arm.ctrl.selected_blocks == first.ctrl.selected_blocks;
            let ok = match self {
                AblationKind::Interval => same_window && same_blocks,
                AblationKind::Window => same_interval && same_blocks,
                AblationKind::Selective => same_interval && same_window,
            };
            ensure!(
                ok,
                Config,
                "ablation arm {} changes more than the {self:?} setting",
                arm.tag
            );
        }
        Ok(())
    }
}

pub struct AblationOutcome {
    pub records: Vec<ExperimentRecord>,
    pub ctrls: Vec<CtrlParams>,
}

/// Evaluates a trained arm on the benchmark with the arm's own window for the
/// condition and its own `t_emo` for the schedule; `wall_ms` follows the
/// timing protocol.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_arm(
    arm: &AblationArm,
    ctrl: &CtrlParams,
    domain: &SynthDomain,
    base: &BaseParams,
    cases: &[EvalCase],
    settings: &EvalSettings,
    timing_runs: usize,
) -> Result<ExperimentRecord> {
    let s = EvalSettings {
        schedule: SampleSchedule::new(
            settings.schedule.nfe,
            settings.schedule.lambda,
            crate::flow::FlowStepInterval::up_to(arm.ctrl.t_emo)?,
        )?,
        emotion_window: arm.train.emotion_window,
        seed: settings.seed,
    };
    let models = Models::with_ctrl(base, ctrl);
    let mut record = evaluate(
        models,
        &domain.layout,
        &domain.codebook,
        cases,
        &s,
        &BTreeSet::new(),
        &arm.tag,
    )?;
    record.wall_ms = time_synthesis(models, &domain.layout, &cases[0], &s, timing_runs)?;
    Ok(record)
}

/// Trains one control branch per arm and evaluates each with [`evaluate_arm`].
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    kind: AblationKind,
    arms: &[AblationArm],
    data: &[SynthUtterance],
    domain: &SynthDomain,
    base: &BaseParams,
    cases: &[EvalCase],
    settings: &EvalSettings,
    timing_runs: usize,
) -> Result<AblationOutcome> {
    kind.check(arms)?;
    ensure!(
        base.config.freq_bins == domain.layout.freq_bins && base.config.vocab == domain.layout.vocab,
        Config,
        "dataset layout does not match the base model"
    );
    let mut records = Vec::new();
    let mut ctrls = Vec::new();
    for arm in arms {
        let (ctrl, _) = train_ctrlnet(data, &domain.layout, base, &arm.ctrl, &arm.train, &mut |_| {})?;
        records.push(evaluate_arm(arm, &ctrl, domain, base, cases, settings, timing_runs)?);
        ctrls.push(ctrl);
    }
    Ok(AblationOutcome { records, ctrls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render, SpeakerTable};
    use crate::tensor::Mat;

    fn track(a: &[f64], v: &[f64]) -> EmotionTrack {
        let mut d = a.to_vec();
        d.extend_from_slice(v);
        EmotionTrack::new(Mat::from_vec(2, a.len(), d)).unwrap()
    }

    #[test]
    fn emo_sim_examples() {
        let x = track(&[0.1, -0.4, 0.3], &[0.0, 0.5, 0.5]);
        assert_eq!(emo_sim(&x, &x), 1.0);
        let one = EmotionTrack::constant(1.0, 1.0, 5).unwrap();
        let minus = EmotionTrack::constant(-1.0, -1.0, 5).unwrap();
        assert_eq!(emo_sim(&one, &minus), 0.0);
        let a = track(&[0.0; 4], &[0.2; 4]);
        let b = track(&[1.0; 4], &[0.2; 4]);
        assert!((emo_sim(&a, &b) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn av_cos_examples() {
        let x = track(&[0.1, -0.4, 0.3, 0.9, -0.2, 0.0], &[0.0, 0.5, 0.5, -0.3, 0.2, 0.1]);
        assert!((av_cos(&x, &x, 1) - 1.0).abs() < 1e-12);
        let neg = EmotionTrack::new(Mat::from_vec(2, 6, x.data.data.iter().map(|v| -v).collect())).unwrap();
        assert!((av_cos(&x, &neg, 1) + 1.0).abs() < 1e-12);
        let c = EmotionTrack::constant(0.3, 0.3, 6).unwrap();
        assert_eq!(av_cos(&c, &x, 8), 0.0);
    }

    #[test]
    fn ter_examples() {
        let domain = SynthDomain::new(Layout::default(), 1, 2).unwrap();
        let layout = &domain.layout;
        let tokens = vec![1, 5, 9, 3];
        let track = EmotionTrack::constant(0.2, -0.5, 16).unwrap();
        let clean = FeatureMatrix::new(render(layout, &domain.codebook, &tokens, &track)).unwrap();
        assert_eq!(ter(&tokens, &clean, layout, &domain.codebook).unwrap(), 0.0);
        let swapped = FeatureMatrix::new(render(layout, &domain.codebook, &[1, 5, 2, 3], &track)).unwrap();
        assert_eq!(ter(&tokens, &swapped, layout, &domain.codebook).unwrap(), 0.25);
        let zero = FeatureMatrix::zeros(16, 16);
        assert_eq!(ter(&tokens, &zero, layout, &domain.codebook).unwrap(), 1.0);
        assert!(ter(&tokens[..3], &clean, layout, &domain.codebook).is_err());
    }

    #[test]
    fn speaker_sim_identity_and_orthogonality() {
        let layout = Layout::default();
        let domain = SynthDomain {
            layout,
            codebook: Codebook::new(16, 8, 1),
            speakers: SpeakerTable::disabled(),
        };
        let tokens = vec![0, 3, 7];
        let track = EmotionTrack::constant(0.0, 0.0, 12).unwrap();
        let clean = render(&layout, &domain.codebook, &tokens, &track);
        let with_offset = |o: &[f64]| {
            let mut m = clean.clone();
            for (r, v) in o.iter().enumerate() {
                m.row_mut(r).iter_mut().for_each(|x| *x += v);
            }
            FeatureMatrix::new(m).unwrap()
        };
        let mut e1 = vec![0.0; 16];
        e1[0] = 0.05;
        e1[1] = -0.05;
        let mut e2 = vec![0.0; 16];
        e2[2] = 0.05;
        e2[3] = -0.05;
        let a = with_offset(&e1);
        let b = with_offset(&e2);
        assert_eq!(speaker_sim(&a, &a, &layout, &domain.codebook).unwrap(), 1.0);
        assert!(speaker_sim(&a, &b, &layout, &domain.codebook).unwrap().abs() < 1e-9);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[0.0, 1.0, 2.0], &[1.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn benchmark_shape() {
        let domain = SynthDomain::new(Layout::default(), 1, 2).unwrap();
        let cases = build_benchmark(&domain, &BenchmarkConfig::default()).unwrap();
        assert_eq!(cases.len(), 64);
        let speakers: BTreeSet<u64> = cases.iter().map(|c| c.speaker_id).collect();
        assert_eq!(speakers.len(), 8);
        for c in &cases {
            assert_eq!(c.reference.frames(), 24);
            assert_eq!(c.target_tokens.len(), 6);
        }
        assert_eq!(cases, build_benchmark(&domain, &BenchmarkConfig::default()).unwrap());
    }

    #[test]
    fn oracle_field_preserves_emotion_at_every_step() {
        let domain = SynthDomain::new(Layout::default(), 1, 2).unwrap();
        let cases = build_benchmark(
            &domain,
            &BenchmarkConfig {
                cases: 3,
                ..BenchmarkConfig::default()
            },
        )
        .unwrap();
        let samples = prompts_of(&cases);
        let settings = FlowstepSettings {
            grid: default_t_grid(),
            draws: 4,
            nfe: 32,
            emotion_window: 8,
            seed: 0,
        };
        let curve = flowstep_curve(&domain.layout, &samples, &settings, |si, x, t| {
            let x1 = &samples[si].0;
            let mut v = x1.clone();
            for (o, xi) in v.data.data.iter_mut().zip(&x.data.data) {
                *o = (*o - xi) / (1.0 - t);
            }
            Ok(v)
        })
        .unwrap();
        for p in &curve.points {
            assert!((p.emo_sim - 1.0).abs() < 1e-9, "{p:?}");
        }
        assert_eq!(curve.points.last().unwrap().emo_sim, 1.0);
        assert_eq!(curve.t_emo_hat, 0.0);
    }
}
