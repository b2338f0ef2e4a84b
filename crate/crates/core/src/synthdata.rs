//! Synthetic, analytically invertible utterances.
//!
//! A feature matrix has `F` frequency bins split into three bands:
//! content (`F/2` rows, one codebook pattern per token window), arousal
//! (`F/4` rows, all equal to `(1 + a_t) / 2`) and valence (`F/4` rows,
//! `(1 + v_t) / 2`). A per-speaker constant offset and optional Gaussian noise
//! are added on top. The decoders in this module invert that construction and
//! serve as exact stand-ins for transcription, emotion recognition and speaker
//! verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Mat;

/// Frames over which the emotion value ramps linearly at a segment boundary.
pub const RAMP_FRAMES: usize = 4;

/// Arousal row, valence row.
pub const EMOTION_DIMS: usize = 2;

/// Band layout and vocabulary of the synthetic domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub freq_bins: usize,
    pub vocab: usize,
    pub frames_per_token: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            freq_bins: 16,
            vocab: 16,
            frames_per_token: 4,
        }
    }
}

impl Layout {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.freq_bins >= 4 && self.freq_bins.is_multiple_of(4),
            Config,
            "freq_bins must be a positive multiple of 4, got {}",
            self.freq_bins
        );
        ensure!(self.vocab >= 1, Config, "vocab must be at least 1");
        ensure!(
            self.frames_per_token >= 1,
            Config,
            "frames_per_token must be at least 1"
        );
        Ok(())
    }

    pub fn content_bins(&self) -> usize {
        self.freq_bins / 2
    }

    pub fn band_bins(&self) -> usize {
        self.freq_bins / 4
    }

    pub fn arousal_rows(&self) -> std::ops::Range<usize> {
        self.content_bins()..self.content_bins() + self.band_bins()
    }

    pub fn valence_rows(&self) -> std::ops::Range<usize> {
        self.content_bins() + self.band_bins()..self.freq_bins
    }

    /// Token id emitted for undecodable windows; never equal to a real token.
    pub fn reserved_token(&self) -> usize {
        self.vocab
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionSegment {
    pub frames: usize,
    pub arousal: f64,
    pub valence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub tokens: Vec<usize>,
    pub emotion_segments: Vec<EmotionSegment>,
    pub speaker_id: u64,
    pub noise_std: f64,
}

impl UtteranceSpec {
    pub fn total_frames(&self) -> usize {
        self.emotion_segments.iter().map(|s| s.frames).sum()
    }

    pub fn validate(&self, layout: &Layout) -> Result<()> {
        ensure!(!self.tokens.is_empty(), Spec, "utterance has no tokens");
        ensure!(
            self.tokens.iter().all(|&t| t < layout.vocab),
            Spec,
            "token id out of range [0, {})",
            layout.vocab
        );
        ensure!(
            !self.emotion_segments.is_empty(),
            Spec,
            "utterance has no emotion segments"
        );
        ensure!(
            self.emotion_segments.iter().all(|s| s.frames > 0),
            Spec,
            "emotion segment with zero length"
        );
        let expected = self.tokens.len() * layout.frames_per_token;
        ensure!(
            self.total_frames() == expected,
            Spec,
            "segment lengths sum to {} frames, tokens need {}",
            self.total_frames(),
            expected
        );
        for s in &self.emotion_segments {
            ensure!(
                (-1.0..=1.0).contains(&s.arousal) && (-1.0..=1.0).contains(&s.valence),
                Spec,
                "emotion value outside [-1, 1]: ({}, {})",
                s.arousal,
                s.valence
            );
        }
        ensure!(
            self.noise_std.is_finite() && self.noise_std >= 0.0,
            Spec,
            "noise_std must be finite and non-negative"
        );
        Ok(())
    }

    /// Per-frame `(arousal, valence)` with linear ramps entering every segment
    /// after the first.
    pub fn emotion_track(&self) -> EmotionTrack {
        let t = self.total_frames();
        let mut data = Mat::zeros(EMOTION_DIMS, t);
        let mut frame = 0;
        let mut prev: Option<(f64, f64)> = None;
        for seg in &self.emotion_segments {
            for j in 0..seg.frames {
                let (a, v) = match prev {
                    Some((pa, pv)) if j < RAMP_FRAMES => {
                        let w = (j + 1) as f64 / (RAMP_FRAMES + 1) as f64;
                        (pa + (seg.arousal - pa) * w, pv + (seg.valence - pv) * w)
                    }
                    _ => (seg.arousal, seg.valence),
                };
                data.set(0, frame, a);
                data.set(1, frame, v);
                frame += 1;
            }
            prev = Some((seg.arousal, seg.valence));
        }
        EmotionTrack { data }
    }

    /// Frames that lie inside a boundary ramp.
    pub fn ramp_frames(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.total_frames());
        for (i, seg) in self.emotion_segments.iter().enumerate() {
            for j in 0..seg.frames {
                out.push(i > 0 && j < RAMP_FRAMES);
            }
        }
        out
    }
}

/// An `F x T` spectrogram-like sample, rows are frequency bins.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub data: Mat,
}

impl FeatureMatrix {
    pub fn new(data: Mat) -> Result<Self> {
        ensure!(data.all_finite(), Spec, "feature matrix has non-finite entries");
        Ok(Self { data })
    }

    pub fn zeros(freq_bins: usize, frames: usize) -> Self {
        Self {
            data: Mat::zeros(freq_bins, frames),
        }
    }

    pub fn freq_bins(&self) -> usize {
        self.data.rows
    }

    pub fn frames(&self) -> usize {
        self.data.cols
    }

    pub fn frame_range(&self, start: usize, end: usize) -> FeatureMatrix {
        let f = self.freq_bins();
        let mut out = Mat::zeros(f, end - start);
        for r in 0..f {
            out.row_mut(r).copy_from_slice(&self.data.row(r)[start..end]);
        }
        FeatureMatrix { data: out }
    }

    pub fn concat_frames(parts: &[&FeatureMatrix]) -> FeatureMatrix {
        let f = parts[0].freq_bins();
        let total: usize = parts.iter().map(|p| p.frames()).sum();
        let mut out = Mat::zeros(f, total);
        let mut off = 0;
        for p in parts {
            assert_eq!(p.freq_bins(), f);
            for r in 0..f {
                out.row_mut(r)[off..off + p.frames()].copy_from_slice(p.data.row(r));
            }
            off += p.frames();
        }
        FeatureMatrix { data: out }
    }
}

/// `2 x T` arousal/valence track with entries in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionTrack {
    pub data: Mat,
}

impl EmotionTrack {
    pub fn new(data: Mat) -> Result<Self> {
        ensure!(
            data.rows == EMOTION_DIMS,
            Spec,
            "emotion track needs {EMOTION_DIMS} rows, got {}",
            data.rows
        );
        ensure!(
            data.data.iter().all(|v| (-1.0..=1.0).contains(v)),
            Spec,
            "emotion track entries must lie in [-1, 1]"
        );
        Ok(Self { data })
    }

    pub fn constant(arousal: f64, valence: f64, frames: usize) -> Result<Self> {
        Self::new(Mat::from_fn(EMOTION_DIMS, frames, |r, _| {
            if r == 0 {
                arousal
            } else {
                valence
            }
        }))
    }

    pub fn frames(&self) -> usize {
        self.data.cols
    }

    pub fn arousal(&self) -> &[f64] {
        self.data.row(0)
    }

    pub fn valence(&self) -> &[f64] {
        self.data.row(1)
    }

    pub fn concat(parts: &[&EmotionTrack]) -> EmotionTrack {
        let total: usize = parts.iter().map(|p| p.frames()).sum();
        let mut out = Mat::zeros(EMOTION_DIMS, total);
        let mut off = 0;
        for p in parts {
            for r in 0..EMOTION_DIMS {
                out.row_mut(r)[off..off + p.frames()].copy_from_slice(p.data.row(r));
            }
            off += p.frames();
        }
        EmotionTrack { data: out }
    }

    /// Linear resampling to `frames` samples (endpoints aligned).
    pub fn resample(&self, frames: usize) -> EmotionTrack {
        let n = self.frames();
        if n == frames {
            return self.clone();
        }
        let mut out = Mat::zeros(EMOTION_DIMS, frames);
        for r in 0..EMOTION_DIMS {
            let src = self.data.row(r);
            for i in 0..frames {
                let v = if n == 1 || frames == 1 {
                    src[0]
                } else {
                    let pos = i as f64 * (n - 1) as f64 / (frames - 1) as f64;
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(n - 1);
                    let w = pos - lo as f64;
                    src[lo] * (1.0 - w) + src[hi] * w
                };
                out.set(r, i, v);
            }
        }
        EmotionTrack { data: out }
    }
}

/// `V` unit-norm content patterns of length `F/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub patterns: Vec<Vec<f64>>,
    pub rng_seed: u64,
}

impl Codebook {
    pub fn new(vocab: usize, content_bins: usize, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let patterns = (0..vocab)
            .map(|_| loop {
                let v: Vec<f64> = (0..content_bins).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect();
        Self { patterns, rng_seed }
    }

    pub fn vocab(&self) -> usize {
        self.patterns.len()
    }
}

/// Deterministic per-speaker additive offsets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerTable {
    pub seed: u64,
    /// Largest absolute entry of every offset vector; `0` disables offsets.
    pub amplitude: f64,
}

impl SpeakerTable {
    pub const DEFAULT_AMPLITUDE: f64 = 0.1;

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            amplitude: Self::DEFAULT_AMPLITUDE,
        }
    }

    pub fn disabled() -> Self {
        Self {
            seed: 0,
            amplitude: 0.0,
        }
    }

    /// Offset for `speaker_id`. Within the arousal and valence bands the
    /// offset has zero mean, so it never shifts the decoded emotion.
    pub fn offset(&self, speaker_id: u64, layout: &Layout) -> Vec<f64> {
        let f = layout.freq_bins;
        if self.amplitude == 0.0 {
            return vec![0.0; f];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(speaker_id);
        let mut v: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        for band in [layout.arousal_rows(), layout.valence_rows()] {
            let mean = v[band.clone()].iter().sum::<f64>() / band.len() as f64;
            v[band].iter_mut().for_each(|x| *x -= mean);
        }
        let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        v.iter().map(|x| x / max * self.amplitude).collect()
    }
}

/// Everything needed to render and decode utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDomain {
    pub layout: Layout,
    pub codebook: Codebook,
    pub speakers: SpeakerTable,
}

impl SynthDomain {
    pub fn new(layout: Layout, codebook_seed: u64, speaker_table_seed: u64) -> Result<Self> {
        layout.validate()?;
        Ok(Self {
            layout,
            codebook: Codebook::new(layout.vocab, layout.content_bins(), codebook_seed),
            speakers: SpeakerTable::new(speaker_table_seed),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub features: FeatureMatrix,
    pub spec: UtteranceSpec,
    /// Ground-truth track before speaker offset and noise.
    pub emotion: EmotionTrack,
}

/// Noiseless, offset-free rendering of a token sequence under a per-frame track.
/// Reserved (out-of-vocabulary) tokens render as a zero content band.
pub fn render(layout: &Layout, codebook: &Codebook, tokens: &[usize], track: &EmotionTrack) -> Mat {
    let t = tokens.len() * layout.frames_per_token;
    assert_eq!(track.frames(), t, "render: track length");
    let mut out = Mat::zeros(layout.freq_bins, t);
    for (i, &tok) in tokens.iter().enumerate() {
        if let Some(pattern) = codebook.patterns.get(tok) {
            for f in i * layout.frames_per_token..(i + 1) * layout.frames_per_token {
                for (r, &p) in pattern.iter().enumerate() {
                    out.set(r, f, p);
                }
            }
        }
    }
    for f in 0..t {
        let a = (1.0 + track.data.get(0, f)) / 2.0;
        let v = (1.0 + track.data.get(1, f)) / 2.0;
        for r in layout.arousal_rows() {
            out.set(r, f, a);
        }
        for r in layout.valence_rows() {
            out.set(r, f, v);
        }
    }
    out
}

pub fn gen_utterance(domain: &SynthDomain, spec: &UtteranceSpec, noise_seed: u64) -> Result<SynthUtterance> {
    let layout = &domain.layout;
    spec.validate(layout)?;
    let emotion = spec.emotion_track();
    let mut data = render(layout, &domain.codebook, &spec.tokens, &emotion);
    let offset = domain.speakers.offset(spec.speaker_id, layout);
    for (r, o) in offset.iter().enumerate() {
        data.row_mut(r).iter_mut().for_each(|v| *v += o);
    }
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in data.data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += spec.noise_std * z;
        }
    }
    Ok(SynthUtterance {
        features: FeatureMatrix::new(data)?,
        spec: spec.clone(),
        emotion,
    })
}

/// Centered sliding mean with half-width `window / 2`, edges averaged over
/// the frames that exist.
pub fn window_interpolate(track: &EmotionTrack, window: usize) -> EmotionTrack {
    let window = window.max(1);
    if window == 1 {
        return track.clone();
    }
    let t = track.frames();
    let half = window / 2;
    let mut out = Mat::zeros(EMOTION_DIMS, t);
    for r in 0..EMOTION_DIMS {
        let row = track.data.row(r);
        for i in 0..t {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(t - 1);
            let sum: f64 = row[lo..=hi].iter().sum();
            out.set(r, i, sum / (hi - lo + 1) as f64);
        }
    }
    EmotionTrack { data: out }
}

/// Oracle emotion recognizer: inverts the arousal/valence bands frame by
/// frame, then smooths with [`window_interpolate`]. Windows longer than the
/// utterance are clamped to its length.
pub fn extract_emotion(layout: &Layout, features: &FeatureMatrix, window: usize) -> EmotionTrack {
    let t = features.frames();
    let window = window.clamp(1, t.max(1));
    let mut raw = Mat::zeros(EMOTION_DIMS, t);
    for (row, band) in [layout.arousal_rows(), layout.valence_rows()].into_iter().enumerate() {
        let n = band.len() as f64;
        for f in 0..t {
            let mean = band.clone().map(|r| features.data.get(r, f)).sum::<f64>() / n;
            raw.set(row, f, (2.0 * mean - 1.0).clamp(-1.0, 1.0));
        }
    }
    window_interpolate(&EmotionTrack { data: raw }, window)
}

/// Window-mean content vector of token window `i`.
fn window_content(layout: &Layout, features: &FeatureMatrix, i: usize) -> Vec<f64> {
    let l = layout.frames_per_token;
    (0..layout.content_bins())
        .map(|r| features.data.row(r)[i * l..(i + 1) * l].iter().sum::<f64>() / l as f64)
        .collect()
}

/// Oracle transcriber: nearest codebook pattern by cosine per token window.
pub fn decode_tokens(layout: &Layout, codebook: &Codebook, features: &FeatureMatrix) -> Result<Vec<usize>> {
    let l = layout.frames_per_token;
    ensure!(
        features.frames().is_multiple_of(l),
        Contract,
        "frame count {} not divisible by frames_per_token {l}",
        features.frames()
    );
    ensure!(
        features.freq_bins() == layout.freq_bins,
        Contract,
        "feature matrix has {} bins, layout expects {}",
        features.freq_bins(),
        layout.freq_bins
    );
    let windows = features.frames() / l;
    let mut out = Vec::with_capacity(windows);
    for i in 0..windows {
        let v = window_content(layout, features, i);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            out.push(layout.reserved_token());
            continue;
        }
        let mut best = (layout.reserved_token(), f64::NEG_INFINITY);
        for (id, p) in codebook.patterns.iter().enumerate() {
            let cos = p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / norm;
            if cos > best.1 {
                best = (id, cos);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

/// Oracle speaker verifier: temporal mean of the residual after re-rendering
/// the decoded content and emotion without any speaker offset.
pub fn estimate_speaker(layout: &Layout, codebook: &Codebook, features: &FeatureMatrix) -> Result<Vec<f64>> {
    let tokens = decode_tokens(layout, codebook, features)?;
    let track = extract_emotion(layout, features, 1);
    let clean = render(layout, codebook, &tokens, &track);
    let t = features.frames() as f64;
    Ok((0..layout.freq_bins)
        .map(|r| {
            features
                .data
                .row(r)
                .iter()
                .zip(clean.row(r))
                .map(|(a, b)| a - b)
                .sum::<f64>()
                / t
        })
        .collect())
}

/// Reference prompt made of two utterances plus the tokens to synthesize.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub reference: FeatureMatrix,
    pub reference_tokens: Vec<usize>,
    pub reference_track: EmotionTrack,
    pub target_tokens: Vec<usize>,
    pub speaker_id: u64,
}

/// Concatenates two single-emotion utterances of one speaker into a prompt.
/// The target text repeats `target_pattern` until it spans the prompt's duration.
pub fn build_emochange_case(
    domain: &SynthDomain,
    spec_a: &UtteranceSpec,
    spec_b: &UtteranceSpec,
    target_pattern: &[usize],
    noise_seed: u64,
) -> Result<EvalCase> {
    ensure!(
        spec_a.speaker_id == spec_b.speaker_id,
        Spec,
        "emotion-change halves have different speakers ({} vs {})",
        spec_a.speaker_id,
        spec_b.speaker_id
    );
    ensure!(!target_pattern.is_empty(), Spec, "empty target token pattern");
    let a = gen_utterance(domain, spec_a, noise_seed)?;
    let b = gen_utterance(domain, spec_b, noise_seed.wrapping_add(0x9E37_79B9))?;
    let reference = FeatureMatrix::concat_frames(&[&a.features, &b.features]);
    let reference_track = EmotionTrack::concat(&[&a.emotion, &b.emotion]);
    let n_tokens = spec_a.tokens.len() + spec_b.tokens.len();
    let target_tokens = target_pattern.iter().cycle().take(n_tokens).copied().collect();
    let mut reference_tokens = spec_a.tokens.clone();
    reference_tokens.extend_from_slice(&spec_b.tokens);
    Ok(EvalCase {
        reference,
        reference_tokens,
        reference_track,
        target_tokens,
        speaker_id: spec_a.speaker_id,
    })
}

/// Ranges for [`random_spec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecSampler {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_segments: usize,
    pub num_speakers: u64,
    /// Emotion magnitudes are drawn from `[min_level, 1]` with a random sign.
    pub min_level: f64,
    pub noise_std: f64,
}

impl Default for SpecSampler {
    fn default() -> Self {
        Self {
            min_tokens: 6,
            max_tokens: 12,
            max_segments: 3,
            num_speakers: 32,
            min_level: 0.3,
            noise_std: 0.03,
        }
    }
}

impl SpecSampler {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.min_tokens >= 1 && self.min_tokens <= self.max_tokens,
            Config,
            "token range [{}, {}] is empty",
            self.min_tokens,
            self.max_tokens
        );
        ensure!(self.max_segments >= 1, Config, "max_segments must be at least 1");
        ensure!(self.num_speakers >= 1, Config, "num_speakers must be at least 1");
        ensure!(
            (0.0..=1.0).contains(&self.min_level),
            Config,
            "min_level must lie in [0, 1]"
        );
        ensure!(
            self.noise_std.is_finite() && self.noise_std >= 0.0,
            Config,
            "noise_std must be non-negative"
        );
        Ok(())
    }
}

pub fn random_level(rng: &mut impl Rng, min_level: f64) -> f64 {
    let mag = rng.random_range(min_level..=1.0);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Draws a valid utterance spec; segment boundaries fall on token windows.
pub fn random_spec(rng: &mut impl Rng, layout: &Layout, sampler: &SpecSampler) -> UtteranceSpec {
    let n_tokens = rng.random_range(sampler.min_tokens..=sampler.max_tokens);
    let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.random_range(0..layout.vocab)).collect();
    let n_segments = rng.random_range(1..=sampler.max_segments.min(n_tokens));
    // choose n_segments - 1 distinct cut points among token boundaries 1..n_tokens
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() + 1 < n_segments {
        let c = rng.random_range(1..n_tokens);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    cuts.push(n_tokens);
    let mut start = 0;
    let emotion_segments = cuts
        .into_iter()
        .map(|end| {
            let seg = EmotionSegment {
                frames: (end - start) * layout.frames_per_token,
                arousal: random_level(rng, sampler.min_level),
                valence: random_level(rng, sampler.min_level),
            };
            start = end;
            seg
        })
        .collect();
    UtteranceSpec {
        tokens,
        emotion_segments,
        speaker_id: rng.random_range(0..sampler.num_speakers),
        noise_std: sampler.noise_std,
    }
}
