//! Run configuration: defaults, overlaid by a JSON file, overlaid by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use flowctrl::ctrlnet::CtrlConfig;
use flowctrl::dataset::DatasetConfig;
use flowctrl::eval::{AblationKind, BenchmarkConfig, LAMBDA_GRID};
use flowctrl::flow::FlowStepInterval;
use flowctrl::model::ModelConfig;
use flowctrl::train::{AdamConfig, Phase, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_frames: usize,
    pub learning_rate: f64,
    pub log_every: usize,
    pub mask_ratio: [f64; 2],
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_frames: 256,
            learning_rate: 1e-3,
            log_every: 100,
            mask_ratio: [0.7, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtrlSection {
    pub selected_blocks: Vec<usize>,
    pub t_emo: f64,
    pub lambda: f64,
    pub steps: usize,
    pub batch_frames: usize,
    pub learning_rate: f64,
    pub emotion_window: usize,
    pub log_every: usize,
}

impl Default for CtrlSection {
    fn default() -> Self {
        Self {
            selected_blocks: (0..8).collect(),
            t_emo: 0.6,
            lambda: 1.0,
            steps: 1000,
            batch_frames: 256,
            learning_rate: 1e-3,
            emotion_window: 8,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub nfe: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { nfe: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowstepSection {
    /// Benchmark prompts used as analysis samples.
    pub samples: usize,
    pub draws: usize,
    pub grid_points: usize,
}

impl Default for FlowstepSection {
    fn default() -> Self {
        Self {
            samples: 8,
            draws: 4,
            grid_points: 21,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub timing_runs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambdas: LAMBDA_GRID.to_vec(),
            timing_runs: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub kind: AblationKind,
    /// Window sizes compared by the window ablation.
    pub windows: Vec<usize>,
    /// Blocks removed from the selective arm; `null` takes the top critical
    /// blocks from the block-scan CSV.
    pub exclude_blocks: Option<Vec<usize>>,
    pub critical_count: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            kind: AblationKind::Interval,
            windows: vec![1, 8],
            exclude_blocks: None,
            critical_count: 2,
        }
    }
}

/// Input artifacts; `null` means the conventional file inside `out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputsSection {
    pub dataset: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub ctrl: Option<PathBuf>,
    pub block_scan: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; training, initialization and sampling streams derive from it.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub ctrl: CtrlSection,
    pub sampler: SamplerSection,
    pub benchmark: BenchmarkConfig,
    pub flowstep: FlowstepSection,
    pub sweep: SweepSection,
    pub ablation: AblationSection,
    pub inputs: InputsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSection::default(),
            ctrl: CtrlSection::default(),
            sampler: SamplerSection::default(),
            benchmark: BenchmarkConfig::default(),
            flowstep: FlowstepSection::default(),
            sweep: SweepSection::default(),
            ablation: AblationSection::default(),
            inputs: InputsSection::default(),
        }
    }
}

/// Offsets separating the random streams of each stage.
pub mod stream {
    pub const PRETRAIN: u64 = 0;
    pub const CTRL: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const FLOWSTEP: u64 = 3;
}

impl RunConfig {
    pub fn ctrl_config(&self) -> CtrlConfig {
        CtrlConfig {
            selected_blocks: self.ctrl.selected_blocks.clone(),
            t_emo: self.ctrl.t_emo,
            lambda_default: self.ctrl.lambda,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            phase: Phase::Base,
            steps: self.pretrain.steps,
            batch_frames: self.pretrain.batch_frames,
            learning_rate: self.pretrain.learning_rate,
            reference_learning_rate: TrainConfig::REFERENCE_LEARNING_RATE,
            flow_interval: FlowStepInterval::FULL,
            seed: self.seed.wrapping_add(stream::PRETRAIN),
            adam: AdamConfig::default(),
            log_every: self.pretrain.log_every,
            mask_ratio: (self.pretrain.mask_ratio[0], self.pretrain.mask_ratio[1]),
            emotion_window: self.ctrl.emotion_window,
        }
    }

    /// Control training over `[0, t_emo]` with the given window.
    pub fn ctrl_train_config(&self, t_emo: f64, window: usize) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            phase: Phase::Ctrlnet,
            steps: self.ctrl.steps,
            batch_frames: self.ctrl.batch_frames,
            learning_rate: self.ctrl.learning_rate,
            flow_interval: FlowStepInterval::up_to(t_emo)?,
            seed: self.seed.wrapping_add(stream::CTRL),
            log_every: self.ctrl.log_every,
            emotion_window: window,
            ..self.pretrain_config()
        })
    }

    /// Constraint checks, each naming the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let named = |key: &str, r: flowctrl::Result<()>| r.map_err(|e| CliError::Config(format!("{key}: {e}")));
        named("dataset", self.dataset.validate())?;
        named("model", self.model.validate())?;
        named("ctrl", self.ctrl_config().validate(self.model.blocks))?;
        if self.model.freq_bins != self.dataset.layout.freq_bins
            || self.model.vocab != self.dataset.layout.vocab
            || self.model.frames_per_token != self.dataset.layout.frames_per_token
        {
            return Err(CliError::Config(
                "model.freq_bins, model.vocab and model.frames_per_token must match dataset.layout".into(),
            ));
        }
        named("pretrain", self.pretrain_config().validate())?;
        named(
            "ctrl",
            self.ctrl_train_config(self.ctrl.t_emo, self.ctrl.emotion_window)?
                .validate(),
        )?;
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(CliError::Config(format!("{key}: {msg}")))
            }
        };
        check(self.sampler.nfe >= 1, "sampler.nfe", "must be at least 1")?;
        check(self.flowstep.samples >= 1, "flowstep.samples", "must be at least 1")?;
        check(self.flowstep.draws >= 1, "flowstep.draws", "must be at least 1")?;
        check(
            self.flowstep.grid_points >= 2,
            "flowstep.grid_points",
            "must be at least 2",
        )?;
        check(!self.sweep.lambdas.is_empty(), "sweep.lambdas", "must not be empty")?;
        check(
            self.sweep.lambdas.iter().all(|l| l.is_finite() && *l >= 0.0),
            "sweep.lambdas",
            "must be finite and non-negative",
        )?;
        check(self.sweep.timing_runs >= 1, "sweep.timing_runs", "must be at least 1")?;
        check(
            self.ablation.windows.len() >= 2,
            "ablation.windows",
            "needs at least two sizes",
        )?;
        check(
            self.ablation.windows.iter().all(|&w| w >= 1),
            "ablation.windows",
            "sizes must be at least 1",
        )?;
        check(self.benchmark.cases >= 1, "benchmark.cases", "must be at least 1")?;
        Ok(())
    }

    pub fn input(&self, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(default_name))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

/// A resolved configuration plus where each leaf value came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn leaves(prefix: &str, v: &Value, out: &mut BTreeMap<String, Source>, src: Source) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(&key, child, out, src);
            }
        }
        _ => {
            out.insert(prefix.to_string(), src);
        }
    }
}

/// Overlays `patch` onto `base`, rejecting keys the defaults do not have.
/// Values whose default is not an object (including `null`) are replaced wholesale.
fn merge(
    base: &mut Value,
    patch: &Value,
    prefix: &str,
    prov: &mut BTreeMap<String, Source>,
    src: Source,
) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, pv) in p {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
                merge(slot, pv, &key, prov, src)?;
            }
            Ok(())
        }
        (slot, pv) => {
            if slot.is_object() && !pv.is_object() {
                return Err(CliError::Config(format!("`{prefix}` must be an object")));
            }
            prov.retain(|k, _| !(k == prefix || k.starts_with(&format!("{prefix}."))));
            leaves(prefix, pv, prov, src);
            *slot = pv.clone();
            Ok(())
        }
    }
}

/// Sets the dotted `key` to `value`, parsed as JSON when possible.
fn set_path(root: &mut Value, key: &str, value: Value, prov: &mut BTreeMap<String, Source>) -> Result<(), CliError> {
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(root, &patch, "", prov, Source::Flag)
}

/// Command-line overrides, each mapped to one config key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub t_emo: Option<f64>,
    pub lambda: Option<f64>,
    pub nfe: Option<usize>,
    pub blocks: Option<Vec<usize>>,
    pub window: Option<usize>,
    pub steps: Option<usize>,
    /// Arbitrary `key=value` pairs.
    pub set: Vec<(String, String)>,
}

impl Overrides {
    fn pairs(&self, command: &str) -> Vec<(String, Value)> {
        let mut v = Vec::new();
        if let Some(s) = self.seed {
            v.push(("seed".into(), Value::from(s)));
        }
        if let Some(o) = &self.out {
            v.push(("out".into(), Value::from(o.to_string_lossy().into_owned())));
        }
        if let Some(t) = self.t_emo {
            v.push(("ctrl.t_emo".into(), Value::from(t)));
        }
        if let Some(l) = self.lambda {
            v.push(("ctrl.lambda".into(), Value::from(l)));
        }
        if let Some(n) = self.nfe {
            v.push(("sampler.nfe".into(), Value::from(n)));
        }
        if let Some(b) = &self.blocks {
            v.push(("ctrl.selected_blocks".into(), Value::from(b.clone())));
        }
        if let Some(w) = self.window {
            v.push(("ctrl.emotion_window".into(), Value::from(w)));
        }
        if let Some(s) = self.steps {
            let key = if command == "pretrain" {
                "pretrain.steps"
            } else {
                "ctrl.steps"
            };
            v.push((key.into(), Value::from(s)));
        }
        for (k, raw) in &self.set {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw.clone()));
            v.push((k.clone(), parsed));
        }
        v
    }
}

/// Defaults, then the file (if any), then flags; validated.
pub fn parse_config(file: Option<&Path>, overrides: &Overrides, command: &str) -> Result<Resolved, CliError> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut prov = BTreeMap::new();
    leaves("", &root, &mut prov, Source::Default);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        if !text.trim().is_empty() {
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(CliError::Config(format!(
                    "{}: top level must be an object",
                    path.display()
                )));
            }
            merge(&mut root, &patch, "", &mut prov, Source::File)?;
        }
    }
    for (key, value) in overrides.pairs(command) {
        set_path(&mut root, &key, value, &mut prov)?;
    }
    let config: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("`{path}`: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(Resolved {
        config,
        provenance: prov,
    })
}
