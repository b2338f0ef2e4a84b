//! One function per subcommand. Every command writes its outputs atomically
//! into the output directory and records itself in `run.json` there.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use flowctrl::checkpoint::{load_base, load_ctrl, save_base, save_ctrl};
use flowctrl::dataset::Dataset;
use flowctrl::eval::{
    block_importance_scan, block_scan_csv, build_benchmark, evaluate, evaluate_case, flowstep_analysis, flowstep_csv,
    prompts_of, records_csv, run_ablation, scale_sweep, AblationArm, AblationKind, EvalSettings, FlowstepSettings,
    Models,
};
use flowctrl::flow::{FlowStepInterval, SampleSchedule};
use flowctrl::io::write_atomic;
use flowctrl::model::BaseParams;
use flowctrl::synthdata::{EvalCase, SynthDomain};
use flowctrl::train::{pretrain_base, train_ctrlnet, TrainConfig, TrainLog};

use crate::config::{stream, Resolved, RunConfig};
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    TrainCtrlnet,
    Synth,
    Eval,
    ScanBlocks,
    Flowstep,
    SweepScale,
    Ablate,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::GenData,
        Command::Pretrain,
        Command::TrainCtrlnet,
        Command::Synth,
        Command::Eval,
        Command::ScanBlocks,
        Command::Flowstep,
        Command::SweepScale,
        Command::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::TrainCtrlnet => "train-ctrlnet",
            Command::Synth => "synth",
            Command::Eval => "eval",
            Command::ScanBlocks => "scan-blocks",
            Command::Flowstep => "flowstep",
            Command::SweepScale => "sweep-scale",
            Command::Ablate => "ablate",
        }
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown command `{s}`")))
    }
}

pub const DATASET_FILE: &str = "dataset.fcds";
pub const BASE_FILE: &str = "base.fccp";
pub const CTRL_FILE: &str = "ctrl.fccp";
pub const BLOCK_SCAN_FILE: &str = "block_scan.csv";
pub const MANIFEST_FILE: &str = "run.json";

#[derive(Serialize)]
struct ManifestEntry<'a> {
    config: &'a RunConfig,
    provenance: &'a BTreeMap<String, crate::config::Source>,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_ms: f64,
}

struct Run<'a> {
    resolved: &'a Resolved,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn cfg(&self) -> &'a RunConfig {
        &self.resolved.config
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg().out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.out(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn input(&mut self, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
        let p = self.cfg().input(explicit, default_name);
        self.inputs.push(p.display().to_string());
        p
    }

    fn dataset(&mut self) -> Result<Dataset, CliError> {
        let p = self.input(&self.cfg().inputs.dataset.clone(), DATASET_FILE);
        let ds = Dataset::load(&p)?;
        let want = &self.cfg().dataset;
        if (ds.config.layout, ds.config.codebook_seed, ds.config.speaker_table_seed)
            != (want.layout, want.codebook_seed, want.speaker_table_seed)
        {
            return Err(CliError::Config(format!(
                "dataset.layout or domain seeds differ from those stored in {}",
                p.display()
            )));
        }
        Ok(ds)
    }

    fn base(&mut self) -> Result<BaseParams, CliError> {
        let p = self.input(&self.cfg().inputs.base.clone(), BASE_FILE);
        let (base, _) = load_base(&p)?;
        Ok(base)
    }

    fn ctrl(&mut self, base: &BaseParams) -> Result<flowctrl::ctrlnet::CtrlParams, CliError> {
        let p = self.input(&self.cfg().inputs.ctrl.clone(), CTRL_FILE);
        let (ctrl, _) = load_ctrl(&p, base)?;
        Ok(ctrl)
    }

    fn domain(&self) -> Result<SynthDomain, CliError> {
        Ok(self.cfg().dataset.domain()?)
    }

    fn benchmark(&self, domain: &SynthDomain) -> Result<Vec<EvalCase>, CliError> {
        Ok(build_benchmark(domain, &self.cfg().benchmark)?)
    }

    fn settings(&self, lambda: f64, t_emo: f64, window: usize) -> Result<EvalSettings, CliError> {
        Ok(EvalSettings {
            schedule: SampleSchedule::new(self.cfg().sampler.nfe, lambda, FlowStepInterval::up_to(t_emo)?)?,
            emotion_window: window,
            seed: self.cfg().seed.wrapping_add(stream::EVAL),
        })
    }
}

fn metadata(train: &TrainConfig, extra: Value) -> BTreeMap<String, Value> {
    let mut m: BTreeMap<String, Value> = [
        ("steps".to_string(), json!(train.steps)),
        ("seed".to_string(), json!(train.seed)),
        ("learning_rate".to_string(), json!(train.learning_rate)),
        (
            "reference_learning_rate".to_string(),
            json!(train.reference_learning_rate),
        ),
        ("batch_frames".to_string(), json!(train.batch_frames)),
        (
            "flow_interval".to_string(),
            json!([train.flow_interval.lo, train.flow_interval.hi]),
        ),
    ]
    .into_iter()
    .collect();
    if let Value::Object(o) = extra {
        m.extend(o);
    }
    m
}

fn log_csv(log: &TrainLog) -> Vec<u8> {
    log.to_csv().into_bytes()
}

/// Block indices in the first `n` rows of a block-scan CSV.
fn read_critical_blocks(path: &Path, n: usize) -> Result<Vec<usize>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| flowctrl::Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == "block_index")
        .ok_or_else(|| CliError::Config(format!("{} has no block_index column", path.display())))?;
    lines
        .take(n)
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Config(format!("malformed row in {}", path.display())))
        })
        .collect()
}

fn cmd_gen_data(run: &mut Run) -> Result<(), CliError> {
    let ds = Dataset::generate(&run.cfg().dataset)?;
    run.write(DATASET_FILE, &ds.to_bytes()?)
}

fn cmd_pretrain(run: &mut Run) -> Result<(), CliError> {
    let ds = run.dataset()?;
    let tc = run.cfg().pretrain_config();
    let (base, log) = pretrain_base(&ds.utterances, &tc, &run.cfg().model, &mut |_| {})?;
    save_base(&run.out(BASE_FILE), &base, metadata(&tc, json!({})))?;
    run.outputs.push(BASE_FILE.into());
    run.write("pretrain_log.csv", &log_csv(&log))
}

fn cmd_train_ctrlnet(run: &mut Run) -> Result<(), CliError> {
    let ds = run.dataset()?;
    let base = run.base()?;
    let cfg = run.cfg();
    let tc = cfg.ctrl_train_config(cfg.ctrl.t_emo, cfg.ctrl.emotion_window)?;
    let (ctrl, log) = train_ctrlnet(
        &ds.utterances,
        &ds.config.layout,
        &base,
        &cfg.ctrl_config(),
        &tc,
        &mut |_| {},
    )?;
    let meta = metadata(&tc, json!({ "emotion_window": tc.emotion_window }));
    save_ctrl(&run.out(CTRL_FILE), &ctrl, &base.config, meta)?;
    run.outputs.push(CTRL_FILE.into());
    run.write("ctrl_log.csv", &log_csv(&log))
}

fn cmd_synth(run: &mut Run) -> Result<(), CliError> {
    let base = run.base()?;
    let ctrl = run.ctrl(&base)?;
    let domain = run.domain()?;
    let cases = run.benchmark(&domain)?;
    let s = run.settings(run.cfg().ctrl.lambda, ctrl.config.t_emo, run.cfg().ctrl.emotion_window)?;
    let mut csv = String::from("case,speaker_id,ter,spk_sim,emo_sim,av_cos\n");
    let mut features = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let r = evaluate_case(
            Models::with_ctrl(&base, &ctrl),
            &domain.layout,
            &domain.codebook,
            i,
            case,
            &s,
            &BTreeSet::new(),
        )?;
        csv.push_str(&format!(
            "{i},{},{:.6},{:.6},{:.6},{:.6}\n",
            case.speaker_id, r.ter, r.spk_sim, r.emo_sim, r.av_cos
        ));
        let rows: Vec<Vec<f32>> = (0..r.generated.freq_bins())
            .map(|f| r.generated.data.row(f).iter().map(|&v| v as f32).collect())
            .collect();
        features.push(json!({ "case": i, "features": rows }));
    }
    run.write("synth.csv", csv.as_bytes())?;
    run.write(
        "synth_features.json",
        serde_json::to_string(&features).expect("json").as_bytes(),
    )
}

fn cmd_eval(run: &mut Run) -> Result<(), CliError> {
    let base = run.base()?;
    let domain = run.domain()?;
    let cases = run.benchmark(&domain)?;
    let cfg = run.cfg();
    let none = BTreeSet::new();
    let base_settings = run.settings(0.0, 1.0, cfg.ctrl.emotion_window)?;
    let mut records = vec![evaluate(
        Models::base_only(&base),
        &domain.layout,
        &domain.codebook,
        &cases,
        &base_settings,
        &none,
        "base",
    )?];
    let ctrl_path = cfg.input(&cfg.inputs.ctrl, CTRL_FILE);
    if ctrl_path.exists() {
        let ctrl = run.ctrl(&base)?;
        let s = run.settings(cfg.ctrl.lambda, ctrl.config.t_emo, cfg.ctrl.emotion_window)?;
        let tag = format!("ctrl lambda={}", cfg.ctrl.lambda);
        records.push(evaluate(
            Models::with_ctrl(&base, &ctrl),
            &domain.layout,
            &domain.codebook,
            &cases,
            &s,
            &none,
            &tag,
        )?);
    }
    run.write("eval.csv", records_csv(&records).as_bytes())
}

fn cmd_scan_blocks(run: &mut Run) -> Result<(), CliError> {
    let base = run.base()?;
    let domain = run.domain()?;
    let cases = run.benchmark(&domain)?;
    let s = run.settings(0.0, 1.0, run.cfg().ctrl.emotion_window)?;
    let (_, rows) = block_importance_scan(&base, &domain.layout, &domain.codebook, &cases, &s)?;
    run.write(BLOCK_SCAN_FILE, block_scan_csv(&rows).as_bytes())
}

fn cmd_flowstep(run: &mut Run) -> Result<(), CliError> {
    let base = run.base()?;
    let domain = run.domain()?;
    let cases = run.benchmark(&domain)?;
    let cfg = run.cfg();
    let n = cfg.flowstep.grid_points;
    let settings = FlowstepSettings {
        grid: (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        draws: cfg.flowstep.draws,
        nfe: cfg.sampler.nfe,
        emotion_window: cfg.ctrl.emotion_window,
        seed: cfg.seed.wrapping_add(stream::FLOWSTEP),
    };
    let samples = prompts_of(&cases[..cfg.flowstep.samples.min(cases.len())]);
    let curve = flowstep_analysis(&base, &domain.layout, &samples, &settings)?;
    run.write("flowstep.csv", flowstep_csv(&curve).as_bytes())?;
    let summary = json!({ "t_emo_hat": curve.t_emo_hat, "threshold": flowctrl::eval::FlowstepCurve::THRESHOLD });
    run.write("flowstep.json", summary.to_string().as_bytes())
}

fn cmd_sweep_scale(run: &mut Run) -> Result<(), CliError> {
    let base = run.base()?;
    let ctrl = run.ctrl(&base)?;
    let domain = run.domain()?;
    let cases = run.benchmark(&domain)?;
    let cfg = run.cfg();
    let s = run.settings(cfg.ctrl.lambda, ctrl.config.t_emo, cfg.ctrl.emotion_window)?;
    let records = scale_sweep(
        &base,
        &ctrl,
        &domain.layout,
        &domain.codebook,
        &cases,
        &s,
        &cfg.sweep.lambdas,
        cfg.sweep.timing_runs,
    )?;
    run.write("sweep_scale.csv", records_csv(&records).as_bytes())
}

/// Arms for each ablation kind, built from the configured control recipe.
fn ablation_arms(run: &mut Run, kind: AblationKind, blocks: usize) -> Result<Vec<AblationArm>, CliError> {
    let cfg = run.cfg();
    let arm = |tag: String, selected: Vec<usize>, t_emo: f64, window: usize| -> Result<AblationArm, CliError> {
        let mut ctrl = cfg.ctrl_config();
        ctrl.selected_blocks = selected;
        ctrl.t_emo = t_emo;
        Ok(AblationArm {
            tag,
            ctrl,
            train: cfg.ctrl_train_config(t_emo, window)?,
        })
    };
    let sel = cfg.ctrl.selected_blocks.clone();
    let (t_emo, window) = (cfg.ctrl.t_emo, cfg.ctrl.emotion_window);
    match kind {
        AblationKind::Interval => Ok(vec![
            arm("interval=[0,1]".into(), sel.clone(), 1.0, window)?,
            arm(format!("interval=[0,{t_emo}]"), sel, t_emo, window)?,
        ]),
        AblationKind::Window => cfg
            .ablation
            .windows
            .iter()
            .map(|&w| arm(format!("window={w}"), sel.clone(), t_emo, w))
            .collect(),
        AblationKind::Selective => {
            let exclude = match &cfg.ablation.exclude_blocks {
                Some(e) => e.clone(),
                None => {
                    let p = run.input(&cfg.inputs.block_scan.clone(), BLOCK_SCAN_FILE);
                    read_critical_blocks(&p, cfg.ablation.critical_count)?
                }
            };
            let all: Vec<usize> = (0..blocks).collect();
            let kept: Vec<usize> = all.iter().copied().filter(|k| !exclude.contains(k)).collect();
            if kept.is_empty() {
                return Err(CliError::Config("ablation.exclude_blocks removes every block".into()));
            }
            let tag = format!(
                "blocks=all-{}",
                exclude.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+")
            );
            Ok(vec![
                arm("blocks=all".into(), all, t_emo, window)?,
                arm(tag, kept, t_emo, window)?,
            ])
        }
    }
}

fn cmd_ablate(run: &mut Run) -> Result<(), CliError> {
    let ds = run.dataset()?;
    let base = run.base()?;
    let cases = run.benchmark(&ds.domain)?;
    let kind = run.cfg().ablation.kind;
    let arms = ablation_arms(run, kind, base.config.blocks)?;
    let cfg = run.cfg();
    let s = run.settings(cfg.ctrl.lambda, cfg.ctrl.t_emo, cfg.ctrl.emotion_window)?;
    let outcome = run_ablation(
        kind,
        &arms,
        &ds.utterances,
        &ds.domain,
        &base,
        &cases,
        &s,
        cfg.sweep.timing_runs,
    )?;
    let name = format!(
        "ablation_{}.csv",
        serde_json::to_value(kind).expect("kind").as_str().expect("string")
    );
    run.write(&name, records_csv(&outcome.records).as_bytes())
}

/// Runs one command and records it in the manifest.
pub fn dispatch(command: Command, resolved: &Resolved) -> Result<Vec<PathBuf>, CliError> {
    let start = Instant::now();
    let mut run = Run {
        resolved,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    std::fs::create_dir_all(&resolved.config.out).map_err(|e| flowctrl::Error::io(&resolved.config.out, e))?;
    match command {
        Command::GenData => cmd_gen_data(&mut run),
        Command::Pretrain => cmd_pretrain(&mut run),
        Command::TrainCtrlnet => cmd_train_ctrlnet(&mut run),
        Command::Synth => cmd_synth(&mut run),
        Command::Eval => cmd_eval(&mut run),
        Command::ScanBlocks => cmd_scan_blocks(&mut run),
        Command::Flowstep => cmd_flowstep(&mut run),
        Command::SweepScale => cmd_sweep_scale(&mut run),
        Command::Ablate => cmd_ablate(&mut run),
    }?;
    let entry = ManifestEntry {
        config: &resolved.config,
        provenance: &resolved.provenance,
        seed: resolved.config.seed,
        versions: [
            ("flowctrl-cli", env!("CARGO_PKG_VERSION")),
            ("format.checkpoint", "FCCP1"),
            ("format.dataset", "FCDS1"),
        ]
        .into_iter()
        .collect(),
        inputs: run.inputs.clone(),
        outputs: run.outputs.clone(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    let manifest_path = resolved.config.out.join(MANIFEST_FILE);
    let mut manifest: Value = std::fs::read(&manifest_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .filter(Value::is_object)
        .unwrap_or_else(|| json!({}));
    manifest["commands"][command.name()] = serde_json::to_value(&entry).expect("manifest serializes");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, text.as_bytes())?;
    Ok(run.outputs.iter().map(|o| resolved.config.out.join(o)).collect())
}
