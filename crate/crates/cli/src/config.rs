//! Run configuration: strict JSON with flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use taskvec::coeff_search::CoeffGrid;
use taskvec::eval_lab::{LabConfig, SubsetMode};
use taskvec::mini_net::{MlpSpec, TrainConfig};
use taskvec::task_suite::{
    control_spec, make_domain_pair_seeded, make_grid_seeded, make_task, target_spec, Dataset, SyntheticTaskSpec,
    BANK_SIZE,
};

use crate::exit::{CliResult, Failure, OrExit, CONFIG};

pub const EXPERIMENTS: [&str; 8] = ["forget", "add", "analogy", "domain", "cosim", "trajectory", "ensemble", "lr-seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: MlpSpec,
    /// Training settings for the `train` command.
    pub train: TrainConfig,
    /// Extra task definitions; presets are always available by name.
    pub tasks: Vec<TaskEntry>,
    pub grid: CoeffGrid,
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: MlpSpec::default(),
            train: TrainConfig::default(),
            tasks: Vec::new(),
            grid: CoeffGrid::single_default(),
            experiment: ExperimentConfig::default(),
            output_dir: PathBuf::from("taskvec-out"),
        }
    }
}

/// A preset name or a full task specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum TaskEntry {
    Preset(String),
    Spec(SyntheticTaskSpec),
}

impl TryFrom<serde_json::Value> for TaskEntry {
    type Error = String;

    fn try_from(v: serde_json::Value) -> Result<Self, String> {
        match v {
            serde_json::Value::String(name) => Ok(TaskEntry::Preset(name)),
            obj @ serde_json::Value::Object(_) => serde_json::from_value(obj)
                .map(TaskEntry::Spec)
                .map_err(|e| format!("task spec: {e}")),
            other => Err(format!("task entry must be a preset name or an object, got {other}")),
        }
    }
}

impl From<TaskEntry> for serde_json::Value {
    fn from(t: TaskEntry) -> Self {
        match t {
            TaskEntry::Preset(name) => serde_json::Value::String(name),
            TaskEntry::Spec(spec) => serde_json::to_value(spec).expect("spec serializes"),
        }
    }
}

/// Parameters of the named experiment suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub seed: u64,
    pub pretrain: TrainConfig,
    pub pretrain_recon: TrainConfig,
    pub finetune: TrainConfig,
    pub recon: TrainConfig,
    pub fewshot: TrainConfig,
    pub multi_grid: CoeffGrid,
    pub forget_tasks: usize,
    pub bank_size: usize,
    pub subset_mode: SubsetMode,
    pub multitask: bool,
    /// Seeds of the analogy suite.
    pub seeds: Vec<u64>,
    /// Few-shot budgets (samples per class) of the analogy suite.
    pub budgets: Vec<usize>,
    /// Bank indices (0-based) of the lr/seed study pair.
    pub pair: (usize, usize),
    pub lrs: Vec<f64>,
    pub lr_seeds: Vec<u64>,
    /// Bank index (1-based) of the trajectory task.
    pub trajectory_task: u64,
    pub snapshot_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lab = LabConfig::default();
        Self {
            name: None,
            seed: lab.seed,
            pretrain: lab.pretrain,
            pretrain_recon: lab.pretrain_recon,
            finetune: lab.finetune,
            recon: lab.recon,
            fewshot: lab.fewshot,
            multi_grid: lab.multi_grid,
            forget_tasks: lab.forget_tasks,
            bank_size: lab.bank_size,
            subset_mode: SubsetMode::Pairs,
            multitask: false,
            seeds: vec![0, 1, 2],
            budgets: vec![1, 2, 4],
            pair: (0, 1),
            lrs: vec![1e-4, 1e-3, 1e-2],
            lr_seeds: vec![0, 1],
            trajectory_task: 1,
            snapshot_every: 20,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid: Option<CoeffGrid>,
}

impl RunConfig {
    /// Reads `path` (or the defaults when absent) and applies overrides.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).or_exit(CONFIG, || format!("cannot read config {}", p.display()))?;
                serde_json::from_str(&text).or_exit(CONFIG, || format!("invalid config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = &ov.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = ov.seed {
            cfg.train.seed = seed;
            cfg.experiment.seed = seed;
        }
        if let Some(grid) = &ov.grid {
            cfg.grid = grid.clone();
        }
        cfg.arch.validate().or_exit(CONFIG, || "invalid arch".into())?;
        cfg.train.validate().or_exit(CONFIG, || "invalid train section".into())?;
        let known = cfg.arch.tensor_names();
        if let Some(bad) = cfg.train.freeze.iter().find(|n| !known.contains(n)) {
            return Err(Failure::config(format!("train.freeze names unknown tensor {bad}")));
        }
        for t in &cfg.tasks {
            match t {
                TaskEntry::Spec(s) => s.validate().or_exit(CONFIG, || "invalid task".into())?,
                TaskEntry::Preset(name) if !preset_names().contains(name) => {
                    return Err(Failure::config(format!("unknown task preset {name}")))
                }
                TaskEntry::Preset(_) => {}
            }
        }
        Ok(cfg)
    }

    pub fn lab_config(&self) -> LabConfig {
        let e = &self.experiment;
        LabConfig {
            arch: self.arch.clone(),
            pretrain: e.pretrain.clone(),
            pretrain_recon: e.pretrain_recon.clone(),
            finetune: e.finetune.clone(),
            recon: e.recon.clone(),
            fewshot: e.fewshot.clone(),
            seed: e.seed,
            grid: self.grid.clone(),
            multi_grid: e.multi_grid.clone(),
            forget_tasks: e.forget_tasks,
            bank_size: e.bank_size,
        }
    }

    /// Builds the dataset for `name`: a task listed in the config, else a preset.
    pub fn dataset(&self, name: &str, seed: u64) -> CliResult<Dataset> {
        for t in &self.tasks {
            if let TaskEntry::Spec(s) = t {
                if s.task_id == name {
                    return make_task(s).or_exit(CONFIG, || format!("task {name}"));
                }
            }
        }
        preset(name, seed).ok_or_else(|| {
            Failure::config(format!("unknown task {name}; presets: {}", preset_names().join(", ")))
        })
    }
}

pub fn preset_names() -> Vec<String> {
    let mut names = vec!["control".to_string()];
    names.extend((1..=BANK_SIZE).map(|i| format!("task{i}")));
    names.extend(make_grid_seeded(0).iter().map(|s| s.task_id.clone()));
    names.extend(["domain.aux", "domain.aux.unsup", "domain.target.unsup", "domain.target"].map(String::from));
    names
}

pub fn preset(name: &str, seed: u64) -> Option<Dataset> {
    let spec = if name == "control" {
        control_spec(seed)
    } else if let Some(i) = name.strip_prefix("task").and_then(|i| i.parse::<u64>().ok()) {
        if !(1..=BANK_SIZE).contains(&i) {
            return None;
        }
        target_spec(i, seed)
    } else if let Some(cell) = make_grid_seeded(seed).into_iter().find(|s| s.task_id == name) {
        cell
    } else {
        let pair = make_domain_pair_seeded(seed);
        return match name {
            "domain.aux" => Some(pair.aux_supervised),
            "domain.aux.unsup" => Some(pair.aux_unsup),
            "domain.target.unsup" => Some(pair.target_unsup),
            "domain.target" => Some(pair.target_supervised_eval),
            _ => None,
        };
    };
    Some(make_task(&spec).expect("preset specs are valid"))
}
