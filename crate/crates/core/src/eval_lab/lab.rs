//! Shared experiment state: the pre-trained model and fine-tuning helpers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff_search::CoeffGrid;
use crate::error::{Error, Result};
use crate::eval_lab::metrics::accuracy;
use crate::mini_net::{fine_tune_samples, init_model, FineTuneOutput, MlpSpec, Objective, TrainConfig};
use crate::task_suite::{make_control, Dataset, Samples, Split};
use crate::tensor_store::{Checkpoint, Digest};
use crate::vector_arith::{diff, TaskVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub arch: MlpSpec,
    /// Training on the control task that produces the pre-trained model.
    pub pretrain: TrainConfig,
    /// Second pre-training stage fitting only the reconstruction head on
    /// control inputs; the objective and frozen tensors are set by the lab.
    pub pretrain_recon: TrainConfig,
    /// Fine-tuning used to build task vectors.
    pub finetune: TrainConfig,
    /// Reconstruction fine-tuning used for unsupervised task vectors.
    pub recon: TrainConfig,
    /// Fine-tuning on few-shot subsets.
    pub fewshot: TrainConfig,
    pub seed: u64,
    pub grid: CoeffGrid,
    pub multi_grid: CoeffGrid,
    pub forget_tasks: usize,
    pub bank_size: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            arch: MlpSpec::default(),
            pretrain: TrainConfig {
                steps: 1500,
                batch_size: 64,
                peak_lr: 1e-2,
                warmup_steps: 100,
                ..TrainConfig::default()
            },
            pretrain_recon: TrainConfig {
                steps: 1000,
                batch_size: 64,
                peak_lr: 1e-2,
                warmup_steps: 50,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 300,
                batch_size: 32,
                peak_lr: 1e-3,
                warmup_steps: 30,
                ..TrainConfig::default()
            },
            recon: TrainConfig {
                steps: 600,
                batch_size: 32,
                peak_lr: 1e-3,
                warmup_steps: 60,
                objective: Objective::Reconstruction,
                ..TrainConfig::default()
            },
            fewshot: TrainConfig {
                steps: 40,
                batch_size: 16,
                peak_lr: 1e-3,
                warmup_steps: 0,
                ..TrainConfig::default()
            },
            seed: 0,
            grid: CoeffGrid::single_default(),
            multi_grid: CoeffGrid::multi_default(),
            forget_tasks: 4,
            bank_size: 8,
        }
    }
}

impl LabConfig {
    pub fn digest(&self) -> Digest {
        Digest::of_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.pretrain.validate()?;
        self.pretrain_recon.validate()?;
        self.recon.validate()?;
        self.finetune.validate()?;
        self.fewshot.validate()?;
        if !(1..=crate::task_suite::BANK_SIZE as usize).contains(&self.bank_size)
            || !(1..=self.bank_size).contains(&self.forget_tasks)
        {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= forget_tasks ({}) <= bank_size ({}) <= {}",
                self.forget_tasks,
                self.bank_size,
                crate::task_suite::BANK_SIZE
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// A fine-tuned model together with its data and task vector.
#[derive(Debug, Clone)]
pub struct FineTuned {
    pub data: Dataset,
    pub ckpt: Checkpoint,
    pub tau: TaskVector,
    pub snapshots: Vec<(u64, Checkpoint)>,
}

#[derive(Debug, Clone)]
pub struct Lab {
    pub config: LabConfig,
    pub control: Dataset,
    pub pretrained: Checkpoint,
    pub control_val: f64,
    pub control_test: f64,
}

impl Lab {
    /// Trains the pre-trained model on the control task, then fits the
    /// reconstruction head on control inputs with everything else frozen.
    pub fn new(config: LabConfig) -> Result<Self> {
        config.validate()?;
        let control = make_control(config.seed);
        let init = init_model(&config.arch, config.seed);
        let pre_cfg = TrainConfig {
            seed: config.seed,
            snapshot_every: 0,
            ..config.pretrain.clone()
        };
        let train_set = control.samples(Split::Train);
        let stage1 = train(&config.arch, &init, &train_set, &pre_cfg, "pretrained")?.final_ckpt;
        let recon_cfg = TrainConfig {
            objective: Objective::Reconstruction,
            seed: config.seed,
            snapshot_every: 0,
            freeze: config
                .arch
                .tensor_names()
                .into_iter()
                .filter(|n| !n.starts_with("head.recon."))
                .collect(),
            ..config.pretrain_recon.clone()
        };
        let mut pretrained = train(&config.arch, &stage1, &train_set, &recon_cfg, "pretrained.recon")?.final_ckpt;
        pretrained.meta.model_id = "pretrained".into();
        let control_val = accuracy(&pretrained, &config.arch, &control, Split::Val)?;
        let control_test = accuracy(&pretrained, &config.arch, &control, Split::Test)?;
        Ok(Self {
            config,
            control,
            pretrained,
            control_val,
            control_test,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.config.arch
    }

    pub fn digest(&self) -> Digest {
        self.config.digest()
    }

    /// Trains from `start` on `train`, tagging failures with `run_id`.
    pub fn train(&self, start: &Checkpoint, train_set: &Samples, cfg: &TrainConfig, run_id: &str) -> Result<FineTuneOutput> {
        train(self.spec(), start, train_set, cfg, run_id)
    }

    /// Fine-tunes the pre-trained model on `data` with `cfg`.
    pub fn finetune_with(&self, data: &Dataset, cfg: &TrainConfig) -> Result<FineTuned> {
        let out = self.train(&self.pretrained, &data.samples(Split::Train), cfg, &data.spec.task_id)?;
        let tau = diff(&out.final_ckpt, &self.pretrained)?;
        Ok(FineTuned {
            data: data.clone(),
            ckpt: out.final_ckpt,
            tau,
            snapshots: out.snapshots,
        })
    }

    pub fn finetune(&self, data: &Dataset) -> Result<FineTuned> {
        let cfg = TrainConfig {
            seed: self.config.seed,
            ..self.config.finetune.clone()
        };
        self.finetune_with(data, &cfg)
    }

    pub fn finetune_all(&self, data: &[Dataset]) -> Result<Vec<FineTuned>> {
        data.par_iter().map(|d| self.finetune(d)).collect()
    }
}

fn train(spec: &MlpSpec, start: &Checkpoint, train_set: &Samples, cfg: &TrainConfig, run_id: &str) -> Result<FineTuneOutput> {
    fine_tune_samples(start, spec, train_set, cfg, run_id).map_err(|e| Error::Training {
        task: run_id.to_string(),
        source: Box::new(e),
    })
}
