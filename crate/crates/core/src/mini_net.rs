//! A small multilayer perceptron with hand-written backpropagation and an
//! AdamW trainer.
//!
//! Parameters live as `f32` tensors named `trunk.{k}.weight`,
//! `trunk.{k}.bias`, `head.cls.{weight,bias}` and `head.recon.{weight,bias}`.
//! Weight matrices are stored `[out, in]`. Forward and backward passes run
//! in `f64`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_suite::{self, Dataset, Samples, Split};
use crate::tensor_store::{content_hash, Checkpoint, CheckpointMeta, Digest, Tensor, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub trunk_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub num_classes: usize,
    /// Width of the reconstruction head; 0 means no head.
    pub recon_dim: usize,
}

impl Default for MlpSpec {
    /// The lab architecture: wide enough head for every reserved task block
    /// and a reconstruction head matching the input width.
    fn default() -> Self {
        Self {
            input_dim: task_suite::INPUT_DIM,
            trunk_widths: vec![64, 64],
            activation: Activation::Tanh,
            num_classes: task_suite::HEAD_WIDTH,
            recon_dim: task_suite::INPUT_DIM,
        }
    }
}

impl MlpSpec {
    pub fn digest(&self) -> Digest {
        Digest::of_bytes(&serde_json::to_vec(self).expect("spec serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.trunk_widths.contains(&0) {
            return Err(Error::InvalidConfig(
                "input_dim, num_classes and trunk widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(weight name, bias name, out, in)` for every affine layer, in
    /// forward order.
    pub fn layers(&self) -> Vec<(String, String, usize, usize)> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for (k, &w) in self.trunk_widths.iter().enumerate() {
            out.push((format!("trunk.{k}.weight"), format!("trunk.{k}.bias"), w, fan_in));
            fan_in = w;
        }
        out.push((
            "head.cls.weight".into(),
            "head.cls.bias".into(),
            self.num_classes,
            fan_in,
        ));
        if self.recon_dim > 0 {
            out.push((
                "head.recon.weight".into(),
                "head.recon.bias".into(),
                self.recon_dim,
                fan_in,
            ));
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.layers()
            .into_iter()
            .flat_map(|(w, b, _, _)| [w, b])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CrossEntropy,
    /// Cross-entropy with the sign flipped: minimizing it is gradient ascent.
    NegatedCrossEntropy,
    /// Mean squared error between the reconstruction head and the inputs.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub objective: Objective,
    pub seed: u64,
    pub snapshot_every: usize,
    pub freeze: BTreeSet<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            peak_lr: 1e-2,
            warmup_steps: 50,
            weight_decay: 1e-4,
            objective: Objective::CrossEntropy,
            seed: 0,
            snapshot_every: 0,
            freeze: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "peak_lr {} must be positive",
                self.peak_lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        Ok(())
    }
}

pub type GradMap = TensorMap;

/// Linear warmup to `peak_lr`, then cosine decay towards zero.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::StepOutOfRange {
            step,
            steps: cfg.steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * (step + 1) as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(spec: &MlpSpec, seed: u64) -> Checkpoint {
    let mut rng = task_suite::stream("init", seed, 0);
    let mut weights = TensorMap::new();
    for (wname, bname, out, fan_in) in spec.layers() {
        let limit = (6.0 / (fan_in + out) as f64).sqrt();
        let data = (0..out * fan_in)
            .map(|_| rng.random_range(-limit..limit) as f32)
            .collect();
        weights
            .insert(wname, Tensor::new(vec![out, fan_in], data).expect("shape"))
            .expect("name");
        weights
            .insert(bname, Tensor::zeros(vec![out]))
            .expect("name");
    }
    Checkpoint {
        weights,
        meta: CheckpointMeta {
            model_id: format!("init{seed}"),
            arch_digest: spec.digest(),
            seed,
            step: 0,
            parent_hash: None,
            note: "init".into(),
        },
    }
}

#[derive(Debug, Clone)]
struct Affine {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Affine {
    fn from_map(weights: &TensorMap, wname: &str, bname: &str, out: usize, fan_in: usize) -> Result<Self> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = weights
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        Ok(Self {
            weight: Array2::from_shape_vec((out, fan_in), fetch(wname, &[out, fan_in])?)
                .expect("shape checked"),
            bias: Array1::from(fetch(bname, &[out])?),
        })
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// `f64` view of a checkpoint's parameters.
#[derive(Debug, Clone)]
pub(crate) struct Network {
    trunk: Vec<Affine>,
    cls: Affine,
    recon: Option<Affine>,
    activation: Activation,
    names: Vec<(String, String)>,
}

struct Trace {
    /// Input followed by every trunk activation.
    acts: Vec<Array2<f64>>,
    logits: Array2<f64>,
    recon: Option<Array2<f64>>,
}

impl Network {
    pub(crate) fn new(ckpt: &Checkpoint, spec: &MlpSpec) -> Result<Self> {
        let digest = spec.digest();
        if ckpt.meta.arch_digest != digest {
            return Err(Error::ArchMismatch {
                checkpoint: ckpt.meta.arch_digest.to_string(),
                spec: digest.to_string(),
            });
        }
        Self::from_weights(spec, &ckpt.weights)
    }

    fn from_weights(spec: &MlpSpec, weights: &TensorMap) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        if weights.len() != 2 * layers.len() {
            let expected: BTreeSet<String> = spec.tensor_names().into_iter().collect();
            if let Some(extra) = weights.names().find(|n| !expected.contains(*n)) {
                return Err(Error::MissingTensor(extra.to_string()));
            }
        }
        let mut affines = layers
            .iter()
            .map(|(w, b, o, i)| Affine::from_map(weights, w, b, *o, *i))
            .collect::<Result<Vec<_>>>()?;
        let recon = (spec.recon_dim > 0).then(|| affines.pop().expect("recon layer"));
        let cls = affines.pop().expect("cls layer");
        Ok(Self {
            trunk: affines,
            cls,
            recon,
            activation: spec.activation,
            names: layers.into_iter().map(|(w, b, _, _)| (w, b)).collect(),
        })
    }

    fn input_dim(&self) -> usize {
        self.trunk
            .first()
            .map_or(self.cls.weight.ncols(), |l| l.weight.ncols())
    }

    fn activate(&self, z: Array2<f64>) -> Array2<f64> {
        match self.activation {
            Activation::Tanh => z.mapv_into(f64::tanh),
            Activation::Relu => z.mapv_into(|v| v.max(0.0)),
        }
    }

    fn trace(&self, inputs: &Array2<f32>) -> Result<Trace> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have {} columns, model expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let mut acts = vec![inputs.mapv(|v| v as f64)];
        for layer in &self.trunk {
            let z = layer.forward(acts.last().unwrap());
            acts.push(self.activate(z));
        }
        let h = acts.last().unwrap();
        let logits = self.cls.forward(h);
        let recon = self.recon.as_ref().map(|r| r.forward(h));
        Ok(Trace {
            acts,
            logits,
            recon,
        })
    }

    pub(crate) fn logits(&self, inputs: &Array2<f32>) -> Result<Array2<f64>> {
        Ok(self.trace(inputs)?.logits)
    }

    fn backward(
        &self,
        trace: &Trace,
        dlogits: Option<&Array2<f64>>,
        drecon: Option<&Array2<f64>>,
    ) -> BTreeMap<String, Vec<f64>> {
        let mut grads = BTreeMap::new();
        let h = trace.acts.last().unwrap();
        let mut dh = Array2::<f64>::zeros(h.raw_dim());
        let n_trunk = self.trunk.len();

        let mut head = |layer: &Affine, names: &(String, String), d: Option<&Array2<f64>>, dh: &mut Array2<f64>| {
            match d {
                Some(d) => {
                    grads.insert(names.0.clone(), d.t().dot(h).into_raw_vec_and_offset().0);
                    grads.insert(names.1.clone(), d.sum_axis(Axis(0)).to_vec());
                    *dh += &d.dot(&layer.weight);
                }
                None => {
                    grads.insert(names.0.clone(), vec![0.0; layer.weight.len()]);
                    grads.insert(names.1.clone(), vec![0.0; layer.bias.len()]);
                }
            }
        };
        head(&self.cls, &self.names[n_trunk], dlogits, &mut dh);
        if let Some(r) = &self.recon {
            head(r, &self.names[n_trunk + 1], drecon, &mut dh);
        }

        for k in (0..n_trunk).rev() {
            let a = &trace.acts[k + 1];
            let x = &trace.acts[k];
            let dz = match self.activation {
                Activation::Tanh => &dh * &a.mapv(|v| 1.0 - v * v),
                Activation::Relu => &dh * &a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            };
            let (wname, bname) = &self.names[k];
            grads.insert(wname.clone(), dz.t().dot(x).into_raw_vec_and_offset().0);
            grads.insert(bname.clone(), dz.sum_axis(Axis(0)).to_vec());
            if k > 0 {
                dh = dz.dot(&self.trunk[k].weight);
            }
        }
        grads
    }

    fn cross_entropy(&self, trace: &Trace, batch: &Samples) -> Result<(f64, Array2<f64>)> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::EmptyData("cross-entropy needs labels".into()))?;
        let n = batch.len() as f64;
        let mut dlogits = Array2::<f64>::zeros(trace.logits.raw_dim());
        let mut loss = 0.0;
        for (i, (&label, block)) in labels.iter().zip(&batch.blocks).enumerate() {
            if block.end() > trace.logits.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "class block {}..{} exceeds head width {}",
                    block.offset,
                    block.end(),
                    trace.logits.ncols()
                )));
            }
            if label >= block.count {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: block.count,
                });
            }
            let z = trace.logits.slice(s![i, block.offset..block.end()]);
            let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps = z.mapv(|v| (v - m).exp());
            let total = exps.sum();
            loss += m + total.ln() - z[label];
            let mut row = dlogits.slice_mut(s![i, block.offset..block.end()]);
            for (j, e) in exps.iter().enumerate() {
                row[j] = (e / total - if j == label { 1.0 } else { 0.0 }) / n;
            }
        }
        Ok((loss / n, dlogits))
    }

    /// Loss and `f64` gradients for one batch.
    fn loss_and_grads(&self, batch: &Samples, objective: Objective) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyData("empty batch".into()));
        }
        let trace = self.trace(&batch.inputs)?;
        match objective {
            Objective::CrossEntropy => {
                let (loss, d) = self.cross_entropy(&trace, batch)?;
                Ok((loss, self.backward(&trace, Some(&d), None)))
            }
            Objective::NegatedCrossEntropy => {
                let (loss, d) = self.cross_entropy(&trace, batch)?;
                let mut grads = self.backward(&trace, Some(&d), None);
                for g in grads.values_mut() {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
                Ok((-loss, grads))
            }
            Objective::Reconstruction => {
                let recon = trace
                    .recon
                    .as_ref()
                    .ok_or(Error::MissingHead("reconstruction"))?;
                let target = &trace.acts[0];
                if recon.ncols() != target.ncols() {
                    return Err(Error::DimensionMismatch(format!(
                        "reconstruction width {} differs from input width {}",
                        recon.ncols(),
                        target.ncols()
                    )));
                }
                let count = recon.len() as f64;
                let resid = recon - target;
                let loss = resid.mapv(|v| v * v).sum() / count;
                let d = resid * (2.0 / count);
                Ok((loss, self.backward(&trace, None, Some(&d))))
            }
        }
    }
}

fn to_grad_map(spec: &MlpSpec, grads: &BTreeMap<String, Vec<f64>>) -> GradMap {
    let mut out = TensorMap::new();
    for (w, b, o, i) in spec.layers() {
        for (name, shape) in [(w, vec![o, i]), (b, vec![o])] {
            let data = grads[&name].iter().map(|&v| v as f32).collect();
            out.insert(name, Tensor::new(shape, data).expect("shape"))
                .expect("name");
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Array2<f32>,
    pub recon: Option<Array2<f32>>,
}

pub fn forward(ckpt: &Checkpoint, spec: &MlpSpec, inputs: &Array2<f32>) -> Result<ForwardOutput> {
    let net = Network::new(ckpt, spec)?;
    let trace = net.trace(inputs)?;
    Ok(ForwardOutput {
        logits: trace.logits.mapv(|v| v as f32),
        recon: trace.recon.map(|r| r.mapv(|v| v as f32)),
    })
}

/// Mean batch loss and its exact gradient.
pub fn loss_and_grads(
    ckpt: &Checkpoint,
    spec: &MlpSpec,
    batch: &Samples,
    objective: Objective,
) -> Result<(f64, GradMap)> {
    let net = Network::new(ckpt, spec)?;
    let (loss, grads) = net.loss_and_grads(batch, objective)?;
    Ok((loss, to_grad_map(spec, &grads)))
}

/// Loss of `objective` over a whole sample set.
pub fn evaluate_loss(ckpt: &Checkpoint, spec: &MlpSpec, data: &Samples, objective: Objective) -> Result<f64> {
    let net = Network::new(ckpt, spec)?;
    Ok(net.loss_and_grads(data, objective)?.0)
}

/// AdamW with decoupled weight decay; moments are kept per tensor name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the gradient-driven part of it
    /// (`-lr * m_hat / (sqrt(v_hat) + eps)`) per updated tensor.
    pub fn step(
        &mut self,
        weights: &mut TensorMap,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        freeze: &BTreeSet<String>,
    ) -> BTreeMap<String, Vec<f64>> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut updates = BTreeMap::new();
        for (name, tensor) in weights.iter_mut() {
            if freeze.contains(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut upd = Vec::with_capacity(g.len());
            for (((p, &gi), mi), vi) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let u = -lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                let theta = *p as f64;
                *p = (theta - lr * self.weight_decay * theta + u) as f32;
                upd.push(u);
            }
            updates.insert(name.to_string(), upd);
        }
        updates
    }
}

/// Draws minibatch indices from a seeded permutation that is re-shuffled
/// each time it is exhausted; batches wrap across epoch boundaries.
struct BatchSampler {
    rng: rand_chacha::ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = task_suite::stream("batches", seed, n as u64);
        let order = task_suite::permutation(&mut rng, n);
        Self {
            rng,
            order,
            cursor: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = task_suite::permutation(&mut self.rng, self.order.len());
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutput {
    pub final_ckpt: Checkpoint,
    /// `(step, checkpoint)` pairs; step 0 is the starting point.
    pub snapshots: Vec<(u64, Checkpoint)>,
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
}

/// Fine-tunes on the training split of `data`.
pub fn fine_tune(start: &Checkpoint, spec: &MlpSpec, data: &Dataset, cfg: &TrainConfig) -> Result<FineTuneOutput> {
    fine_tune_samples(start, spec, &data.samples(Split::Train), cfg, &data.spec.task_id)
}

pub fn fine_tune_samples(
    start: &Checkpoint,
    spec: &MlpSpec,
    train: &Samples,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<FineTuneOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyData("empty train split".into()));
    }
    let known: BTreeSet<String> = spec.tensor_names().into_iter().collect();
    if let Some(bad) = cfg.freeze.iter().find(|n| !known.contains(*n)) {
        return Err(Error::InvalidConfig(format!("freeze names unknown tensor {bad}")));
    }
    Network::new(start, spec)?;

    let parent = content_hash(&start.weights);
    let snapshot = |weights: &TensorMap, step: usize| Checkpoint {
        weights: weights.clone(),
        meta: CheckpointMeta {
            model_id: run_id.to_string(),
            arch_digest: start.meta.arch_digest,
            seed: cfg.seed,
            step: step as u64,
            parent_hash: Some(parent),
            note: format!("{:?} step {step}", cfg.objective),
        },
    };

    let mut weights = start.weights.clone();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut sampler = BatchSampler::new(train.len(), cfg.seed);
    let mut snapshots = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.snapshot_every > 0 {
        snapshots.push((0, snapshot(&weights, 0)));
    }
    for step in 0..cfg.steps {
        let batch = train.select(&sampler.next_batch(cfg.batch_size));
        let net = Network::from_weights(spec, &weights)?;
        let (loss, grads) = net.loss_and_grads(&batch, cfg.objective)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        losses.push(loss);
        opt.step(&mut weights, &grads, lr_at(step, cfg)?, &cfg.freeze);
        let done = step + 1;
        if cfg.snapshot_every > 0 && done % cfg.snapshot_every == 0 {
            snapshots.push((done as u64, snapshot(&weights, done)));
        }
    }
    if let Some(name) = weights.first_non_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    if cfg.snapshot_every > 0 && snapshots.last().map(|(s, _)| *s) != Some(cfg.steps as u64) {
        snapshots.push((cfg.steps as u64, snapshot(&weights, cfg.steps)));
    }
    Ok(FineTuneOutput {
        final_ckpt: snapshot(&weights, cfg.steps),
        snapshots,
        losses,
    })
}
