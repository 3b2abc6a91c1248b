//! Deterministic synthetic classification tasks with a content x style
//! structure.
//!
//! *Content* fixes the Gaussian cluster centers and the label block in the
//! shared classification head. *Style* fixes an affine input transform
//! (rotation, isotropic scale, shift). Style 0 is the identity.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::Digest;

pub const INPUT_DIM: usize = 16;
pub const CONTROL_CLASSES: usize = 16;
pub const TARGET_CLASSES: usize = 4;
pub const DEFAULT_NOISE: f64 = 0.2;
/// Extra noise per bank index, so bank tasks range in difficulty.
pub const BANK_NOISE_STEP: f64 = 0.05;

/// Content id reserved for the control mixture; target tasks use `>= 1`.
pub const CONTROL_CONTENT: u64 = 0;
pub const BANK_SIZE: u64 = 8;
pub const GRID_CONTENTS: [u64; 2] = [9, 10];
pub const GRID_STYLES: [u64; 2] = [1, 2];
pub const DOMAIN_CONTENT: u64 = 11;
/// (auxiliary, target) styles of the domain pair.
pub const DOMAIN_STYLES: (u64, u64) = (7, 8);
/// Classification head width covering every reserved content block.
pub const HEAD_WIDTH: usize = CONTROL_CLASSES + TARGET_CLASSES * DOMAIN_CONTENT as usize;

const STYLE_MAX_ANGLE: f64 = 0.25;
const STYLE_SCALE_RANGE: (f64, f64) = (0.8, 1.25);
const STYLE_SHIFT_NORM: f64 = 1.0;

/// Seeded stream keyed by a tag and two integers.
pub(crate) fn stream(tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut bytes = tag.as_bytes().to_vec();
    bytes.extend_from_slice(&a.to_le_bytes());
    bytes.extend_from_slice(&b.to_le_bytes());
    ChaCha8Rng::seed_from_u64(Digest::of_bytes(&bytes).prefix_u64())
}

/// First logit column of the block owned by `content_id`.
pub fn class_offset(content_id: u64) -> usize {
    if content_id == CONTROL_CONTENT {
        0
    } else {
        CONTROL_CLASSES + TARGET_CLASSES * (content_id as usize - 1)
    }
}

/// Contiguous range of logit columns a task classifies over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBlock {
    pub offset: usize,
    pub count: usize,
}

impl ClassBlock {
    pub fn end(&self) -> usize {
        self.offset + self.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 512,
            val: 128,
            test: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub content_id: u64,
    pub style_id: u64,
    pub num_classes: usize,
    /// First logit column of this task's class block in the shared head.
    pub class_offset: usize,
    pub dim: usize,
    pub samples_per_split: SplitSizes,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn block(&self) -> ClassBlock {
        ClassBlock {
            offset: self.class_offset,
            count: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("task {}: {m}", self.task_id)));
        if self.task_id.is_empty() {
            return Err(Error::InvalidConfig("empty task_id".into()));
        }
        if self.num_classes == 0 || self.dim == 0 {
            return bad("num_classes and dim must be positive".into());
        }
        let s = self.samples_per_split;
        if s.train == 0 || s.val == 0 || s.test == 0 {
            return bad("every split needs at least one sample".into());
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be positive", self.noise_sigma));
        }
        Ok(())
    }
}

/// `scale * R x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTransform {
    dim: usize,
    rotation: Vec<f64>,
    scale: f64,
    shift: Vec<f64>,
}

impl StyleTransform {
    pub fn identity(dim: usize) -> Self {
        let mut rotation = vec![0.0; dim * dim];
        for i in 0..dim {
            rotation[i * dim + i] = 1.0;
        }
        Self {
            dim,
            rotation,
            scale: 1.0,
            shift: vec![0.0; dim],
        }
    }

    /// Rotation built from `dim` Givens rotations in random planes with
    /// bounded angles, so distinct styles stay related but not identical.
    pub fn for_style(style_id: u64, dim: usize) -> Self {
        let mut t = Self::identity(dim);
        if style_id == 0 {
            return t;
        }
        let mut rng = stream("style", style_id, dim as u64);
        if dim >= 2 {
            for _ in 0..dim {
                let i = rng.random_range(0..dim);
                let mut j = rng.random_range(0..dim - 1);
                if j >= i {
                    j += 1;
                }
                let angle = rng.random_range(-STYLE_MAX_ANGLE..STYLE_MAX_ANGLE);
                let (s, c) = angle.sin_cos();
                // left-multiply by the rotation in the (i, j) plane
                for col in 0..dim {
                    let ri = t.rotation[i * dim + col];
                    let rj = t.rotation[j * dim + col];
                    t.rotation[i * dim + col] = c * ri - s * rj;
                    t.rotation[j * dim + col] = s * ri + c * rj;
                }
            }
        }
        t.scale = rng.random_range(STYLE_SCALE_RANGE.0..STYLE_SCALE_RANGE.1);
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        t.shift = dir.iter().map(|v| v / norm * STYLE_SHIFT_NORM).collect();
        t
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|r| {
                let row = &self.rotation[r * self.dim..(r + 1) * self.dim];
                let rx: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                self.scale * rx + self.shift[r]
            })
            .collect()
    }
}

/// Unit-norm cluster centers for a content id.
pub fn cluster_centers(content_id: u64, num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = stream("centers", content_id, ((dim as u64) << 32) | num_classes as u64);
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Untransformed samples and labels for one split; labels cycle through
/// the classes so every split is balanced up to remainder.
pub fn raw_samples(spec: &SyntheticTaskSpec, split: Split) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers = cluster_centers(spec.content_id, spec.num_classes, spec.dim);
    let mut rng = stream(
        "samples",
        spec.seed,
        spec.content_id.wrapping_mul(4).wrapping_add(split.index()),
    );
    let n = spec.samples_per_split.get(split);
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.num_classes;
        let x: Vec<f64> = centers[label]
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c + spec.noise_sigma * z
            })
            .collect();
        xs.push(x);
        labels.push(label);
    }
    (xs, labels)
}

/// Inputs with optional labels and a class block per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub inputs: Array2<f32>,
    pub labels: Option<Vec<usize>>,
    pub blocks: Vec<ClassBlock>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Samples {
        Samples {
            inputs: self.inputs.select(ndarray::Axis(0), rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            blocks: rows.iter().map(|&r| self.blocks[r]).collect(),
        }
    }

    /// Row-wise concatenation; labels survive only if every part has them.
    pub fn concat(parts: &[Samples]) -> Result<Samples> {
        if parts.is_empty() {
            return Err(Error::EmptyData("no sample sets to concatenate".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.inputs.view()).collect();
        let inputs = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let labels = if parts.iter().all(|p| p.labels.is_some()) {
            Some(
                parts
                    .iter()
                    .flat_map(|p| p.labels.as_ref().unwrap().iter().copied())
                    .collect(),
            )
        } else {
            None
        };
        Ok(Samples {
            inputs,
            labels,
            blocks: parts.iter().flat_map(|p| p.blocks.iter().copied()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    inputs: Array2<f32>,
    labels: Option<Vec<usize>>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn inputs(&self) -> &Array2<f32> {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    pub fn samples(&self, split: Split) -> Samples {
        let rows = self.rows(split);
        Samples {
            inputs: self.inputs.select(ndarray::Axis(0), &rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            blocks: vec![self.spec.block(); rows.len()],
        }
    }

    /// Same dataset with labels removed (reconstruction targets are the inputs).
    pub fn unlabeled(mut self) -> Dataset {
        self.labels = None;
        self
    }

    /// Keeps only the first `per_class` training rows of each class; the
    /// validation and test splits are untouched.
    pub fn few_shot(&self, per_class: usize) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::EmptyData("few-shot subset needs labels".into()))?;
        let mut seen = vec![0usize; self.spec.num_classes];
        let keep: Vec<usize> = (0..self.splits.len())
            .filter(|&i| {
                if self.splits[i] != Split::Train {
                    return true;
                }
                let c = labels[i];
                seen[c] += 1;
                seen[c] <= per_class
            })
            .collect();
        let mut spec = self.spec.clone();
        spec.samples_per_split.train = keep
            .iter()
            .filter(|&&i| self.splits[i] == Split::Train)
            .count();
        Ok(Dataset {
            spec,
            inputs: self.inputs.select(ndarray::Axis(0), &keep),
            labels: Some(keep.iter().map(|&i| labels[i]).collect()),
            splits: keep.iter().map(|&i| self.splits[i]).collect(),
        })
    }

    /// CSV with columns `split,label,x0..x{dim-1}`; `label` is empty for
    /// unlabeled data.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["split".to_string(), "label".to_string()];
        header.extend((0..self.spec.dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for (i, row) in self.inputs.rows().into_iter().enumerate() {
            let mut rec = vec![
                self.splits[i].to_string(),
                self.labels
                    .as_ref()
                    .map(|l| l[i].to_string())
                    .unwrap_or_default(),
            ];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn make_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let style = StyleTransform::for_style(spec.style_id, spec.dim);
    let total: usize = Split::ALL
        .iter()
        .map(|&s| spec.samples_per_split.get(s))
        .sum();
    let mut flat = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for split in Split::ALL {
        let (xs, ls) = raw_samples(spec, split);
        for (x, l) in xs.iter().zip(ls) {
            flat.extend(style.apply(x).into_iter().map(|v| v as f32));
            labels.push(l);
            splits.push(split);
        }
    }
    let inputs = Array2::from_shape_vec((total, spec.dim), flat)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok(Dataset {
        spec: spec.clone(),
        inputs,
        labels: Some(labels),
        splits,
    })
}

pub fn control_spec(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        task_id: "control".into(),
        content_id: CONTROL_CONTENT,
        style_id: 0,
        num_classes: CONTROL_CLASSES,
        class_offset: class_offset(CONTROL_CONTENT),
        dim: INPUT_DIM,
        samples_per_split: SplitSizes {
            train: 2048,
            val: 256,
            test: 512,
        },
        noise_sigma: DEFAULT_NOISE,
        seed,
    }
}

/// The broad mixture used for pre-training and as the control metric.
pub fn make_control(seed: u64) -> Dataset {
    make_task(&control_spec(seed)).expect("control spec is valid")
}

fn target_like(task_id: String, content_id: u64, style_id: u64, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        task_id,
        content_id,
        style_id,
        num_classes: TARGET_CLASSES,
        class_offset: class_offset(content_id),
        dim: INPUT_DIM,
        samples_per_split: SplitSizes::default(),
        noise_sigma: DEFAULT_NOISE,
        seed,
    }
}

/// Target task `index` (1-based) of the bank, under style 0.
pub fn target_spec(index: u64, seed: u64) -> SyntheticTaskSpec {
    assert!((1..=BANK_SIZE).contains(&index), "bank index {index} out of 1..=8");
    SyntheticTaskSpec {
        noise_sigma: DEFAULT_NOISE + BANK_NOISE_STEP * (index - 1) as f64,
        ..target_like(format!("task{index}"), index, 0, seed)
    }
}

pub fn target_bank(n: usize, seed: u64) -> Vec<SyntheticTaskSpec> {
    (1..=n as u64).map(|i| target_spec(i, seed)).collect()
}

/// The 2x2 content x style grid, cells ordered (c1,s1), (c2,s1), (c1,s2), (c2,s2).
pub fn make_grid_seeded(seed: u64) -> [SyntheticTaskSpec; 4] {
    let cell = |c: usize, s: usize| {
        target_like(
            format!("grid.c{}s{}", c + 1, s + 1),
            GRID_CONTENTS[c],
            GRID_STYLES[s],
            seed,
        )
    };
    [cell(0, 0), cell(1, 0), cell(0, 1), cell(1, 1)]
}

pub fn make_grid() -> [SyntheticTaskSpec; 4] {
    make_grid_seeded(0)
}

/// `(A, B, C)` indices into the grid for a held-out cell `D`: `B` shares
/// D's content, `C` shares D's style, `A` shares neither.
pub fn analogy_triple(heldout: usize) -> Result<(usize, usize, usize)> {
    if heldout >= 4 {
        return Err(Error::InvalidConfig(format!(
            "held-out cell {heldout} not in the 2x2 grid"
        )));
    }
    let content = heldout % 2;
    let style = heldout / 2;
    let idx = |c: usize, s: usize| s * 2 + c;
    Ok((
        idx(1 - content, 1 - style),
        idx(content, 1 - style),
        idx(1 - content, style),
    ))
}

#[derive(Debug, Clone)]
pub struct DomainPair {
    pub aux_supervised: Dataset,
    pub aux_unsup: Dataset,
    pub target_unsup: Dataset,
    pub target_supervised_eval: Dataset,
}

/// Two domains sharing content (label semantics) under different styles.
/// Only the auxiliary domain exposes labels for training; the unsupervised
/// sets come from the same generators with disjoint sample seeds.
pub fn make_domain_pair_seeded(seed: u64) -> DomainPair {
    let (aux_style, target_style) = DOMAIN_STYLES;
    let s = |k: u64| seed.wrapping_mul(4).wrapping_add(k);
    let make = |id: &str, style, k| {
        make_task(&target_like(id.into(), DOMAIN_CONTENT, style, s(k))).expect("valid spec")
    };
    DomainPair {
        aux_supervised: make("domain.aux", aux_style, 0),
        aux_unsup: make("domain.aux.unsup", aux_style, 1).unlabeled(),
        target_unsup: make("domain.target.unsup", target_style, 2).unlabeled(),
        target_supervised_eval: make("domain.target", target_style, 3),
    }
}

pub fn make_domain_pair() -> DomainPair {
    make_domain_pair_seeded(0)
}

/// A seeded permutation of `0..n`.
pub(crate) fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(style_id: u64) -> SyntheticTaskSpec {
        let mut s = target_spec(3, 11);
        s.style_id = style_id;
        s
    }

    #[test]
    fn make_task_is_deterministic() {
        let a = make_task(&small(0)).unwrap();
        let b = make_task(&small(0)).unwrap();
        assert_eq!(a, b);
        let bits = |d: &Dataset| d.inputs().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let mut other = small(0);
        other.seed += 1;
        assert_ne!(make_task(&other).unwrap().inputs(), a.inputs());
    }

    #[test]
    fn split_sizes_and_labels() {
        let d = make_task(&small(0)).unwrap();
        assert_eq!(d.split_len(Split::Train), 512);
        assert_eq!(d.split_len(Split::Val), 128);
        assert_eq!(d.split_len(Split::Test), 512);
        assert!(d.labels().unwrap().iter().all(|&l| l < 4));
        assert!(d.inputs().iter().all(|v| v.is_finite()));
        let test = d.samples(Split::Test);
        let counts = (0..4)
            .map(|c| test.labels.as_ref().unwrap().iter().filter(|&&l| l == c).count())
            .collect::<Vec<_>>();
        assert_eq!(counts, vec![128; 4]);
        assert!(test.blocks.iter().all(|b| *b == ClassBlock { offset: 24, count: 4 }));
    }

    #[test]
    fn noiseless_task_is_solved_by_nearest_center() {
        let mut spec = small(0);
        spec.noise_sigma = 1e-9;
        let d = make_task(&spec).unwrap();
        let centers = cluster_centers(spec.content_id, spec.num_classes, spec.dim);
        let test = d.samples(Split::Test);
        let labels = test.labels.unwrap();
        let mut correct = 0;
        for (row, &label) in test.inputs.rows().into_iter().zip(&labels) {
            let nearest = (0..centers.len())
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centers[a]).map(|(x, c)| (*x as f64 - c).powi(2)).sum();
                    let db: f64 = row.iter().zip(&centers[b]).map(|(x, c)| (*x as f64 - c).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += usize::from(nearest == label);
        }
        assert_eq!(correct, labels.len());
    }

    #[test]
    fn style_only_changes_inputs_by_affine_map() {
        let plain = make_task(&small(0)).unwrap();
        let styled = make_task(&small(2)).unwrap();
        assert_eq!(plain.labels(), styled.labels());
        let t = StyleTransform::for_style(2, INPUT_DIM);
        for (p, s) in plain.inputs().rows().into_iter().zip(styled.inputs().rows()) {
            let x: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            let want = t.apply(&x);
            for (w, g) in want.iter().zip(s.iter()) {
                assert!((w - *g as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn content_change_keeps_transform() {
        // same style, different content: the transform is a function of the
        // style id alone
        assert_eq!(
            StyleTransform::for_style(1, INPUT_DIM),
            StyleTransform::for_style(1, INPUT_DIM)
        );
        assert_eq!(StyleTransform::for_style(0, 5), StyleTransform::identity(5));
        assert_ne!(
            StyleTransform::for_style(1, INPUT_DIM),
            StyleTransform::for_style(2, INPUT_DIM)
        );
    }

    #[test]
    fn style_rotation_is_orthogonal() {
        let t = StyleTransform::for_style(4, 6);
        for i in 0..6 {
            for j in 0..6 {
                let d: f64 = (0..6).map(|k| t.rotation[i * 6 + k] * t.rotation[j * 6 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn control_is_disjoint_and_deterministic() {
        let c = make_control(5);
        assert_eq!(c.spec.content_id, CONTROL_CONTENT);
        assert_eq!(c, make_control(5));
        for spec in target_bank(8, 5) {
            assert!(spec.content_id >= 1);
            assert!(spec.class_offset >= CONTROL_CLASSES);
            assert!(spec.block().end() <= HEAD_WIDTH);
        }
    }

    #[test]
    fn grid_structure() {
        let g = make_grid();
        assert_eq!(g[0].content_id, g[2].content_id);
        assert_eq!(g[1].content_id, g[3].content_id);
        assert_eq!(g[0].style_id, g[1].style_id);
        assert_eq!(g[2].style_id, g[3].style_id);
        let mut ids: Vec<_> = g.iter().map(|s| s.task_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        assert!(g.iter().all(|s| s.block().end() <= HEAD_WIDTH));
    }

    #[test]
    fn analogy_triple_for_last_cell() {
        // D = (c2,s2): A = (c1,s1), B = (c2,s1), C = (c1,s2)
        assert_eq!(analogy_triple(3).unwrap(), (0, 1, 2));
        let g = make_grid();
        for d in 0..4 {
            let (a, b, c) = analogy_triple(d).unwrap();
            assert_eq!(g[b].content_id, g[d].content_id);
            assert_eq!(g[c].style_id, g[d].style_id);
            assert_eq!(g[a].content_id, g[c].content_id);
            assert_eq!(g[a].style_id, g[b].style_id);
            assert_ne!(a, d);
        }
        assert!(analogy_triple(4).is_err());
    }

    #[test]
    fn domain_pair_structure() {
        let p = make_domain_pair();
        assert_eq!(p.aux_supervised.spec.content_id, p.target_supervised_eval.spec.content_id);
        assert_ne!(p.aux_supervised.spec.style_id, p.target_supervised_eval.spec.style_id);
        assert!(!p.aux_unsup.is_labeled());
        assert!(!p.target_unsup.is_labeled());
        assert!(p.target_supervised_eval.is_labeled());
        assert_eq!(p.target_unsup.spec.style_id, p.target_supervised_eval.spec.style_id);
        assert_ne!(p.target_unsup.inputs(), p.target_supervised_eval.inputs());
    }

    #[test]
    fn few_shot_keeps_k_per_class() {
        let d = make_task(&small(0)).unwrap();
        let f = d.few_shot(2).unwrap();
        let train = f.samples(Split::Train);
        assert_eq!(train.len(), 8);
        assert_eq!(f.split_len(Split::Test), 512);
        for c in 0..4 {
            assert_eq!(train.labels.as_ref().unwrap().iter().filter(|&&l| l == c).count(), 2);
        }
    }

    #[test]
    fn csv_export_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = make_task(&small(0)).unwrap();
        d.write_csv(&path).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let h = r.headers().unwrap().clone();
        assert_eq!(&h[0], "split");
        assert_eq!(&h[1], "label");
        assert_eq!(&h[17], "x15");
        assert_eq!(r.records().count(), 512 + 128 + 512);
    }

    #[test]
    fn spec_json_roundtrip_is_strict() {
        let s = small(1);
        let js = serde_json::to_string(&s).unwrap();
        let back: SyntheticTaskSpec = serde_json::from_str(&js).unwrap();
        assert_eq!(back, s);
        let mut v: serde_json::Value = serde_json::from_str(&js).unwrap();
        v["typo"] = serde_json::json!(1);
        assert!(serde_json::from_value::<SyntheticTaskSpec>(v).is_err());
    }
}
