//! Arithmetic over task vectors.
//!
//! A task vector is the elementwise difference between fine-tuned and
//! pre-trained weights. Elementwise combinations are computed in `f64` and
//! rounded once to `f32`; reductions (dot products, norms) accumulate in
//! `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{
    content_hash, load_tvkp, save_tvkp, validate_compat, Checkpoint, CheckpointMeta, Digest,
    Tensor, TensorMap, TvkpFile,
};

/// `meta.note` marker for task vectors stored as TVKP files.
pub const TASK_VECTOR_NOTE: &str = "taskvector";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorKind {
    FinetuneDiff,
    RandomMatched,
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub pre_hash: Digest,
    pub ft_hash: Option<Digest>,
    pub task_id: String,
    pub kind: VectorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: TensorMap,
    pub provenance: Provenance,
}

impl TaskVector {
    pub fn task_id(&self) -> &str {
        &self.provenance.task_id
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn global_norm(&self) -> f64 {
        dot(&self.delta, &self.delta).sqrt()
    }

    fn composite(&self, delta: TensorMap, task_id: String) -> TaskVector {
        TaskVector {
            delta,
            provenance: Provenance {
                pre_hash: self.provenance.pre_hash,
                ft_hash: None,
                task_id,
                kind: VectorKind::Composite,
            },
        }
    }
}

/// Expression tree over task vectors.
#[derive(Debug, Clone)]
pub enum ArithExpr {
    Leaf(TaskVector),
    Neg(Box<ArithExpr>),
    Sum(Vec<ArithExpr>),
    Scaled(f64, Box<ArithExpr>),
}

impl ArithExpr {
    pub fn leaf(t: TaskVector) -> Self {
        ArithExpr::Leaf(t)
    }

    pub fn neg(e: ArithExpr) -> Self {
        ArithExpr::Neg(Box::new(e))
    }

    pub fn scaled(coeff: f64, e: ArithExpr) -> Self {
        ArithExpr::Scaled(coeff, Box::new(e))
    }

    pub fn sum_of(ts: impl IntoIterator<Item = TaskVector>) -> Self {
        ArithExpr::Sum(ts.into_iter().map(ArithExpr::Leaf).collect())
    }
}

impl fmt::Display for ArithExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArithExpr::Leaf(t) => write!(f, "{}", t.task_id()),
            ArithExpr::Neg(e) => write!(f, "-({e})"),
            ArithExpr::Scaled(c, e) => write!(f, "{c}*({e})"),
            ArithExpr::Sum(es) => {
                f.write_str("(")?;
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" + ")?;
                    }
                    write!(f, "{e}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Elementwise `sum_i coeffs[i] * maps[i]`, accumulated in `f64`.
fn combine(maps: &[(f64, &TensorMap)]) -> Result<TensorMap> {
    let (_, first) = maps.first().ok_or(Error::EmptySum)?;
    for (_, m) in &maps[1..] {
        validate_compat(first, m)?;
    }
    let mut out = TensorMap::new();
    for (name, t0) in first.iter() {
        let mut acc = vec![0f64; t0.numel()];
        for (c, m) in maps {
            let src = m.get(name).expect("validated").data();
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += c * v as f64;
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        out.insert(name, Tensor::new(t0.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// `ft - pre`, elementwise.
pub fn diff(ft: &Checkpoint, pre: &Checkpoint) -> Result<TaskVector> {
    validate_compat(&ft.weights, &pre.weights)?;
    let mut delta = TensorMap::new();
    for (name, tf) in ft.weights.iter() {
        let tp = pre.weights.get(name).expect("validated");
        let data = tf
            .data()
            .iter()
            .zip(tp.data())
            .map(|(&a, &b)| a - b)
            .collect();
        delta.insert(name, Tensor::new(tf.shape().to_vec(), data)?)?;
    }
    Ok(TaskVector {
        delta,
        provenance: Provenance {
            pre_hash: content_hash(&pre.weights),
            ft_hash: Some(content_hash(&ft.weights)),
            task_id: ft.meta.model_id.clone(),
            kind: VectorKind::FinetuneDiff,
        },
    })
}

pub fn negate(t: &TaskVector) -> TaskVector {
    let delta = t.delta.map_tensors(|_, x| x.map(|v| -v));
    t.composite(delta, format!("-{}", t.task_id()))
}

pub fn scale(t: &TaskVector, coeff: f64) -> TaskVector {
    let delta = t
        .delta
        .map_tensors(|_, x| x.map(|v| (coeff * v as f64) as f32));
    t.composite(delta, format!("{coeff}*{}", t.task_id()))
}

pub fn sum(ts: &[TaskVector]) -> Result<TaskVector> {
    let first = ts.first().ok_or(Error::EmptySum)?;
    let maps: Vec<(f64, &TensorMap)> = ts.iter().map(|t| (1.0, &t.delta)).collect();
    let delta = combine(&maps)?;
    let id = ts
        .iter()
        .map(TaskVector::task_id)
        .collect::<Vec<_>>()
        .join("+");
    Ok(first.composite(delta, id))
}

/// `tc + (tb - ta)`: the vector completing "A is to B as C is to D".
pub fn analogy(ta: &TaskVector, tb: &TaskVector, tc: &TaskVector) -> Result<TaskVector> {
    let delta = combine(&[(1.0, &tc.delta), (1.0, &tb.delta), (-1.0, &ta.delta)])?;
    let id = format!("{}+{}-{}", tc.task_id(), tb.task_id(), ta.task_id());
    Ok(tc.composite(delta, id))
}

/// Weighted sum `sum_i c_i * t_i` in a single pass.
pub fn linear_combination(terms: &[(f64, &TaskVector)]) -> Result<TaskVector> {
    let (_, first) = terms.first().ok_or(Error::EmptySum)?;
    let maps: Vec<(f64, &TensorMap)> = terms.iter().map(|(c, t)| (*c, &t.delta)).collect();
    let delta = combine(&maps)?;
    let id = terms
        .iter()
        .map(|(c, t)| format!("{c}*{}", t.task_id()))
        .collect::<Vec<_>>()
        .join("+");
    Ok(first.composite(delta, id))
}

pub fn eval_expr(expr: &ArithExpr) -> Result<TaskVector> {
    match expr {
        ArithExpr::Leaf(t) => Ok(t.clone()),
        ArithExpr::Neg(e) => Ok(negate(&eval_expr(e)?)),
        ArithExpr::Scaled(c, e) => Ok(scale(&eval_expr(e)?, *c)),
        ArithExpr::Sum(es) => {
            let parts = es.iter().map(eval_expr).collect::<Result<Vec<_>>>()?;
            sum(&parts)
        }
    }
}

/// `base + coeff * tau`, rounded once per element.
pub fn apply_vector(base: &Checkpoint, tau: &TaskVector, coeff: f64, note: &str) -> Result<Checkpoint> {
    apply_terms(base, &[(coeff, tau)], note)
}

/// `base + sum_i c_i * t_i`, rounded once per element.
pub fn apply_terms(base: &Checkpoint, terms: &[(f64, &TaskVector)], note: &str) -> Result<Checkpoint> {
    let mut maps = vec![(1.0, &base.weights)];
    maps.extend(terms.iter().map(|(c, t)| (*c, &t.delta)));
    let weights = combine(&maps)?;
    if let Some(name) = weights.first_non_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(Checkpoint {
        weights,
        meta: CheckpointMeta {
            model_id: format!("{}|edit", base.meta.model_id),
            arch_digest: base.meta.arch_digest,
            seed: base.meta.seed,
            step: base.meta.step,
            parent_hash: Some(content_hash(&base.weights)),
            note: note.to_string(),
        },
    })
}

/// `base + coeff * eval_expr(expr)`.
pub fn apply(base: &Checkpoint, expr: &ArithExpr, coeff: f64) -> Result<Checkpoint> {
    let tau = eval_expr(expr)?;
    apply_vector(base, &tau, coeff, &format!("apply {coeff} * {expr}"))
}

fn name_stream_key(name: &str) -> u64 {
    Digest::of_bytes(name.as_bytes()).prefix_u64()
}

/// Per-tensor Gaussian noise rescaled to the per-tensor norm of `t`.
///
/// Each tensor draws from its own stream keyed by `seed ^ hash(name)`, so the
/// output does not depend on iteration order. All-zero tensors map to zeros.
pub fn random_matched(t: &TaskVector, seed: u64) -> TaskVector {
    let delta = t.delta.map_tensors(|name, x| {
        let target = x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if target == 0.0 {
            return Tensor::zeros(x.shape().to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_stream_key(name));
        let draw: Vec<f64> = (0..x.numel())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = draw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let k = target / norm;
        let data = draw.iter().map(|v| (v * k) as f32).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    });
    TaskVector {
        delta,
        provenance: Provenance {
            pre_hash: t.provenance.pre_hash,
            ft_hash: None,
            task_id: format!("random({})#{seed}", t.task_id()),
            kind: VectorKind::RandomMatched,
        },
    }
}

fn dot(a: &TensorMap, b: &TensorMap) -> f64 {
    a.iter()
        .map(|(name, ta)| {
            let tb = b.get(name).expect("compatible maps");
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum::<f64>()
        })
        .sum()
}

/// Cosine similarity over the full flattened vectors, canonical order.
pub fn cosine(t1: &TaskVector, t2: &TaskVector) -> Result<f64> {
    validate_compat(&t1.delta, &t2.delta)?;
    let n1 = t1.global_norm();
    let n2 = t2.global_norm();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(&t1.delta, &t2.delta) / (n1 * n2)).clamp(-1.0, 1.0))
}

pub fn per_layer_norms(t: &TaskVector) -> BTreeMap<String, f64> {
    t.delta
        .iter()
        .map(|(name, x)| {
            let n = x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            (name.to_string(), n)
        })
        .collect()
}

/// Writes `t` as a TVKP file; the provenance record rides in the header.
pub fn save_task_vector(t: &TaskVector, arch_digest: Digest, path: impl AsRef<Path>) -> Result<()> {
    let file = TvkpFile {
        weights: t.delta.clone(),
        meta: CheckpointMeta {
            model_id: t.provenance.task_id.clone(),
            arch_digest,
            seed: 0,
            step: 0,
            parent_hash: Some(t.provenance.pre_hash),
            note: TASK_VECTOR_NOTE.into(),
        },
        provenance: Some(serde_json::to_value(&t.provenance)?),
    };
    save_tvkp(&file, path)
}

/// Loads a task vector and the architecture digest recorded with it.
pub fn load_task_vector(path: impl AsRef<Path>) -> Result<(TaskVector, Digest)> {
    let path = path.as_ref();
    let file = load_tvkp(path)?;
    if file.meta.note != TASK_VECTOR_NOTE {
        return Err(Error::MalformedHeader(format!(
            "{} is not a task vector (note {:?})",
            path.display(),
            file.meta.note
        )));
    }
    let provenance: Provenance = match file.provenance {
        Some(v) => serde_json::from_value(v)?,
        None => {
            return Err(Error::MalformedHeader(format!(
                "{} has no provenance record",
                path.display()
            )))
        }
    };
    Ok((
        TaskVector {
            delta: file.weights,
            provenance,
        },
        file.meta.arch_digest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tm(entries: &[(&str, &[f32])]) -> TensorMap {
        let mut m = TensorMap::new();
        for (n, v) in entries {
            m.insert(*n, Tensor::new(vec![v.len()], v.to_vec()).unwrap())
                .unwrap();
        }
        m
    }

    fn ckpt(entries: &[(&str, &[f32])]) -> Checkpoint {
        Checkpoint {
            weights: tm(entries),
            meta: CheckpointMeta {
                model_id: "c".into(),
                arch_digest: Digest::of_bytes(b"a"),
                seed: 0,
                step: 0,
                parent_hash: None,
                note: String::new(),
            },
        }
    }

    fn tv(entries: &[(&str, &[f32])]) -> TaskVector {
        TaskVector {
            delta: tm(entries),
            provenance: Provenance {
                pre_hash: Digest::of_bytes(b"pre"),
                ft_hash: None,
                task_id: "t".into(),
                kind: VectorKind::FinetuneDiff,
            },
        }
    }

    fn values(t: &TaskVector, name: &str) -> Vec<f32> {
        t.delta.get(name).unwrap().data().to_vec()
    }

    fn ulp_distance(a: f32, b: f32) -> u32 {
        let key = |x: f32| {
            let bits = x.to_bits() as i64;
            if bits < 0x8000_0000 {
                bits
            } else {
                0x8000_0000 - bits
            }
        };
        (key(a) - key(b)).unsigned_abs() as u32
    }

    #[test]
    fn diff_examples() {
        let c = ckpt(&[("w", &[1.0, -2.5]), ("b", &[3.0])]);
        let z = diff(&c, &c).unwrap();
        assert!(z.is_zero());
        assert_eq!(z.provenance.kind, VectorKind::FinetuneDiff);

        let pre = ckpt(&[("w", &[1.0, 2.0])]);
        let ft = ckpt(&[("w", &[3.0, 5.0])]);
        let d = diff(&ft, &pre).unwrap();
        assert_eq!(values(&d, "w"), vec![2.0, 3.0]);
        assert_eq!(d.provenance.pre_hash, content_hash(&pre.weights));
        assert_eq!(d.provenance.ft_hash, Some(content_hash(&ft.weights)));
    }

    #[test]
    fn diff_rejects_mismatched_names() {
        let a = ckpt(&[("w", &[1.0])]);
        let b = ckpt(&[("v", &[1.0])]);
        assert!(diff(&a, &b).unwrap_err().is_compat());
    }

    #[test]
    fn negate_examples() {
        let t = tv(&[("w", &[2.0, -3.0])]);
        assert_eq!(values(&negate(&t), "w"), vec![-2.0, 3.0]);
        assert_eq!(negate(&negate(&t)).delta, t.delta);
        let z = tv(&[("w", &[0.0, 0.0])]);
        assert!(negate(&z).is_zero());
        assert_eq!(negate(&t).provenance.kind, VectorKind::Composite);
    }

    #[test]
    fn sum_examples() {
        let t = tv(&[("w", &[0.1, -7.3])]);
        assert_eq!(sum(&[t.clone()]).unwrap().delta, t.delta);
        assert!(sum(&[t.clone(), negate(&t)]).unwrap().is_zero());
        let a = tv(&[("w", &[1.0, 0.0])]);
        let b = tv(&[("w", &[0.5, 2.0])]);
        assert_eq!(values(&sum(&[a, b]).unwrap(), "w"), vec![1.5, 2.0]);
        assert!(matches!(sum(&[]), Err(Error::EmptySum)));
    }

    #[test]
    fn analogy_examples() {
        let t = tv(&[("w", &[1.5, -2.0])]);
        let c = tv(&[("w", &[0.25, 4.0])]);
        assert_eq!(analogy(&t, &t, &c).unwrap().delta, c.delta);

        let zero = tv(&[("w", &[0.0, 0.0])]);
        assert_eq!(
            analogy(&zero, &t, &c).unwrap().delta,
            sum(&[t.clone(), c.clone()]).unwrap().delta
        );

        let a = tv(&[("w", &[1.0])]);
        let b = tv(&[("w", &[4.0])]);
        let c = tv(&[("w", &[2.0])]);
        assert_eq!(values(&analogy(&a, &b, &c).unwrap(), "w"), vec![5.0]);
    }

    #[test]
    fn apply_examples() {
        let pre = ckpt(&[("w", &[0.3, -1.7, 1e-3]), ("b", &[2.0])]);
        let ft = ckpt(&[("w", &[0.9, -1.1, -4e-3]), ("b", &[-5.5])]);
        let tau = diff(&ft, &pre).unwrap();

        let same = apply(&pre, &ArithExpr::leaf(tau.clone()), 0.0).unwrap();
        assert_eq!(same.weights, pre.weights);
        assert_eq!(same.meta.parent_hash, Some(content_hash(&pre.weights)));
        assert!(same.meta.note.contains("apply 0"));

        let back = apply(&pre, &ArithExpr::leaf(tau), 1.0).unwrap();
        for (name, t) in ft.weights.iter() {
            for (&x, &y) in t.data().iter().zip(back.weights.get(name).unwrap().data()) {
                assert!(ulp_distance(x, y) <= 1, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn apply_half_sum_is_uniform_average() {
        let pre = ckpt(&[("w", &[0.3, -1.7, 1e-3])]);
        let f1 = ckpt(&[("w", &[0.9, -1.1, -4e-3])]);
        let f2 = ckpt(&[("w", &[-0.2, 0.6, 8.0])]);
        let t1 = diff(&f1, &pre).unwrap();
        let t2 = diff(&f2, &pre).unwrap();
        let avg = apply(&pre, &ArithExpr::sum_of([t1, t2]), 0.5).unwrap();
        let got = avg.weights.get("w").unwrap().data();
        for i in 0..3 {
            let want = 0.5 * (f1.weights.get("w").unwrap().data()[i] as f64
                + f2.weights.get("w").unwrap().data()[i] as f64);
            assert!((got[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn apply_rejects_non_finite_result() {
        let base = ckpt(&[("w", &[f32::MAX])]);
        let t = tv(&[("w", &[f32::MAX])]);
        assert!(matches!(
            apply(&base, &ArithExpr::leaf(t), 2.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn eval_expr_matches_direct_ops() {
        let ta = tv(&[("w", &[1.0, 2.5]), ("b", &[0.1])]);
        let tb = tv(&[("w", &[-3.0, 0.7]), ("b", &[0.2])]);
        let tc = tv(&[("w", &[0.3, 0.3]), ("b", &[-0.9])]);

        let n = eval_expr(&ArithExpr::neg(ArithExpr::leaf(ta.clone()))).unwrap();
        assert_eq!(n.delta, negate(&ta).delta);

        let s = eval_expr(&ArithExpr::scaled(2.0, ArithExpr::leaf(ta.clone()))).unwrap();
        assert_eq!(s.delta, sum(&[ta.clone(), ta.clone()]).unwrap().delta);

        let e = ArithExpr::Sum(vec![
            ArithExpr::leaf(tc.clone()),
            ArithExpr::leaf(tb.clone()),
            ArithExpr::neg(ArithExpr::leaf(ta.clone())),
        ]);
        assert_eq!(
            eval_expr(&e).unwrap().delta,
            analogy(&ta, &tb, &tc).unwrap().delta
        );
    }

    #[test]
    fn random_matched_preserves_layer_norms() {
        let t = tv(&[
            ("a", &[3.0, 4.0, 0.5, -2.0]),
            ("b", &[1e-3, -2e-3]),
            ("c", &[10.0, 0.0, -7.0, 1.0, 1.0, 2.0]),
        ]);
        let r = random_matched(&t, 42);
        let want = per_layer_norms(&t);
        let got = per_layer_norms(&r);
        for (name, w) in &want {
            assert!((got[name] - w).abs() / w < 1e-6, "{name}");
        }
        assert_eq!(r.provenance.kind, VectorKind::RandomMatched);
        assert_eq!(random_matched(&t, 42).delta, r.delta);
        assert_ne!(random_matched(&t, 43).delta, r.delta);
    }

    #[test]
    fn random_matched_zero_layer_stays_zero() {
        let t = tv(&[("a", &[0.0, 0.0]), ("b", &[1.0, 1.0])]);
        let r = random_matched(&t, 1);
        assert_eq!(values(&r, "a"), vec![0.0, 0.0]);
        assert!(per_layer_norms(&r)["b"] > 0.0);
    }

    #[test]
    fn random_matched_streams_are_per_name() {
        // Adding another tensor must not change the draws for existing ones.
        let t1 = tv(&[("m", &[1.0, 2.0, 3.0])]);
        let t2 = tv(&[("a", &[5.0]), ("m", &[1.0, 2.0, 3.0])]);
        assert_eq!(values(&random_matched(&t1, 9), "m"), values(&random_matched(&t2, 9), "m"));
    }

    #[test]
    fn cosine_examples() {
        let t = tv(&[("w", &[0.3, -1.2]), ("b", &[2.0])]);
        assert!((cosine(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&t, &negate(&t)).unwrap() + 1.0).abs() < 1e-12);
        let t1 = tv(&[("w", &[1.0, 0.0])]);
        let t2 = tv(&[("w", &[1.0, 1.0])]);
        assert!((cosine(&t1, &t2).unwrap() - 0.7071067811865475).abs() < 1e-12);
        let z = tv(&[("w", &[0.0, 0.0])]);
        assert_eq!(cosine(&z, &t1).unwrap_err().to_string(), "zero-norm task vector");
    }

    #[test]
    fn per_layer_norm_examples() {
        assert_eq!(per_layer_norms(&tv(&[("w", &[3.0, 4.0])]))["w"], 5.0);
        assert_eq!(per_layer_norms(&tv(&[("w", &[0.0, 0.0])]))["w"], 0.0);
    }

    #[test]
    fn task_vector_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tvkp");
        let t = tv(&[("w", &[1.0, -2.0]), ("b", &[0.5])]);
        let arch = Digest::of_bytes(b"arch");
        save_task_vector(&t, arch, &path).unwrap();
        let (back, digest) = load_task_vector(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(digest, arch);
        let raw = crate::tensor_store::load_tvkp(&path).unwrap();
        assert_eq!(raw.meta.note, "taskvector");
    }

    fn arb_triple() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
        (1usize..12).prop_flat_map(|n| {
            let v = || prop::collection::vec(-100f32..100f32, n);
            (v(), v(), v())
        })
    }

    proptest! {
        #[test]
        fn sum_commutes_and_associates((a, b, c) in arb_triple()) {
            let (a, b, c) = (tv(&[("w", &a)]), tv(&[("w", &b)]), tv(&[("w", &c)]));
            let abc = sum(&[a.clone(), b.clone(), c.clone()]).unwrap();
            let cba = sum(&[c.clone(), b.clone(), a.clone()]).unwrap();
            let nested = sum(&[sum(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
            for ((x, y), z) in values(&abc, "w").iter().zip(values(&cba, "w")).zip(values(&nested, "w")) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
                prop_assert!((x - z).abs() <= 1e-5 * x.abs().max(1.0));
            }
        }

        #[test]
        fn apply_is_linear_in_coeff(
            base in prop::collection::vec(-1f32..1f32, 6),
            t in prop::collection::vec(-1f32..1f32, 6),
            a in -1.0f64..1.0,
            b in -1.0f64..1.0,
        ) {
            let base = ckpt(&[("w", &base)]);
            let expr = ArithExpr::leaf(tv(&[("w", &t)]));
            let once = apply(&base, &expr, a + b).unwrap();
            let twice = apply(&apply(&base, &expr, a).unwrap(), &expr, b).unwrap();
            for (x, y) in once.weights.get("w").unwrap().data().iter().zip(twice.weights.get("w").unwrap().data()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn cosine_symmetric_bounded_scale_invariant((a, b, _) in arb_triple(), k_exp in -6i32..7) {
            // powers of two scale f32 data exactly
            let k = 2f64.powi(k_exp);
            let (a, b) = (tv(&[("w", &a)]), tv(&[("w", &b)]));
            prop_assume!(a.global_norm() > 0.0 && b.global_norm() > 0.0);
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((ab - cosine(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
            let scaled = scale(&a, k);
            prop_assert!((cosine(&scaled, &b).unwrap() - ab).abs() < 1e-12);
            prop_assert!((cosine(&a, &scale(&b, k)).unwrap() - ab).abs() < 1e-12);
        }

        #[test]
        fn random_matched_norms_hold((a, b, _) in arb_triple(), seed in any::<u64>()) {
            let t = tv(&[("a", &a), ("b", &b)]);
            let r = random_matched(&t, seed);
            let (want, got) = (per_layer_norms(&t), per_layer_norms(&r));
            for (n, w) in want {
                if w == 0.0 { prop_assert_eq!(got[&n], 0.0); }
                else { prop_assert!((got[&n] - w).abs() / w < 1e-6); }
            }
        }
    }
}
