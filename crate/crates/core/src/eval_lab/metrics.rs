//! Accuracy, correlation and cosine metrics.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mini_net::{MlpSpec, Network};
use crate::task_suite::{Dataset, Samples, Split};
use crate::tensor_store::Checkpoint;
use crate::vector_arith::{cosine, diff, TaskVector};

/// Predicted in-block class per row; ties go to the lowest index.
pub fn predictions(logits: &Array2<f64>, samples: &Samples) -> Result<Vec<usize>> {
    samples
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if b.end() > logits.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "class block {}..{} exceeds head width {}",
                    b.offset,
                    b.end(),
                    logits.ncols()
                )));
            }
            let row = logits.slice(s![i, b.offset..b.end()]);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Fraction of rows whose in-block argmax matches the label.
pub fn accuracy_from_logits(logits: &Array2<f64>, samples: &Samples) -> Result<f64> {
    let labels = samples
        .labels
        .as_ref()
        .ok_or_else(|| Error::EmptyData("accuracy needs labels".into()))?;
    if samples.is_empty() {
        return Err(Error::EmptyData("empty evaluation split".into()));
    }
    let preds = predictions(logits, samples)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / samples.len() as f64)
}

pub fn accuracy_samples(ckpt: &Checkpoint, spec: &MlpSpec, samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyData("empty evaluation split".into()));
    }
    let logits = Network::new(ckpt, spec)?.logits(&samples.inputs)?;
    accuracy_from_logits(&logits, samples)
}

pub fn accuracy(ckpt: &Checkpoint, spec: &MlpSpec, data: &Dataset, split: Split) -> Result<f64> {
    accuracy_samples(ckpt, spec, &data.samples(split))
}

pub fn normalized_accuracy(acc: f64, finetuned_acc: f64) -> Result<f64> {
    if finetuned_acc <= 0.0 {
        return Err(Error::Undefined(
            "normalized accuracy with zero fine-tuned accuracy".into(),
        ));
    }
    Ok(acc / finetuned_acc)
}

/// Accuracy of the argmax over `(1 - alpha) * f1(x) + alpha * f2(x)`.
pub fn ensemble_accuracy(
    a: &Checkpoint,
    b: &Checkpoint,
    alpha: f64,
    spec: &MlpSpec,
    samples: &Samples,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let la = Network::new(a, spec)?.logits(&samples.inputs)?;
    let lb = Network::new(b, spec)?.logits(&samples.inputs)?;
    let mixed = if alpha == 0.0 {
        la
    } else if alpha == 1.0 {
        lb
    } else {
        la * (1.0 - alpha) + lb * alpha
    };
    accuracy_from_logits(&mixed, samples)
}

/// Pairwise cosine similarities; symmetric by construction.
pub fn cosine_matrix(ts: &[TaskVector]) -> Result<Vec<Vec<f64>>> {
    let n = ts.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = cosine(&ts[i], &ts[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    /// `None` where the intermediate vector is zero (the start of the run).
    pub cosine: Option<f64>,
}

/// Cosine between each snapshot's displacement from `pre` and `final_tv`.
pub fn trajectory_cosines(
    snapshots: &[(u64, Checkpoint)],
    pre: &Checkpoint,
    final_tv: &TaskVector,
) -> Result<Vec<TrajectoryPoint>> {
    if snapshots.is_empty() {
        return Err(Error::EmptyData("no snapshots".into()));
    }
    snapshots
        .iter()
        .map(|(step, ckpt)| {
            let tv = diff(ckpt, pre)?;
            let cosine = match cosine(&tv, final_tv) {
                Ok(c) => Some(c),
                Err(Error::ZeroNorm) if tv.is_zero() => None,
                Err(e) => return Err(e),
            };
            Ok(TrajectoryPoint { step: *step, cosine })
        })
        .collect()
}

/// Sample Pearson correlation with `f64` accumulation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "pearson over {} and {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Undefined("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("pearson of a constant list".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "spearman over {} and {} values",
            xs.len(),
            ys.len()
        )));
    }
    pearson(&ranks(xs), &ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mini_net::init_model;
    use crate::task_suite::ClassBlock;
    use crate::tensor_store::{Tensor, TensorMap};
    use crate::vector_arith::{negate, Provenance, VectorKind};
    use proptest::prelude::*;

    fn samples(labels: Vec<usize>, count: usize) -> Samples {
        let n = labels.len();
        Samples {
            inputs: Array2::zeros((n, 2)),
            labels: Some(labels),
            blocks: vec![ClassBlock { offset: 0, count }; n],
        }
    }

    fn tv(values: &[f32]) -> TaskVector {
        let mut delta = TensorMap::new();
        delta
            .insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        TaskVector {
            delta,
            provenance: Provenance {
                pre_hash: crate::tensor_store::Digest::of_bytes(b""),
                ft_hash: None,
                task_id: "t".into(),
                kind: VectorKind::FinetuneDiff,
            },
        }
    }

    #[test]
    fn accuracy_examples() {
        let s = samples(vec![0, 1, 2, 3, 0, 1, 2, 3], 4);
        let constant = Array2::from_shape_fn((8, 4), |(_, j)| if j == 2 { 1.0 } else { 0.0 });
        assert_eq!(accuracy_from_logits(&constant, &s).unwrap(), 0.25);
        let perfect = Array2::from_shape_fn((8, 4), |(i, j)| if j == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(accuracy_from_logits(&perfect, &s).unwrap(), 1.0);
        let shifted = &perfect + &Array2::from_shape_fn((8, 4), |(i, _)| i as f64 * 3.5 - 7.0);
        assert_eq!(accuracy_from_logits(&shifted, &s).unwrap(), 1.0);
        // All-equal logits predict class 0.
        let flat = Array2::zeros((8, 4));
        assert_eq!(predictions(&flat, &s).unwrap(), vec![0; 8]);
        assert!(accuracy_from_logits(&Array2::zeros((0, 4)), &samples(vec![], 4)).is_err());
    }

    #[test]
    fn accuracy_respects_class_blocks() {
        let mut s = samples(vec![1, 1], 2);
        s.blocks = vec![ClassBlock { offset: 0, count: 2 }, ClassBlock { offset: 2, count: 2 }];
        // Row 0 best overall is column 3, but its block is 0..2.
        let logits = Array2::from_shape_vec((2, 4), vec![0.0, 1.0, 0.0, 9.0, 9.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(predictions(&logits, &s).unwrap(), vec![1, 1]);
    }

    #[test]
    fn normalized_examples() {
        assert_eq!(normalized_accuracy(0.37, 0.37).unwrap(), 1.0);
        assert_eq!(normalized_accuracy(0.45, 0.90).unwrap(), 0.5);
        assert!(normalized_accuracy(0.4, 0.0).is_err());
    }

    #[test]
    fn ensemble_endpoints() {
        let spec = MlpSpec {
            input_dim: 3,
            trunk_widths: vec![5],
            activation: Default::default(),
            num_classes: 4,
            recon_dim: 0,
        };
        let a = init_model(&spec, 1);
        let b = init_model(&spec, 2);
        let s = Samples {
            inputs: Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 5.0 - 1.0),
            labels: Some((0..40).map(|i| i % 4).collect()),
            blocks: vec![ClassBlock { offset: 0, count: 4 }; 40],
        };
        let acc_a = accuracy_samples(&a, &spec, &s).unwrap();
        let acc_b = accuracy_samples(&b, &spec, &s).unwrap();
        assert_eq!(ensemble_accuracy(&a, &b, 0.0, &spec, &s).unwrap(), acc_a);
        assert_eq!(ensemble_accuracy(&a, &b, 1.0, &spec, &s).unwrap(), acc_b);
        for alpha in [0.1, 0.5, 0.9] {
            assert_eq!(ensemble_accuracy(&a, &a, alpha, &spec, &s).unwrap(), acc_a);
        }
        let other = MlpSpec { trunk_widths: vec![6], ..spec.clone() };
        assert!(matches!(
            ensemble_accuracy(&a, &init_model(&other, 1), 0.5, &spec, &s),
            Err(Error::ArchMismatch { .. })
        ));
    }

    #[test]
    fn cosine_matrix_examples() {
        let t = tv(&[1.0, 2.0, -1.0]);
        assert_eq!(cosine_matrix(std::slice::from_ref(&t)).unwrap(), vec![vec![1.0]]);
        let m = cosine_matrix(&[t.clone(), negate(&t)]).unwrap();
        assert!((m[0][1] + 1.0).abs() < 1e-12);
        let m = cosine_matrix(&[tv(&[1.0, 0.0, 3.0, 0.0]), tv(&[0.0, 2.0, 0.0, -5.0])]).unwrap();
        assert_eq!(m[0][1], 0.0);
        assert!(matches!(cosine_matrix(&[t, tv(&[0.0; 3])]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.5];
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        // sxy = 5, sxx = 2, syy = 114/9, so r = 15 / sqrt(228)
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap() - 15.0 / 228f64.sqrt()).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_uses_average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 10.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cosine_matrix_is_symmetric_with_unit_diagonal(
            rows in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 6), 1..6)
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let ts: Vec<TaskVector> = rows.iter().map(|r| tv(r)).collect();
            let m = cosine_matrix(&ts).unwrap();
            for i in 0..ts.len() {
                prop_assert!((m[i][i] - 1.0).abs() < 1e-12);
                for j in 0..ts.len() {
                    prop_assert!((m[i][j] - m[j][i]).abs() < 1e-12);
                    prop_assert!(m[i][j].abs() <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn pearson_is_bounded_and_symmetric(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20)
        ) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            if let Ok(r) = pearson(&xs, &ys) {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((r - pearson(&ys, &xs).unwrap()).abs() < 1e-12);
            }
        }
    }
}
