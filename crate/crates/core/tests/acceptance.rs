//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary so the lines always reach the output.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taskvec::eval_lab::*;
use taskvec::mini_net::{init_model, loss_and_grads, Activation, MlpSpec, Objective};
use taskvec::task_suite::{ClassBlock, Samples};
use taskvec::tensor_store::{decode_tvkp, encode_tvkp, TvkpFile};
use taskvec::vector_arith::{analogy, apply, apply_vector, negate, sum, ArithExpr, TaskVector};
use taskvec::Error;

type Outcome = std::result::Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: taskvec::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Position of `v` on the integer line of ordered `f32` values.
fn ordered(v: f32) -> i64 {
    let b = v.to_bits() as i32 as i64;
    if b < 0 {
        i32::MIN as i64 - b
    } else {
        b
    }
}

fn ulps(a: f32, b: f32) -> i64 {
    (ordered(a) - ordered(b)).abs()
}

fn ulp(x: f32) -> f32 {
    let a = x.abs();
    f32::from_bits(a.to_bits() + 1) - a
}

fn pairs_of<'a>(a: &'a TaskVector, b: &'a TaskVector) -> impl Iterator<Item = (f32, f32)> + 'a {
    a.delta
        .iter()
        .flat_map(move |(n, t)| t.data().iter().copied().zip(b.delta.get(n).unwrap().data().iter().copied()))
}

fn identities(lab: &Lab) -> Outcome {
    let data = ok(lab.finetune_all(&[
        taskvec::task_suite::make_task(&taskvec::task_suite::target_spec(1, 0)).unwrap(),
        taskvec::task_suite::make_task(&taskvec::task_suite::target_spec(2, 0)).unwrap(),
        taskvec::task_suite::make_task(&taskvec::task_suite::target_spec(3, 0)).unwrap(),
    ]))?;
    let pre = &lab.pretrained;
    let (a, b, c) = (&data[0], &data[1], &data[2]);

    let noop = ok(apply_vector(pre, &a.tau, 0.0, "noop"))?;
    check!(noop.weights == pre.weights, "lambda=0 changed the weights");
    check!(negate(&negate(&a.tau)).delta == a.tau.delta, "double negation is not exact");

    let s = ok(sum(&[a.tau.clone(), b.tau.clone()]))?;
    for (got, (x, y)) in pairs_of(&s, &a.tau).map(|p| p.0).zip(pairs_of(&a.tau, &b.tau)) {
        check!(got == (x as f64 + y as f64) as f32, "sum is not the rounded f64 sum");
    }
    let an = ok(analogy(&a.tau, &b.tau, &c.tau))?;
    let oracle: Vec<f32> = pairs_of(&c.tau, &b.tau)
        .zip(a.tau.delta.iter().flat_map(|(_, t)| t.data().to_vec()))
        .map(|((z, y), x)| (z as f64 + y as f64 - x as f64) as f32)
        .collect();
    let got: Vec<f32> = an.delta.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    check!(got == oracle, "analogy differs from c + b - a");

    let avg = ok(apply(pre, &ArithExpr::sum_of([a.tau.clone(), b.tau.clone()]), 0.5))?;
    let mut worst = 0f64;
    for (name, t) in avg.weights.iter() {
        let (x, y) = (a.ckpt.weights.get(name).unwrap(), b.ckpt.weights.get(name).unwrap());
        for ((v, p), q) in t.data().iter().zip(x.data()).zip(y.data()) {
            worst = worst.max((*v as f64 - 0.5 * (*p as f64 + *q as f64)).abs());
        }
    }
    check!(worst <= 1e-6, "lambda=0.5 sum differs from the weight average by {worst:e}");

    // lambda=1 recovery. Where pre and ft share a sign and are within a
    // factor of two the stored difference is exact and so is the recovery;
    // everywhere the error is bounded by one ulp of the stored delta element.
    let rec = ok(apply_vector(pre, &a.tau, 1.0, "recover"))?;
    let (mut total, mut beyond, mut max_u) = (0usize, 0usize, 0i64);
    for (name, r) in rec.weights.iter() {
        let (f, p, d) = (
            a.ckpt.weights.get(name).unwrap().data(),
            pre.weights.get(name).unwrap().data(),
            a.tau.delta.get(name).unwrap().data(),
        );
        for i in 0..r.numel() {
            let got = r.data()[i];
            let err = (got as f64 - f[i] as f64).abs();
            check!(err <= ulp(d[i]) as f64, "{name}[{i}]: error {err:e} exceeds one ulp of the delta {}", d[i]);
            let sterbenz = p[i].signum() == f[i].signum() && p[i].abs() / 2.0 <= f[i].abs() && f[i].abs() <= 2.0 * p[i].abs();
            check!(!sterbenz || got == f[i], "{name}[{i}]: exact difference but inexact recovery");
            let u = ulps(got, f[i]);
            total += 1;
            beyond += (u > 1) as usize;
            max_u = max_u.max(u);
        }
    }
    check!(
        beyond == 0,
        "lambda=1 recovery: {beyond} of {total} elements beyond 1 ulp of ft (max {max_u}); \
         all within 1 ulp of the f32 delta, which bounds any f32 task vector"
    );
    Ok(format!("recovery max {max_u} ulp, average err {worst:.1e}"))
}

/// Plain-loop `f64` reference loss over a parameter map.
fn oracle_loss(spec: &MlpSpec, params: &BTreeMap<String, Vec<f64>>, batch: &Samples, objective: Objective) -> f64 {
    let affine = |name: &str, x: &[f64], out: usize| -> Vec<f64> {
        let w = &params[&format!("{name}.weight")];
        let b = &params[&format!("{name}.bias")];
        (0..out)
            .map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
            .collect()
    };
    let mut total = 0.0;
    for r in 0..batch.len() {
        let x0: Vec<f64> = batch.inputs.row(r).iter().map(|&v| v as f64).collect();
        let mut h = x0.clone();
        for (k, &w) in spec.trunk_widths.iter().enumerate() {
            h = affine(&format!("trunk.{k}"), &h, w)
                .into_iter()
                .map(|z| match spec.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => z.max(0.0),
                })
                .collect();
        }
        total += match objective {
            Objective::Reconstruction => {
                let rec = affine("head.recon", &h, spec.recon_dim);
                rec.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / spec.recon_dim as f64
            }
            _ => {
                let z = affine("head.cls", &h, spec.num_classes);
                let blk = batch.blocks[r];
                let zs = &z[blk.offset..blk.end()];
                let ce = zs.iter().map(|v| v.exp()).sum::<f64>().ln() - zs[batch.labels.as_ref().unwrap()[r]];
                if objective == Objective::NegatedCrossEntropy {
                    -ce
                } else {
                    ce
                }
            }
        };
    }
    total / batch.len() as f64
}

fn gradient_oracle() -> Outcome {
    let objectives = [Objective::CrossEntropy, Objective::Reconstruction, Objective::NegatedCrossEntropy];
    let mut worst = 0f64;
    let configs = 12u64;
    for k in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
        let input_dim = rng.random_range(2..7);
        let depth = rng.random_range(1..3);
        let spec = MlpSpec {
            input_dim,
            trunk_widths: (0..depth).map(|_| rng.random_range(2..9)).collect(),
            activation: Activation::Tanh,
            num_classes: rng.random_range(2..8),
            recon_dim: input_dim,
        };
        let rows = rng.random_range(2..7);
        let inputs = Array2::from_shape_fn((rows, input_dim), |_| rng.random_range(-1.5f32..1.5));
        let blocks: Vec<ClassBlock> = (0..rows)
            .map(|_| {
                let offset = rng.random_range(0..spec.num_classes - 1);
                ClassBlock {
                    offset,
                    count: rng.random_range(2..=spec.num_classes - offset),
                }
            })
            .collect();
        let labels = blocks.iter().map(|b| rng.random_range(0..b.count)).collect();
        let batch = Samples {
            inputs,
            labels: Some(labels),
            blocks,
        };
        let objective = objectives[k as usize % 3];
        let ckpt = init_model(&spec, k);
        let (_, grads) = ok(loss_and_grads(&ckpt, &spec, &batch, objective))?;
        let base: BTreeMap<String, Vec<f64>> = ckpt
            .weights
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|&v| v as f64).collect()))
            .collect();
        let h = 1e-3;
        for (name, g) in grads.iter() {
            for i in 0..g.numel() {
                let mut plus = base.clone();
                plus.get_mut(name).unwrap()[i] += h;
                let mut minus = base.clone();
                minus.get_mut(name).unwrap()[i] -= h;
                let numeric =
                    (oracle_loss(&spec, &plus, &batch, objective) - oracle_loss(&spec, &minus, &batch, objective)) / (2.0 * h);
                let analytic = g.data()[i] as f64;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        if objective == Objective::CrossEntropy {
            let (l1, g1) = ok(loss_and_grads(&ckpt, &spec, &batch, Objective::CrossEntropy))?;
            let (l2, g2) = ok(loss_and_grads(&ckpt, &spec, &batch, Objective::NegatedCrossEntropy))?;
            check!(l1 == -l2, "negated loss {l2} is not -{l1}");
            for (name, t) in g1.iter() {
                let neg: Vec<f32> = t.data().iter().map(|v| -v).collect();
                check!(g2.get(name).unwrap().data() == &neg[..], "negated gradient of {name} is not exact");
            }
        }
    }
    check!(worst < 1e-4, "worst relative error {worst:e}");
    Ok(format!("{configs} configs, worst relative error {worst:.1e}"))
}

fn forgetting(lab: &Lab) -> Outcome {
    let rep = ok(run_forgetting(lab, 4))?;
    let s = |k: &str| ok(rep.summary_value(k));
    let drop = s("negation_drop")?;
    check!(drop >= 0.15, "negation drop {drop:.3} < 0.15");
    for r in rep.rows_with_edit(NEGATIVE_TASK_VECTOR).filter(|r| r.group != "mean") {
        let (cv, pv) = (r.baselines["control_val"], r.baselines["pretrained_control_val"]);
        check!(cv >= 0.95 * pv, "{}: control val {cv:.3} < 0.95 x {pv:.3}", r.group);
    }
    let (neg_c, pre_c) = (s("negative_task_vector.control")?, s("pretrained.control")?);
    check!(neg_c >= 0.95 * pre_c, "negation control test {neg_c:.3} < 0.95 x {pre_c:.3}");
    let rdrop = s("random_drop")?;
    check!(rdrop < drop / 2.0, "random drop {rdrop:.3} not below half of {drop:.3}");
    let ga = s("gradient_ascent.control")?;
    check!(ga < 0.95 * pre_c, "gradient ascent control {ga:.3} did not fall below 0.95 x {pre_c:.3}");
    Ok(format!(
        "negation drop {drop:.3}, control {neg_c:.3}/{pre_c:.3}, random drop {rdrop:.3}, ascent control {ga:.3}"
    ))
}

fn addition(lab: &Lab) -> Outcome {
    let rep = ok(run_addition(lab, 8, SubsetMode::AllSubsets, false))?;
    let pair_rows: Vec<f64> = rep
        .rows_with_edit(ADDED)
        .filter(|r| r.baselines.get("size") == Some(&2.0))
        .map(|r| r.baselines["mean_normalized_subset"])
        .collect();
    check!(pair_rows.len() == 28, "{} pair rows", pair_rows.len());
    let subsets = rep.rows_with_edit(ADDED).count();
    check!(subsets == 255, "{subsets} subset rows");
    let pairs = pair_rows.iter().sum::<f64>() / 28.0;
    check!(pairs >= 0.85, "pair mean normalized accuracy {pairs:.3} < 0.85");
    let buckets: Vec<f64> = (1..=8)
        .map(|k| rep.summary_value(&format!("size.{k}.normalized_all")))
        .collect::<taskvec::Result<_>>()
        .map_err(|e| e.to_string())?;
    for k in 1..buckets.len() {
        check!(
            buckets[k] >= buckets[k - 1] - 0.02,
            "bucket {} ({:.3}) below bucket {} ({:.3})",
            k + 1,
            buckets[k],
            k,
            buckets[k - 1]
        );
    }
    Ok(format!(
        "pairs {pairs:.3}, buckets {}",
        buckets.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ")
    ))
}

fn analogy_grid(config: &LabConfig) -> Outcome {
    let rep = ok(run_analogy_suite(config, &[0, 1, 2], &[1, 2, 4]))?;
    let runs = ok(rep.summary_value("runs"))?;
    check!(runs == 12.0, "{runs} runs instead of 12");
    let gain = ok(rep.summary_value("zero_shot.gain"))?;
    check!(gain >= 0.02, "zero-shot gain {gain:.3} < 0.02");
    let mut parts = vec![format!("zero-shot gain {gain:.3}")];
    for k in [1, 2, 4] {
        let a = ok(rep.summary_value(&format!("fewshot.{k}.analogy")))?;
        let p = ok(rep.summary_value(&format!("fewshot.{k}.pretrained")))?;
        check!(a >= p - 0.01, "{k}-shot: edited start {a:.3} < pre-trained start {p:.3} - 0.01");
        parts.push(format!("{k}-shot {a:.3} vs {p:.3}"));
    }
    Ok(parts.join(", "))
}

fn domain(lab: &Lab) -> Outcome {
    let rep = ok(run_domain_generalization(lab))?;
    let v = |k: &str| ok(rep.summary_value(k));
    let (p, aux, an, tgt) = (v(PRETRAINED)?, v(FINETUNED_AUX)?, v(ANALOGY)?, v(FINETUNED_TARGET)?);
    let line = format!("{p:.3} < {aux:.3} < {an:.3} <= {tgt:.3}");
    check!(p < aux && aux < an && an <= tgt, "ordering violated: {line}");
    Ok(line)
}

fn ensemble(lab: &Lab) -> Outcome {
    let rep = ok(run_ensemble_study(lab, 8, &all_pairs(8)))?;
    let n = rep.rows.len();
    check!(n >= 20, "only {n} pairs");
    let r = ok(rep.summary_value("pearson"))?;
    check!(r >= 0.9, "pearson {r:.3} < 0.9");
    let err = ok(rep.summary_value("identity_max_abs_err"))?;
    check!(err <= 1e-6, "weight-average identity off by {err:e}");
    Ok(format!("{n} pairs, pearson {r:.4}"))
}

fn cosine(lab: &Lab) -> Outcome {
    let rep = ok(run_cosine_study(lab, 8))?;
    let v = |k: &str| ok(rep.summary_value(k));
    let (sym, diag) = (v("symmetry_max_err")?, v("diagonal_max_err")?);
    check!(sym <= 1e-12 && diag <= 1e-12, "symmetry {sym:e}, diagonal {diag:e}");
    let (off, same) = (v("mean_abs_offdiag")?, v("same_task_mean")?);
    check!(off < same, "unrelated {off:.3} not below same-task {same:.3}");
    Ok(format!("mean |off-diagonal| {off:.3} < same-task {same:.3}"))
}

fn trajectory(lab: &Lab) -> Outcome {
    let rep = ok(run_trajectory(lab, 1, 20))?;
    let rho = ok(rep.summary_value("spearman"))?;
    let fin = ok(rep.summary_value("final_cosine"))?;
    check!(rho >= 0.8, "spearman {rho:.3} < 0.8");
    check!((fin - 1.0).abs() <= 1e-6, "final cosine {fin}");
    Ok(format!("spearman {rho:.3}, final cosine {fin}"))
}

fn serialization(lab: &Lab) -> Outcome {
    let file = TvkpFile {
        weights: lab.pretrained.weights.clone(),
        meta: lab.pretrained.meta.clone(),
        provenance: None,
    };
    let bytes = ok(encode_tvkp(&file))?;
    let back = ok(decode_tvkp(&bytes))?;
    check!(back == file, "roundtrip changed the file");
    let bits = |f: &TvkpFile| f.weights.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    check!(bits(&back) == bits(&file), "roundtrip is not bit-exact");
    check!(ok(encode_tvkp(&back))? == bytes, "re-encoding changed the bytes");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    check!(matches!(decode_tvkp(&bad), Err(Error::BadMagic)), "bad magic not detected");
    let short = &bytes[..bytes.len() - 3];
    check!(
        matches!(decode_tvkp(short), Err(Error::TruncatedPayload { .. })),
        "truncation not detected: {:?}",
        decode_tvkp(short).err()
    );

    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    let tensors = header["tensors"].as_object_mut().unwrap();
    let second = tensors.keys().nth(1).unwrap().clone();
    tensors.get_mut(&second).unwrap()["offset"] = 0.into();
    let text = serde_json::to_vec(&header).unwrap();
    let mut overlap = bytes[..8].to_vec();
    overlap.extend_from_slice(&(text.len() as u64).to_le_bytes());
    overlap.extend_from_slice(&text);
    overlap.extend_from_slice(&bytes[16 + header_len..]);
    check!(
        matches!(decode_tvkp(&overlap), Err(Error::OverlappingOffsets { .. })),
        "overlap not detected: {:?}",
        decode_tvkp(&overlap).err()
    );
    Ok(format!("{} bytes roundtrip; bad magic, truncation, overlap rejected", bytes.len()))
}

fn main() {
    let config = LabConfig::default();
    let lab = Lab::new(config.clone()).expect("pre-training succeeds");
    let lab = &lab;
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("algebraic identities", Box::new(|| identities(lab))),
        ("gradient oracle", Box::new(gradient_oracle)),
        ("forgetting", Box::new(|| forgetting(lab))),
        ("addition", Box::new(|| addition(lab))),
        ("analogy grid", Box::new(|| analogy_grid(&config))),
        ("domain generalization", Box::new(|| domain(lab))),
        ("ensemble correlation", Box::new(|| ensemble(lab))),
        ("cosine structure", Box::new(|| cosine(lab))),
        ("trajectory convergence", Box::new(|| trajectory(lab))),
        ("serialization", Box::new(|| serialization(lab))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
