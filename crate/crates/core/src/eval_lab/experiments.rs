//! Experiment protocols built on a [`Lab`].

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff_search::{select_max, select_negation, sweep, sweep_three, sweep_two, Metrics, NegationChoice, SweepResult};
use crate::error::{Error, Result};
use crate::eval_lab::lab::{FineTuned, Lab, LabConfig};
use crate::eval_lab::metrics::{
    accuracy, accuracy_samples, cosine_matrix, ensemble_accuracy, normalized_accuracy, spearman, trajectory_cosines,
};
use crate::eval_lab::report::{EvalReport, PlotSeries, ReportRow};
use crate::mini_net::{Objective, TrainConfig};
use crate::task_suite::{
    analogy_triple, make_domain_pair_seeded, make_grid_seeded, make_task, target_bank, target_spec, Dataset, Samples, Split,
    BANK_SIZE,
};
use crate::tensor_store::Checkpoint;
use crate::vector_arith::{analogy, apply, apply_terms, apply_vector, cosine, random_matched, ArithExpr};

pub const PRETRAINED: &str = "pretrained";
pub const FINETUNED: &str = "finetuned";
pub const GRADIENT_ASCENT: &str = "gradient_ascent";
pub const RANDOM_VECTOR: &str = "random_vector";
pub const NEGATIVE_TASK_VECTOR: &str = "negative_task_vector";
pub const FORGET_METHODS: [&str; 5] = [PRETRAINED, FINETUNED, GRADIENT_ASCENT, RANDOM_VECTOR, NEGATIVE_TASK_VECTOR];

fn bank(lab: &Lab, n: usize) -> Result<Vec<Dataset>> {
    target_bank(n, lab.config.seed).iter().map(make_task).collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn report(lab: &Lab, id: &str) -> EvalReport {
    EvalReport::new(id, lab.digest(), vec![lab.config.seed])
}

fn target_eval<'a>(lab: &'a Lab, data: &'a Dataset) -> impl Fn(&Checkpoint) -> Result<Metrics> + Sync + 'a {
    move |c| {
        Ok(Metrics {
            target: accuracy(c, lab.spec(), data, Split::Val)?,
            control: None,
        })
    }
}

// ---------------------------------------------------------------- forgetting

fn forget_rows(lab: &Lab, ft: &FineTuned, index: usize) -> Result<Vec<ReportRow>> {
    let spec = lab.spec();
    let pre = &lab.pretrained;
    let task = &ft.data;
    let id = task.spec.task_id.as_str();
    let row = |edit: &str, ckpt: &Checkpoint, coeffs: Vec<f64>| -> Result<ReportRow> {
        let mut r = ReportRow::new(id, edit);
        r.accuracy.insert("target".into(), accuracy(ckpt, spec, task, Split::Test)?);
        r.accuracy.insert("control".into(), accuracy(ckpt, spec, &lab.control, Split::Test)?);
        r.coeffs = coeffs;
        Ok(r)
    };
    let eval_val = |c: &Checkpoint| {
        Ok(Metrics {
            target: accuracy(c, spec, task, Split::Val)?,
            control: Some(accuracy(c, spec, &lab.control, Split::Val)?),
        })
    };
    let negation_row = |edit: &str, expr: ArithExpr| -> Result<ReportRow> {
        let sw = sweep(pre, &expr, &lab.config.grid, &eval_val)?;
        let choice = select_negation(&sw, lab.control_val)?;
        let edited = apply(pre, &expr, choice.lambda)?;
        let mut r = row(edit, &edited, vec![choice.lambda])?;
        add_negation_baselines(&mut r, &sw, &choice, lab.control_val);
        Ok(r)
    };

    let ga_cfg = TrainConfig {
        objective: Objective::NegatedCrossEntropy,
        seed: lab.config.seed,
        ..lab.config.finetune.clone()
    };
    let ga = lab.finetune_with(task, &ga_cfg)?;
    let noise = random_matched(&ft.tau, lab.config.seed ^ (index as u64 + 1));
    Ok(vec![
        row(PRETRAINED, pre, vec![])?,
        row(FINETUNED, &ft.ckpt, vec![1.0])?,
        row(GRADIENT_ASCENT, &ga.ckpt, vec![])?,
        negation_row(RANDOM_VECTOR, ArithExpr::neg(ArithExpr::leaf(noise)))?,
        negation_row(NEGATIVE_TASK_VECTOR, ArithExpr::neg(ArithExpr::leaf(ft.tau.clone())))?,
    ])
}

fn add_negation_baselines(r: &mut ReportRow, sw: &SweepResult, choice: &NegationChoice, pre_control_val: f64) {
    let control_val = match choice.row {
        Some(i) => sw.rows[i].control_metric.expect("checked by select_negation"),
        None => pre_control_val,
    };
    r.baselines.insert("control_val".into(), control_val);
    r.baselines.insert("pretrained_control_val".into(), pre_control_val);
    r.baselines.insert("threshold".into(), choice.threshold);
    r.baselines.insert("warning".into(), if choice.warning { 1.0 } else { 0.0 });
}

/// Negation protocol over the first `n_tasks` bank tasks: five methods per
/// task, each with target and control test accuracy.
pub fn run_forgetting(lab: &Lab, n_tasks: usize) -> Result<EvalReport> {
    let data = bank(lab, n_tasks)?;
    let fts = lab.finetune_all(&data)?;
    let per_task = fts
        .par_iter()
        .enumerate()
        .map(|(i, ft)| forget_rows(lab, ft, i))
        .collect::<Result<Vec<_>>>()?;

    let mut rep = report(lab, "forget");
    let mut by_method: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
    for rows in &per_task {
        for r in rows {
            by_method.entry(FORGET_METHODS.iter().find(|m| **m == r.edit).unwrap()).or_default().push(r);
        }
    }
    for method in FORGET_METHODS {
        let rows = &by_method[method];
        let mut m = ReportRow::new("mean", method);
        for key in ["target", "control"] {
            let v = mean(rows.iter().map(|r| r.accuracy[key]));
            m.accuracy.insert(key.into(), v);
            rep.summary.insert(format!("{method}.{key}"), v);
        }
        rep.plots.push(PlotSeries {
            figure: "forgetting".into(),
            series: method.into(),
            points: rows
                .iter()
                .map(|r| (r.accuracy["control"], r.accuracy["target"]))
                .collect(),
        });
        rep.rows.push(m);
    }
    rep.rows.splice(0..0, per_task.into_iter().flatten());
    let s = &rep.summary;
    let pre = s[&format!("{PRETRAINED}.target")];
    let neg_drop = pre - s[&format!("{NEGATIVE_TASK_VECTOR}.target")];
    let rand_drop = pre - s[&format!("{RANDOM_VECTOR}.target")];
    let warnings = rep
        .rows_with_edit(NEGATIVE_TASK_VECTOR)
        .filter(|r| r.baselines.get("warning") == Some(&1.0))
        .count();
    rep.summary.insert("negation_drop".into(), neg_drop);
    rep.summary.insert("random_drop".into(), rand_drop);
    rep.summary.insert("pretrained.control_val".into(), lab.control_val);
    rep.summary.insert("negation_warnings".into(), warnings as f64);
    Ok(rep)
}

// ------------------------------------------------------------------ addition

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    Pairs,
    AllSubsets,
}

pub const ADDED: &str = "added";
pub const MULTITASK: &str = "multitask";

/// Subsets of `0..n` as sorted index lists, ordered by size then bitmask.
pub fn subsets(n: usize, mode: SubsetMode) -> Vec<Vec<usize>> {
    let mut out: Vec<(u32, Vec<usize>)> = (1u32..1 << n)
        .filter(|m| mode == SubsetMode::AllSubsets || m.count_ones() == 2)
        .map(|m| (m, (0..n).filter(|i| m & (1 << i) != 0).collect()))
        .collect();
    out.sort_by_key(|(m, s)| (s.len(), *m));
    out.into_iter().map(|(_, s)| s).collect()
}

fn addition_row(lab: &Lab, fts: &[FineTuned], ft_test: &[f64], subset: &[usize]) -> Result<ReportRow> {
    if subset.is_empty() {
        return Err(Error::EmptyData("empty task subset".into()));
    }
    let spec = lab.spec();
    let expr = ArithExpr::sum_of(subset.iter().map(|&i| fts[i].tau.clone()));
    let eval = |c: &Checkpoint| {
        let accs = subset
            .iter()
            .map(|&i| accuracy(c, spec, &fts[i].data, Split::Val))
            .collect::<Result<Vec<_>>>()?;
        Ok(Metrics {
            target: mean(accs),
            control: None,
        })
    };
    let sw = sweep(&lab.pretrained, &expr, &lab.config.grid, &eval)?;
    let lambda = select_max(&sw)?.coeffs[0];
    let edited = apply(&lab.pretrained, &expr, lambda)?;
    let label = subset
        .iter()
        .map(|&i| fts[i].data.spec.task_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let mut row = ReportRow::new(label, ADDED);
    row.coeffs = vec![lambda];
    fill_normalized(&mut row, lab, fts, ft_test, &edited)?;
    let in_subset = mean(subset.iter().map(|&i| row.normalized[&fts[i].data.spec.task_id]));
    row.baselines.insert("size".into(), subset.len() as f64);
    row.baselines.insert("mean_normalized_subset".into(), in_subset);
    Ok(row)
}

fn fill_normalized(row: &mut ReportRow, lab: &Lab, fts: &[FineTuned], ft_test: &[f64], ckpt: &Checkpoint) -> Result<()> {
    for (ft, &reference) in fts.iter().zip(ft_test) {
        let id = ft.data.spec.task_id.clone();
        let acc = accuracy(ckpt, lab.spec(), &ft.data, Split::Test)?;
        row.normalized.insert(id.clone(), normalized_accuracy(acc, reference)?);
        row.accuracy.insert(id, acc);
    }
    let all = mean(row.normalized.values().copied());
    row.baselines.insert("mean_normalized_all".into(), all);
    Ok(())
}

/// Adds task vectors of every pair (or every non-empty subset) of the
/// first `n_tasks` bank tasks with one shared coefficient chosen on the
/// mean validation accuracy of the subset.
pub fn run_addition(lab: &Lab, n_tasks: usize, mode: SubsetMode, multitask: bool) -> Result<EvalReport> {
    let data = bank(lab, n_tasks)?;
    let fts = lab.finetune_all(&data)?;
    let ft_test = fts
        .iter()
        .map(|ft| accuracy(&ft.ckpt, lab.spec(), &ft.data, Split::Test))
        .collect::<Result<Vec<_>>>()?;

    let mut rep = report(lab, "add");
    for (ft, &acc) in fts.iter().zip(&ft_test) {
        let id = &ft.data.spec.task_id;
        let mut r = ReportRow::new(id.as_str(), FINETUNED);
        r.accuracy.insert(id.clone(), acc);
        r.normalized.insert(id.clone(), normalized_accuracy(acc, acc)?);
        r.coeffs = vec![1.0];
        rep.rows.push(r);
    }
    let rows = subsets(n_tasks, mode)
        .par_iter()
        .map(|s| addition_row(lab, &fts, &ft_test, s))
        .collect::<Result<Vec<_>>>()?;

    let mut buckets: BTreeMap<usize, Vec<&ReportRow>> = BTreeMap::new();
    for r in &rows {
        buckets.entry(r.baselines["size"] as usize).or_default().push(r);
    }
    let mut all_curve = Vec::new();
    let mut subset_curve = Vec::new();
    for (size, rs) in &buckets {
        let all = mean(rs.iter().map(|r| r.baselines["mean_normalized_all"]));
        let sub = mean(rs.iter().map(|r| r.baselines["mean_normalized_subset"]));
        rep.summary.insert(format!("size.{size}.normalized_all"), all);
        rep.summary.insert(format!("size.{size}.normalized_subset"), sub);
        all_curve.push((*size as f64, all));
        subset_curve.push((*size as f64, sub));
    }
    rep.summary.insert("mean_normalized_subset".into(), mean(rows.iter().map(|r| r.baselines["mean_normalized_subset"])));
    rep.summary.insert("mean_normalized_all".into(), mean(rows.iter().map(|r| r.baselines["mean_normalized_all"])));
    if mode == SubsetMode::Pairs {
        rep.plots.push(PlotSeries {
            figure: "addition_pairs".into(),
            series: "normalized_subset".into(),
            points: rows
                .iter()
                .enumerate()
                .map(|(i, r)| (i as f64, r.baselines["mean_normalized_subset"]))
                .collect(),
        });
    }
    rep.plots.push(PlotSeries {
        figure: "addition_subsets".into(),
        series: "normalized_all".into(),
        points: all_curve,
    });
    rep.plots.push(PlotSeries {
        figure: "addition_subsets".into(),
        series: "normalized_subset".into(),
        points: subset_curve,
    });
    rep.rows.extend(rows);

    if multitask {
        let parts: Vec<Samples> = data.iter().map(|d| d.samples(Split::Train)).collect();
        let joint = Samples::concat(&parts)?;
        let cfg = TrainConfig {
            steps: lab.config.finetune.steps * n_tasks,
            seed: lab.config.seed,
            ..lab.config.finetune.clone()
        };
        let out = lab.train(&lab.pretrained, &joint, &cfg, MULTITASK)?;
        let mut r = ReportRow::new(MULTITASK, MULTITASK);
        fill_normalized(&mut r, lab, &fts, &ft_test, &out.final_ckpt)?;
        rep.summary.insert("multitask.normalized_all".into(), r.baselines["mean_normalized_all"]);
        rep.rows.push(r);
    }
    Ok(rep)
}

// ------------------------------------------------------------------- analogy

pub const ANALOGY: &str = "analogy";
pub const ANALOGY_THREE: &str = "analogy_three";
pub const FINETUNED_TARGET: &str = "finetuned_target";
pub const FEWSHOT_ANALOGY: &str = "fewshot_from_analogy";
pub const FEWSHOT_PRETRAINED: &str = "fewshot_from_pretrained";

/// Edits the pre-trained model with `τ_C + τ_B − τ_A` towards a held-out
/// grid cell, then fine-tunes on few-shot subsets of that cell from both the
/// edited and the pre-trained starting points.
pub fn run_analogy_grid(lab: &Lab, heldout: usize, budgets: &[usize]) -> Result<EvalReport> {
    let (a, b, c) = analogy_triple(heldout)?;
    let spec = lab.spec();
    let pre = &lab.pretrained;
    let cells = make_grid_seeded(lab.config.seed)
        .iter()
        .map(make_task)
        .collect::<Result<Vec<_>>>()?;
    let target = &cells[heldout];
    let fts = lab.finetune_all(&[cells[a].clone(), cells[b].clone(), cells[c].clone(), target.clone()])?;
    let (fa, fb, fc, fd) = (&fts[0], &fts[1], &fts[2], &fts[3]);

    let tau = analogy(&fa.tau, &fb.tau, &fc.tau)?;
    let eval = target_eval(lab, target);
    let sw = sweep(pre, &ArithExpr::leaf(tau.clone()), &lab.config.grid, &eval)?;
    let lambda = select_max(&sw)?.coeffs[0];
    let edited = apply_vector(pre, &tau, lambda, "analogy edit")?;
    let three = sweep_three(pre, &fa.tau, &fb.tau, &fc.tau, &lab.config.multi_grid, &eval)?;
    let best3 = select_max(&three)?.coeffs.clone();
    let edited3 = apply_terms(pre, &[(best3[2], &fc.tau), (best3[1], &fb.tau), (-best3[0], &fa.tau)], "analogy edit")?;

    let cell = target.spec.task_id.as_str();
    let test_acc = |c: &Checkpoint| accuracy(c, spec, target, Split::Test);
    let mut rep = report(lab, "analogy");
    let push = |edit: &str, acc: f64, coeffs: Vec<f64>, budget: Option<usize>| {
        let mut r = ReportRow::new(cell, edit);
        r.accuracy.insert("target".into(), acc);
        r.coeffs = coeffs;
        if let Some(k) = budget {
            r.baselines.insert("budget".into(), k as f64);
        }
        r
    };
    let zero_pre = test_acc(pre)?;
    let zero_edit = test_acc(&edited)?;
    let mut rows = vec![
        push(PRETRAINED, zero_pre, vec![0.0], None),
        push(ANALOGY, zero_edit, vec![lambda], None),
        push(ANALOGY_THREE, test_acc(&edited3)?, best3, None),
        push(FINETUNED_TARGET, test_acc(&fd.ckpt)?, vec![1.0], None),
    ];
    rep.summary.insert("zero_shot.pretrained".into(), zero_pre);
    rep.summary.insert("zero_shot.analogy".into(), zero_edit);
    rep.summary.insert("zero_shot.gain".into(), zero_edit - zero_pre);

    let fs_cfg = TrainConfig {
        seed: lab.config.seed,
        ..lab.config.fewshot.clone()
    };
    let fewshot = budgets
        .par_iter()
        .map(|&k| -> Result<(usize, f64, f64)> {
            let train = target.few_shot(k)?.samples(Split::Train);
            let from_edit = lab.train(&edited, &train, &fs_cfg, &format!("{cell}.fewshot{k}.analogy"))?;
            let from_pre = lab.train(pre, &train, &fs_cfg, &format!("{cell}.fewshot{k}.pretrained"))?;
            Ok((k, test_acc(&from_edit.final_ckpt)?, test_acc(&from_pre.final_ckpt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut curve_a = vec![(0.0, zero_edit)];
    let mut curve_p = vec![(0.0, zero_pre)];
    for (k, acc_a, acc_p) in fewshot {
        rows.push(push(FEWSHOT_ANALOGY, acc_a, vec![lambda], Some(k)));
        rows.push(push(FEWSHOT_PRETRAINED, acc_p, vec![], Some(k)));
        rep.summary.insert(format!("fewshot.{k}.analogy"), acc_a);
        rep.summary.insert(format!("fewshot.{k}.pretrained"), acc_p);
        curve_a.push((k as f64, acc_a));
        curve_p.push((k as f64, acc_p));
    }
    rep.plots.push(PlotSeries {
        figure: "analogy_fewshot".into(),
        series: format!("{cell}/{ANALOGY}"),
        points: curve_a,
    });
    rep.plots.push(PlotSeries {
        figure: "analogy_fewshot".into(),
        series: format!("{cell}/{PRETRAINED}"),
        points: curve_p,
    });
    rep.rows = rows;
    rep.notes.push("coefficients selected by validation argmax on the held-out cell; no control constraint".into());
    Ok(rep)
}

/// Runs every held-out cell for every seed (each seed re-trains the whole
/// pipeline) and averages the summaries over runs.
pub fn run_analogy_suite(config: &LabConfig, seeds: &[u64], budgets: &[usize]) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("analogy suite needs at least one seed".into()));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(u64, EvalReport)>> {
            let lab = Lab::new(config.with_seed(seed))?;
            (0..4).map(|cell| Ok((seed, run_analogy_grid(&lab, cell, budgets)?))).collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<(u64, EvalReport)> = runs.into_iter().flatten().collect();

    let mut rep = EvalReport::new("analogy", config.digest(), seeds.to_vec());
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (seed, run) in &runs {
        for (k, v) in &run.summary {
            sums.entry(k.clone()).or_default().push(*v);
        }
        for row in &run.rows {
            let mut r = row.clone();
            r.group = format!("seed{seed}/{}", row.group);
            rep.rows.push(r);
        }
        for p in &run.plots {
            let mut p = p.clone();
            p.series = format!("seed{seed}/{}", p.series);
            rep.plots.push(p);
        }
    }
    for (k, vs) in sums {
        rep.summary.insert(k, mean(vs));
    }
    for &k in budgets {
        let d = rep.summary[&format!("fewshot.{k}.analogy")] - rep.summary[&format!("fewshot.{k}.pretrained")];
        rep.summary.insert(format!("fewshot.{k}.advantage"), d);
    }
    rep.summary.insert("runs".into(), runs.len() as f64);
    rep.notes.push("summaries are means over held-out cells and seeds".into());
    rep.notes.push("coefficients selected by validation argmax on the held-out cell; no control constraint".into());
    Ok(rep)
}

// ---------------------------------------------------- domain generalization

pub const FINETUNED_AUX: &str = "finetuned_auxiliary";

/// Supervised auxiliary-domain vector plus the difference of unsupervised
/// (reconstruction) vectors of the target and auxiliary domains.
pub fn run_domain_generalization(lab: &Lab) -> Result<EvalReport> {
    let pair = make_domain_pair_seeded(lab.config.seed);
    let recon = TrainConfig {
        objective: Objective::Reconstruction,
        seed: lab.config.seed,
        ..lab.config.recon.clone()
    };
    let (sup, (aux_u, (tgt_u, tgt_ft))) = rayon::join(
        || lab.finetune(&pair.aux_supervised),
        || {
            rayon::join(
                || lab.finetune_with(&pair.aux_unsup, &recon),
                || {
                    rayon::join(
                        || lab.finetune_with(&pair.target_unsup, &recon),
                        || lab.finetune(&pair.target_supervised_eval),
                    )
                },
            )
        },
    );
    let (sup, aux_u, tgt_u, tgt_ft) = (sup?, aux_u?, tgt_u?, tgt_ft?);
    let target = &pair.target_supervised_eval;
    let eval = target_eval(lab, target);
    let grid = &lab.config.multi_grid;
    let sw = sweep_two(&lab.pretrained, &sup.tau, &tgt_u.tau, &aux_u.tau, grid, grid, &eval)?;
    let best = select_max(&sw)?.coeffs.clone();
    let edited = apply_terms(
        &lab.pretrained,
        &[(best[0], &sup.tau), (best[1], &tgt_u.tau), (-best[1], &aux_u.tau)],
        "domain analogy",
    )?;

    let mut rep = report(lab, "domain");
    let mut points = Vec::new();
    for (i, (edit, ckpt, coeffs)) in [
        (PRETRAINED, &lab.pretrained, vec![]),
        (FINETUNED_AUX, &sup.ckpt, vec![1.0, 0.0]),
        (ANALOGY, &edited, best.clone()),
        (FINETUNED_TARGET, &tgt_ft.ckpt, vec![]),
    ]
    .into_iter()
    .enumerate()
    {
        let acc = accuracy(ckpt, lab.spec(), target, Split::Test)?;
        let mut r = ReportRow::new(target.spec.task_id.as_str(), edit);
        r.accuracy.insert("target".into(), acc);
        r.coeffs = coeffs;
        rep.summary.insert(edit.into(), acc);
        rep.rows.push(r);
        points.push((i as f64, acc));
    }
    rep.summary.insert("best.lambda_sup".into(), best[0]);
    rep.summary.insert("best.lambda_unsup".into(), best[1]);
    rep.plots.push(PlotSeries {
        figure: "domain".into(),
        series: "target_accuracy".into(),
        points,
    });
    rep.notes.push(format!(
        "selected lambda_sup={} lambda_unsup={} ({})",
        best[0],
        best[1],
        if best[0] >= best[1] { "supervised weighted at least as high" } else { "unsupervised weighted higher" }
    ));
    rep.notes.push("coefficients selected on target-domain validation labels; target labels are never used for training the edit".into());
    Ok(rep)
}

// ------------------------------------------------------------------ ensemble

pub const WEIGHT_AVERAGE: &str = "weight_average";

/// All index pairs `(i, j)` with `i < j < n`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Weight averaging (`λ = 0.5` on the sum) against logit ensembling
/// (`α = 0.5`) on the union of each pair's test sets.
pub fn run_ensemble_study(lab: &Lab, n_tasks: usize, pairs: &[(usize, usize)]) -> Result<EvalReport> {
    if pairs.len() < 2 {
        return Err(Error::InvalidConfig("ensemble study needs at least two pairs".into()));
    }
    if let Some(p) = pairs.iter().find(|(i, j)| *i >= n_tasks || *j >= n_tasks) {
        return Err(Error::InvalidConfig(format!("pair {p:?} outside a {n_tasks}-task bank")));
    }
    let data = bank(lab, n_tasks)?;
    let fts = lab.finetune_all(&data)?;
    let spec = lab.spec();
    let rows = pairs
        .par_iter()
        .map(|&(i, j)| -> Result<ReportRow> {
            let (a, b) = (&fts[i], &fts[j]);
            let union = Samples::concat(&[a.data.samples(Split::Test), b.data.samples(Split::Test)])?;
            let avg = apply(&lab.pretrained, &ArithExpr::sum_of([a.tau.clone(), b.tau.clone()]), 0.5)?;
            let mut err = 0f64;
            for (name, t) in avg.weights.iter() {
                let (ta, tb) = (a.ckpt.weights.get(name).unwrap(), b.ckpt.weights.get(name).unwrap());
                for ((v, x), y) in t.data().iter().zip(ta.data()).zip(tb.data()) {
                    err = err.max((*v as f64 - 0.5 * (*x as f64 + *y as f64)).abs());
                }
            }
            let mut r = ReportRow::new(format!("{}+{}", a.data.spec.task_id, b.data.spec.task_id), WEIGHT_AVERAGE);
            r.accuracy.insert(WEIGHT_AVERAGE.into(), accuracy_samples(&avg, spec, &union)?);
            r.accuracy.insert("ensemble".into(), ensemble_accuracy(&a.ckpt, &b.ckpt, 0.5, spec, &union)?);
            r.coeffs = vec![0.5];
            r.baselines.insert("identity_max_abs_err".into(), err);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.accuracy[WEIGHT_AVERAGE]).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.accuracy["ensemble"]).collect();
    let mut rep = report(lab, "ensemble");
    rep.summary.insert("pearson".into(), crate::eval_lab::metrics::pearson(&xs, &ys)?);
    rep.summary.insert("pairs".into(), rows.len() as f64);
    rep.summary.insert(
        "identity_max_abs_err".into(),
        rows.iter().map(|r| r.baselines["identity_max_abs_err"]).fold(0.0, f64::max),
    );
    rep.plots.push(PlotSeries {
        figure: "ensemble".into(),
        series: "weight_average_vs_ensemble".into(),
        points: xs.into_iter().zip(ys).collect(),
    });
    rep.rows = rows;
    Ok(rep)
}

// ------------------------------------------------------------- lr and seeds

/// For every learning rate and every seed pair, fine-tunes both tasks of
/// `pair` and adds their vectors; rows are `|lrs| × |seeds|²`.
pub fn run_lr_seed_study(lab: &Lab, pair: (usize, usize), lrs: &[f64], seeds: &[u64]) -> Result<EvalReport> {
    if lrs.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("lr/seed study needs at least one lr and one seed".into()));
    }
    let data = bank(lab, pair.0.max(pair.1) + 1)?;
    let (da, db) = (&data[pair.0], &data[pair.1]);
    let units: Vec<(usize, f64, u64)> = lrs
        .iter()
        .flat_map(|&lr| seeds.iter().flat_map(move |&s| [(0, lr, s), (1, lr, s)]))
        .collect();
    let trained = units
        .par_iter()
        .map(|&(which, lr, seed)| {
            let cfg = TrainConfig {
                peak_lr: lr,
                seed,
                ..lab.config.finetune.clone()
            };
            lab.finetune_with(if which == 0 { da } else { db }, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let find = |which: usize, lr: f64, seed: u64| {
        let k = units.iter().position(|u| *u == (which, lr, seed)).expect("trained");
        &trained[k]
    };
    let spec = lab.spec();
    let jobs: Vec<(f64, u64, u64)> = lrs
        .iter()
        .flat_map(|&lr| seeds.iter().flat_map(move |&s1| seeds.iter().map(move |&s2| (lr, s1, s2))))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(lr, s1, s2)| -> Result<ReportRow> {
            let (fa, fb) = (find(0, lr, s1), find(1, lr, s2));
            let expr = ArithExpr::sum_of([fa.tau.clone(), fb.tau.clone()]);
            let eval = |c: &Checkpoint| {
                Ok(Metrics {
                    target: 0.5 * (accuracy(c, spec, da, Split::Val)? + accuracy(c, spec, db, Split::Val)?),
                    control: None,
                })
            };
            let sw = sweep(&lab.pretrained, &expr, &lab.config.grid, &eval)?;
            let lambda = select_max(&sw)?.coeffs[0];
            let edited = apply(&lab.pretrained, &expr, lambda)?;
            let mut r = ReportRow::new(format!("lr={lr}"), format!("seeds={s1},{s2}"));
            let mut added = Vec::new();
            let mut individual = Vec::new();
            for (ft, d) in [(fa, da), (fb, db)] {
                let acc = accuracy(&edited, spec, d, Split::Test)?;
                let own = accuracy(&ft.ckpt, spec, d, Split::Test)?;
                r.accuracy.insert(d.spec.task_id.clone(), acc);
                r.normalized.insert(d.spec.task_id.clone(), normalized_accuracy(acc, own)?);
                r.baselines.insert(format!("finetuned.{}", d.spec.task_id), own);
                added.push(acc);
                individual.push(own);
            }
            r.coeffs = vec![lambda];
            r.baselines.insert("lr".into(), lr);
            r.baselines.insert("seed_a".into(), s1 as f64);
            r.baselines.insert("seed_b".into(), s2 as f64);
            r.baselines.insert("mean_added".into(), mean(added));
            r.baselines.insert("mean_individual".into(), mean(individual));
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rep = report(lab, "lr-seed");
    rep.seeds = seeds.to_vec();
    let mut added_curve = Vec::new();
    let mut indiv_curve = Vec::new();
    for &lr in lrs {
        let rs: Vec<&ReportRow> = rows.iter().filter(|r| r.baselines["lr"] == lr).collect();
        let added: Vec<f64> = rs.iter().map(|r| r.baselines["mean_added"]).collect();
        let indiv = mean(rs.iter().map(|r| r.baselines["mean_individual"]));
        let spread = added.iter().cloned().fold(f64::MIN, f64::max) - added.iter().cloned().fold(f64::MAX, f64::min);
        let m = mean(added.iter().copied());
        rep.summary.insert(format!("lr.{lr}.mean_added"), m);
        rep.summary.insert(format!("lr.{lr}.mean_individual"), indiv);
        rep.summary.insert(format!("lr.{lr}.seed_spread"), spread);
        added_curve.push((lr, m));
        indiv_curve.push((lr, indiv));
    }
    rep.plots.push(PlotSeries {
        figure: "lr".into(),
        series: "added".into(),
        points: added_curve,
    });
    rep.plots.push(PlotSeries {
        figure: "lr".into(),
        series: "individual".into(),
        points: indiv_curve,
    });
    rep.rows = rows;
    Ok(rep)
}

// -------------------------------------------------------------------- cosine

/// Cosine matrix over the bank plus, per task, the cosine between two
/// fine-tunes that differ only in their training seed.
pub fn run_cosine_study(lab: &Lab, n_tasks: usize) -> Result<EvalReport> {
    let data = bank(lab, n_tasks)?;
    let fts = lab.finetune_all(&data)?;
    let reseeded = data
        .par_iter()
        .map(|d| {
            let cfg = TrainConfig {
                seed: lab.config.seed.wrapping_add(1_000_003),
                ..lab.config.finetune.clone()
            };
            lab.finetune_with(d, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let taus: Vec<_> = fts.iter().map(|f| f.tau.clone()).collect();
    let m = cosine_matrix(&taus)?;

    let mut rep = report(lab, "cosim");
    let (mut sym, mut diag, mut off) = (0f64, 0f64, Vec::new());
    for i in 0..n_tasks {
        let id = &data[i].spec.task_id;
        let mut r = ReportRow::new(id.as_str(), "cosine");
        for j in 0..n_tasks {
            r.baselines.insert(data[j].spec.task_id.clone(), m[i][j]);
            sym = sym.max((m[i][j] - m[j][i]).abs());
            if i == j {
                diag = diag.max((m[i][i] - 1.0).abs());
            } else {
                off.push(m[i][j].abs());
            }
        }
        let same = cosine(&fts[i].tau, &reseeded[i].tau)?;
        r.baselines.insert("same_task_other_seed".into(), same);
        rep.plots.push(PlotSeries {
            figure: "cosine_matrix".into(),
            series: id.clone(),
            points: (0..n_tasks).map(|j| (j as f64, m[i][j])).collect(),
        });
        rep.rows.push(r);
    }
    let same = mean(rep.rows.iter().map(|r| r.baselines["same_task_other_seed"]));
    rep.summary.insert("symmetry_max_err".into(), sym);
    rep.summary.insert("diagonal_max_err".into(), diag);
    rep.summary.insert("mean_abs_offdiag".into(), if off.is_empty() { 0.0 } else { mean(off) });
    rep.summary.insert("same_task_mean".into(), same);
    Ok(rep)
}

// ---------------------------------------------------------------- trajectory

/// Cosine between intermediate fine-tuning displacements and the final
/// task vector for bank task `task_index` (1-based).
pub fn run_trajectory(lab: &Lab, task_index: u64, snapshot_every: usize) -> Result<EvalReport> {
    if snapshot_every == 0 {
        return Err(Error::InvalidConfig("snapshot_every must be positive".into()));
    }
    if !(1..=BANK_SIZE).contains(&task_index) {
        return Err(Error::InvalidConfig(format!("trajectory task {task_index} not in 1..={BANK_SIZE}")));
    }
    let data = make_task(&target_spec(task_index, lab.config.seed))?;
    let cfg = TrainConfig {
        snapshot_every,
        seed: lab.config.seed,
        ..lab.config.finetune.clone()
    };
    let ft = lab.finetune_with(&data, &cfg)?;
    let points = trajectory_cosines(&ft.snapshots, &lab.pretrained, &ft.tau)?;

    let mut rep = report(lab, "trajectory");
    let mut curve = Vec::new();
    for p in &points {
        let mut r = ReportRow::new(format!("step{}", p.step), "snapshot");
        r.baselines.insert("step".into(), p.step as f64);
        match p.cosine {
            Some(c) => {
                r.baselines.insert("cosine".into(), c);
                curve.push((p.step as f64, c));
            }
            None => {
                r.baselines.insert("undefined".into(), 1.0);
            }
        }
        rep.rows.push(r);
    }
    let (steps, cos): (Vec<f64>, Vec<f64>) = curve.iter().copied().unzip();
    rep.summary.insert("spearman".into(), spearman(&steps, &cos)?);
    rep.summary.insert("final_cosine".into(), *cos.last().expect("final snapshot is defined"));
    rep.summary.insert("undefined_points".into(), (points.len() - curve.len()) as f64);
    rep.plots.push(PlotSeries {
        figure: "trajectory".into(),
        series: data.spec.task_id.clone(),
        points: curve,
    });
    Ok(rep)
}
