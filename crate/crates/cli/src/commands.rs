//! Command implementations.

use std::path::{Path, PathBuf};

use serde::Serialize;

use taskvec::eval_lab::{
    all_pairs, run_addition, run_analogy_suite, run_cosine_study, run_domain_generalization, run_ensemble_study,
    run_forgetting, run_lr_seed_study, run_trajectory, EvalReport, Lab,
};
use taskvec::mini_net::{fine_tune, init_model};
use taskvec::tensor_store::{content_hash, load_checkpoint, load_tvkp, save_checkpoint, Checkpoint, Digest};
use taskvec::vector_arith::{
    analogy, apply as apply_expr, apply_terms, diff, load_task_vector, negate, random_matched, save_task_vector, sum,
    TaskVector, TASK_VECTOR_NOTE,
};

use crate::config::{Overrides, RunConfig, EXPERIMENTS};
use crate::exit::{CliResult, Failure, OrExit, COMPAT, CONFIG, EXPERIMENT, TRAINING};
use crate::expr::ExprFile;
use crate::manifest::{sidecar, Manifest};

fn create_dir(dir: &Path, code: u8) -> CliResult<()> {
    std::fs::create_dir_all(dir).or_exit(code, || format!("cannot create {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize, code: u8) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).or_exit(code, || format!("cannot write {}", path.display()))
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    load_checkpoint(path).or_exit(CONFIG, || format!("cannot load checkpoint {}", path.display()))
}

fn load_vector(path: &Path) -> CliResult<(TaskVector, Digest)> {
    load_task_vector(path).or_exit(CONFIG, || format!("cannot load task vector {}", path.display()))
}

/// Refuses to overwrite any input.
fn guard_inputs(out: &Path, inputs: &[&Path]) -> CliResult<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let target = canon(out);
    if let Some(p) = inputs.iter().find(|p| canon(p) == target) {
        return Err(Failure::config(format!("output {} would overwrite input {}", out.display(), p.display())));
    }
    Ok(())
}

/// Loads task vectors and checks that they share one architecture.
fn load_vectors(paths: &[&Path]) -> CliResult<(Vec<TaskVector>, Digest)> {
    let mut out = Vec::new();
    let mut arch: Option<Digest> = None;
    for p in paths {
        let (t, d) = load_vector(p)?;
        match arch {
            Some(a) if a != d => {
                return Err(Failure::compat(format!(
                    "{} was built for architecture {d}, {} for {a}",
                    p.display(),
                    paths[0].display()
                )))
            }
            _ => arch = Some(d),
        }
        out.push(t);
    }
    Ok((out, arch.expect("at least one input")))
}

fn finish_vector(
    command: &str,
    t: &TaskVector,
    arch: Digest,
    inputs: &[&Path],
    out: &Path,
    resolved: impl Serialize,
) -> CliResult<()> {
    guard_inputs(out, inputs)?;
    save_task_vector(t, arch, out).or_exit(CONFIG, || format!("cannot write {}", out.display()))?;
    let mut m = Manifest::new(command, resolved);
    for p in inputs {
        m.input(p)?;
    }
    m.output(Path::new(""), out)?;
    m.write(&sidecar(out))?;
    println!(
        "{} {} norm={:.6} hash={}",
        out.display(),
        t.task_id(),
        t.global_norm(),
        content_hash(&t.delta)
    );
    Ok(())
}

pub fn train(config: Option<&Path>, ov: &Overrides, task: &str, init: Option<&Path>) -> CliResult<()> {
    let cfg = RunConfig::resolve(config, ov)?;
    let data = cfg.dataset(task, cfg.train.seed)?;
    let start = match init {
        Some(p) => load_ckpt(p)?,
        None => init_model(&cfg.arch, cfg.train.seed),
    };
    if start.meta.arch_digest != cfg.arch.digest() {
        return Err(Failure::compat(format!(
            "initial checkpoint has architecture {}, config describes {}",
            start.meta.arch_digest,
            cfg.arch.digest()
        )));
    }
    let out = &cfg.output_dir;
    create_dir(out, CONFIG)?;
    write_json(&out.join("config.json"), &cfg, CONFIG)?;

    let res = fine_tune(&start, &cfg.arch, &data, &cfg.train).or_exit(TRAINING, || format!("training on {task} failed"))?;

    let mut m = Manifest::new("train", &cfg);
    if let Some(p) = init {
        m.input(p)?;
    }
    let write = |ckpt: &Checkpoint, path: &Path| {
        save_checkpoint(ckpt, path).or_exit(TRAINING, || format!("cannot write {}", path.display()))
    };
    let final_path = out.join("final.tvkp");
    write(&res.final_ckpt, &final_path)?;
    m.output(out, &final_path)?;
    if !res.snapshots.is_empty() {
        let dir = out.join("snapshots");
        create_dir(&dir, TRAINING)?;
        for (step, ckpt) in &res.snapshots {
            let p = dir.join(format!("step_{step:06}.tvkp"));
            write(ckpt, &p)?;
            m.output(out, &p)?;
        }
    }
    let losses = out.join("losses.csv");
    let mut text = String::from("step,loss\n");
    for (i, l) in res.losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&losses, text).or_exit(TRAINING, || format!("cannot write {}", losses.display()))?;
    m.output(out, &losses)?;
    m.output(out, &out.join("config.json"))?;
    m.write(&out.join("manifest.json"))?;
    println!(
        "{} step={} hash={} final_loss={}",
        final_path.display(),
        res.final_ckpt.meta.step,
        res.final_ckpt.content_hash(),
        res.losses.last().map_or("n/a".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

pub fn vector_diff(ft: &Path, pre: &Path, out: &Path) -> CliResult<()> {
    let (f, p) = (load_ckpt(ft)?, load_ckpt(pre)?);
    if f.meta.arch_digest != p.meta.arch_digest {
        return Err(Failure::compat(format!(
            "{} has architecture {}, {} has {}",
            ft.display(),
            f.meta.arch_digest,
            pre.display(),
            p.meta.arch_digest
        )));
    }
    let t = diff(&f, &p).or_exit(COMPAT, || "cannot diff checkpoints".into())?;
    finish_vector("vector diff", &t, p.meta.arch_digest, &[ft, pre], out, serde_json::json!({"ft": ft, "pre": pre}))
}

pub fn vector_negate(input: &Path, out: &Path) -> CliResult<()> {
    let (ts, arch) = load_vectors(&[input])?;
    finish_vector("vector negate", &negate(&ts[0]), arch, &[input], out, serde_json::json!({"input": input}))
}

pub fn vector_add(inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let (ts, arch) = load_vectors(&paths)?;
    let t = sum(&ts).or_exit(COMPAT, || "cannot add vectors".into())?;
    finish_vector("vector add", &t, arch, &paths, out, serde_json::json!({"inputs": inputs}))
}

pub fn vector_analogy(a: &Path, b: &Path, c: &Path, out: &Path) -> CliResult<()> {
    let (ts, arch) = load_vectors(&[a, b, c])?;
    let t = analogy(&ts[0], &ts[1], &ts[2]).or_exit(COMPAT, || "cannot form analogy".into())?;
    finish_vector("vector analogy", &t, arch, &[a, b, c], out, serde_json::json!({"a": a, "b": b, "c": c}))
}

pub fn vector_random(input: &Path, seed: u64, out: &Path) -> CliResult<()> {
    let (ts, arch) = load_vectors(&[input])?;
    let t = random_matched(&ts[0], seed);
    finish_vector("vector random", &t, arch, &[input], out, serde_json::json!({"input": input, "seed": seed}))
}

pub fn apply(base: &Path, vectors: &[PathBuf], expr: Option<&Path>, lambdas: &[f64], out: &Path) -> CliResult<()> {
    let b = load_ckpt(base)?;
    let arch = b.meta.arch_digest;
    let mut inputs: Vec<PathBuf> = vec![base.to_path_buf()];
    let (edited, resolved) = match expr {
        Some(path) => {
            if lambdas.len() > 1 {
                return Err(Failure::config("an expression takes at most one --lambda"));
            }
            let lambda = lambdas.first().copied().unwrap_or(1.0);
            let text = std::fs::read_to_string(path).or_exit(CONFIG, || format!("cannot read {}", path.display()))?;
            let e = ExprFile::parse(&text).or_exit(CONFIG, || format!("invalid expression {}", path.display()))?;
            let dir = path.parent().unwrap_or(Path::new(""));
            inputs.push(path.to_path_buf());
            inputs.extend(e.leaves().into_iter().map(|l| dir.join(l)));
            let tree = e.load(dir, arch)?;
            let edited = apply_expr(&b, &tree, lambda).or_exit(COMPAT, || "cannot apply expression".into())?;
            (edited, serde_json::json!({"base": base, "expr": path, "lambda": lambda}))
        }
        None => {
            if vectors.is_empty() {
                return Err(Failure::config("apply needs --vector or --expr"));
            }
            let coeffs: Vec<f64> = match lambdas.len() {
                0 => vec![1.0; vectors.len()],
                1 => vec![lambdas[0]; vectors.len()],
                n if n == vectors.len() => lambdas.to_vec(),
                n => {
                    return Err(Failure::config(format!(
                        "{n} --lambda values for {} vectors; give one per vector or a single value",
                        vectors.len()
                    )))
                }
            };
            let paths: Vec<&Path> = vectors.iter().map(PathBuf::as_path).collect();
            let (ts, varch) = load_vectors(&paths)?;
            if varch != arch {
                return Err(Failure::compat(format!("vectors were built for architecture {varch}, base is {arch}")));
            }
            inputs.extend(vectors.iter().cloned());
            let terms: Vec<(f64, &TaskVector)> = coeffs.iter().copied().zip(&ts).collect();
            let note = terms
                .iter()
                .map(|(c, t)| format!("{c}*{}", t.task_id()))
                .collect::<Vec<_>>()
                .join(" + ");
            let edited = apply_terms(&b, &terms, &format!("apply {note}")).or_exit(COMPAT, || "cannot apply vectors".into())?;
            (edited, serde_json::json!({"base": base, "vectors": vectors, "lambdas": coeffs}))
        }
    };
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    guard_inputs(out, &input_refs)?;
    save_checkpoint(&edited, out).or_exit(CONFIG, || format!("cannot write {}", out.display()))?;
    let mut m = Manifest::new("apply", resolved);
    for p in &input_refs {
        m.input(p)?;
    }
    m.output(Path::new(""), out)?;
    m.write(&sidecar(out))?;
    println!(
        "{} model_id={} hash={} parent={} note={:?}",
        out.display(),
        edited.meta.model_id,
        edited.content_hash(),
        edited.meta.parent_hash.map_or("none".into(), |h| h.to_string()),
        edited.meta.note
    );
    Ok(())
}

fn run_named(name: &str, cfg: &RunConfig) -> CliResult<EvalReport> {
    let lab_cfg = cfg.lab_config();
    let e = &cfg.experiment;
    let stage = |s: &'static str| move || format!("experiment {name} failed at stage {s}");
    if name == "analogy" {
        return run_analogy_suite(&lab_cfg, &e.seeds, &e.budgets).or_exit(EXPERIMENT, stage("run"));
    }
    let lab = Lab::new(lab_cfg).or_exit(EXPERIMENT, stage("pretrain"))?;
    let n = e.bank_size;
    let rep = match name {
        "forget" => run_forgetting(&lab, e.forget_tasks),
        "add" => run_addition(&lab, n, e.subset_mode, e.multitask),
        "domain" => run_domain_generalization(&lab),
        "cosim" => run_cosine_study(&lab, n),
        "trajectory" => run_trajectory(&lab, e.trajectory_task, e.snapshot_every),
        "ensemble" => run_ensemble_study(&lab, n, &all_pairs(n)),
        "lr-seed" => run_lr_seed_study(&lab, e.pair, &e.lrs, &e.lr_seeds),
        _ => unreachable!("names are validated"),
    };
    rep.or_exit(EXPERIMENT, stage("run"))
}

pub fn experiment(name: Option<&str>, config: Option<&Path>, ov: &Overrides) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(config, ov)?;
    let valid = EXPERIMENTS.join(", ");
    let name = match name.map(str::to_string).or_else(|| cfg.experiment.name.clone()) {
        Some(n) => n,
        None => return Err(Failure::config(format!("no experiment named; valid names: {valid}"))),
    };
    if !EXPERIMENTS.contains(&name.as_str()) {
        return Err(Failure::config(format!("unknown experiment {name:?}; valid names: {valid}")));
    }
    cfg.experiment.name = Some(name.clone());
    cfg.lab_config().validate().or_exit(CONFIG, || "invalid experiment settings".into())?;
    let out = cfg.output_dir.clone();
    create_dir(&out, EXPERIMENT)?;
    write_json(&out.join("config.json"), &cfg, EXPERIMENT)?;

    let rep = run_named(&name, &cfg)?;
    rep.save(&out)
        .or_exit(EXPERIMENT, || format!("experiment {name} failed at stage write"))?;
    let mut m = Manifest::new("experiment", &cfg);
    for f in ["config.json", "report.json", "report.csv", "plot_data.csv"] {
        m.output(&out, &out.join(f))?;
    }
    m.write(&out.join("manifest.json"))?;
    println!("experiment {name}: {} rows -> {}", rep.rows.len(), out.display());
    for (k, v) in &rep.summary {
        println!("  {k} = {v}");
    }
    for n in &rep.notes {
        println!("  note: {n}");
    }
    Ok(())
}

pub fn plot_data(report: &Path, out: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(report).or_exit(CONFIG, || format!("cannot read {}", report.display()))?;
    let rep = EvalReport::from_json(&text).or_exit(CONFIG, || format!("invalid report {}", report.display()))?;
    guard_inputs(out, &[report])?;
    let file = std::fs::File::create(out).or_exit(CONFIG, || format!("cannot create {}", out.display()))?;
    rep.write_plot_data(file)
        .or_exit(CONFIG, || format!("cannot write {}", out.display()))?;
    println!("{}: {} series", out.display(), rep.plots.len());
    Ok(())
}

pub fn dataset_export(config: Option<&Path>, ov: &Overrides, task: &str, out: &Path) -> CliResult<()> {
    let cfg = RunConfig::resolve(config, ov)?;
    let data = cfg.dataset(task, cfg.train.seed)?;
    data.write_csv(out)
        .or_exit(CONFIG, || format!("cannot write {}", out.display()))?;
    let mut m = Manifest::new("dataset export", &data.spec);
    m.output(Path::new(""), out)?;
    m.write(&sidecar(out))?;
    println!("{}: {} rows of {}", out.display(), data.inputs().nrows(), data.spec.task_id);
    Ok(())
}

#[derive(Serialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    norm: f64,
}

pub fn inspect(file: &Path) -> CliResult<()> {
    let f = load_tvkp(file).or_exit(CONFIG, || format!("cannot load {}", file.display()))?;
    let tensors: Vec<TensorInfo> = f
        .weights
        .iter()
        .map(|(name, t)| TensorInfo {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            norm: t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt(),
        })
        .collect();
    let info = serde_json::json!({
        "path": file,
        "kind": if f.meta.note == TASK_VECTOR_NOTE { "task_vector" } else { "checkpoint" },
        "meta": f.meta,
        "content_hash": content_hash(&f.weights),
        "numel": f.weights.numel(),
        "global_norm": tensors.iter().map(|t| t.norm * t.norm).sum::<f64>().sqrt(),
        "tensors": tensors,
        "provenance": f.provenance,
    });
    println!("{}", serde_json::to_string_pretty(&info).expect("json"));
    Ok(())
}
