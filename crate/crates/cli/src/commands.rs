use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use duet_core::encoder::Backbone;
use duet_core::pool::{config_digest, PromptPool};
use duet_core::tensor::cosine;
use duet_core::trainer::data::TaskDataset;
use duet_core::trainer::infer::{evaluate_matrix, EvalRun};
use duet_core::trainer::metrics::{digest_hex, MetricsReport};
use duet_core::trainer::synth::{enforce_key_margins, gen_benchmark};
use duet_core::trainer::train::{pretrain_base, train_sequence, TrainConfig};

use crate::config::{ConfigArgs, RunConfig, RunRecord};

const BACKBONE_FILE: &str = "backbone.cpbb";
const RUN_FILE: &str = "run.json";

fn sha256_hex(bytes: &[u8]) -> String {
    let d: [u8; 32] = Sha256::digest(bytes).into();
    digest_hex(&d)
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8], files: &mut Vec<FileEntry>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    files.push(FileEntry {
        name: name.to_string(),
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

fn task_file_name(index: usize) -> String {
    format!("task_{:02}.cpds", index + 1)
}

fn pool_step_name(step: usize) -> String {
    format!("pool_step_{step:02}.cpp1")
}

/// Loads `task_01.cpds, task_02.cpds, ...` from `dir` in index order.
fn load_tasks(dir: &Path) -> Result<Vec<TaskDataset>> {
    let mut tasks = Vec::new();
    loop {
        let path = dir.join(task_file_name(tasks.len()));
        if !path.exists() {
            break;
        }
        tasks.push(TaskDataset::load(&path)?);
    }
    if tasks.is_empty() {
        bail!("no task files (task_01.cpds, ...) in {}", dir.display());
    }
    Ok(tasks)
}

fn parse_order(order: &str, n: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = order
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad order entry {s:?}")))
        .collect::<Result<_>>()?;
    let mut seen = vec![false; n];
    for &i in &idx {
        if i >= n || seen[i] {
            bail!("order {order:?} is not a permutation of 0..{n}");
        }
        seen[i] = true;
    }
    if idx.len() != n {
        bail!("order {order:?} must list all {n} tasks");
    }
    Ok(idx)
}

fn apply_order(tasks: Vec<TaskDataset>, order: &[usize]) -> Vec<TaskDataset> {
    let mut slots: Vec<Option<TaskDataset>> = tasks.into_iter().map(Some).collect();
    order
        .iter()
        .map(|&i| slots[i].take().expect("order is a permutation"))
        .collect()
}

fn print_matrix(report: &MetricsReport) {
    println!("accuracy matrix (rows: steps, columns: {}):", report.task_ids.join(", "));
    for (r, row) in report.matrix.iter().enumerate() {
        let label = if r == 0 {
            "zero-shot ".to_string()
        } else {
            format!("after {:<4}", report.task_ids[r - 1])
        };
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("  {label} {}", cells.join("  "));
    }
    match report.transfer {
        Some(t) => println!("transfer        {t:.4}"),
        None => println!("transfer        n/a (single task)"),
    }
    println!("avg_full_matrix {:.4}", report.avg_full_matrix);
    println!("avg_seen_tasks  {:.4}", report.avg_seen_tasks);
    println!("last            {:.4}", report.last);
}

pub fn gen(args: &ConfigArgs, out: &Path) -> Result<()> {
    let rc = RunConfig::resolve(args)?;
    let bench = gen_benchmark(&rc.encoder, &rc.gen_spec())?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    write_artifact(out, "base.cpds", &bench.base.to_bytes(), &mut files)?;
    for (i, t) in bench.tasks.iter().enumerate() {
        write_artifact(out, &task_file_name(i), &t.to_bytes(), &mut files)?;
    }

    #[derive(Serialize)]
    struct GenManifest<'a> {
        config: &'a RunConfig,
        files: Vec<FileEntry>,
    }
    let manifest = GenManifest { config: &rc, files };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out.join("gen.json"), json)?;

    println!(
        "wrote base split ({} train / {} test) and {} domain tasks to {}",
        bench.base.train.len(),
        bench.base.test.len(),
        bench.tasks.len(),
        out.display()
    );
    Ok(())
}

pub fn pretrain(args: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let rc = RunConfig::resolve(args)?;
    let base = TaskDataset::load(&data.join("base.cpds"))?;
    let mut tasks = load_tasks(data)?;

    let run = pretrain_base(&rc.encoder, &base, &rc.pretrain)?;
    println!(
        "pretrained to held-out accuracy {:.4} in {} iterations",
        run.achieved, run.iterations
    );

    let keys = enforce_key_margins(&run.backbone, &mut tasks, rc.max_cross(), 8, rc.seed)?;
    let mut max_cross: f64 = -1.0;
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            max_cross = max_cross.max(cosine(&keys[i], &keys[j])?);
        }
    }
    println!(
        "task prototypes separated: worst cross similarity {max_cross:.4} (limit {})",
        rc.max_cross()
    );

    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    write_artifact(out, BACKBONE_FILE, &run.backbone.to_bytes(), &mut files)?;
    for (i, t) in tasks.iter().enumerate() {
        write_artifact(out, &task_file_name(i), &t.to_bytes(), &mut files)?;
    }

    #[derive(Serialize)]
    struct PretrainManifest<'a> {
        config: &'a RunConfig,
        iterations: usize,
        achieved: f64,
        max_cross_similarity: f64,
        files: Vec<FileEntry>,
    }
    let manifest = PretrainManifest {
        config: &rc,
        iterations: run.iterations,
        achieved: run.achieved,
        max_cross_similarity: max_cross,
        files,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out.join("pretrain.json"), json)?;
    println!("wrote backbone and calibrated tasks to {}", out.display());
    Ok(())
}

/// Shared by train and eval: run the matrix evaluation and build the report.
fn report_from(
    backbone: &Backbone,
    snapshots: &[PromptPool],
    tasks: &[TaskDataset],
    record: &RunRecord,
) -> Result<(EvalRun, MetricsReport)> {
    let rc = &record.config;
    let eval = evaluate_matrix(backbone, snapshots, tasks, &rc.eval_config())?;
    let digest = config_digest(backbone.cfg(), rc.train.depth, rc.train.plen);
    let report = MetricsReport::new(
        &eval.matrix,
        tasks.iter().map(|t| t.task_id.clone()).collect(),
        rc.seed,
        &digest,
        serde_json::to_value(record)?,
    )?;
    Ok((eval, report))
}

pub struct TrainArgs<'a> {
    pub config: &'a ConfigArgs,
    pub data: &'a Path,
    pub out: &'a Path,
    pub order: Option<&'a str>,
    pub few_shot: Option<usize>,
}

pub fn train(t: &TrainArgs) -> Result<()> {
    let rc = RunConfig::resolve(t.config)?;
    let backbone = Backbone::load(&t.data.join(BACKBONE_FILE))?;
    if backbone.cfg() != &rc.encoder {
        bail!(
            "backbone in {} was built with a different encoder configuration",
            t.data.display()
        );
    }
    let tasks = load_tasks(t.data)?;
    let order = match t.order {
        Some(s) => parse_order(s, tasks.len())?,
        None => (0..tasks.len()).collect(),
    };
    let mut tasks = apply_order(tasks, &order);

    let mut tc = rc.train.clone();
    if let Some(k) = t.few_shot {
        tc.iterations = tc.few_shot_iterations;
        for ds in &mut tasks {
            *ds = ds.few_shot(k, rc.seed);
        }
        println!(
            "few-shot run: {k} images per class, {} iterations per task",
            tc.iterations
        );
    }

    let run = train_sequence(&backbone, &tasks, &tc)?;
    for (ds, trace) in tasks.iter().zip(&run.loss_traces) {
        let last = trace.last().copied().unwrap_or(f64::NAN);
        println!(
            "trained {:<10} {} iterations, final loss {last:.4}",
            ds.task_id,
            trace.len()
        );
    }

    let record = RunRecord {
        config: RunConfig { train: tc, ..rc },
        order,
        few_shot: t.few_shot,
    };
    let (_, report) = report_from(&backbone, &run.snapshots, &tasks, &record)?;

    fs::create_dir_all(t.out)?;
    let mut files = Vec::new();
    for (step, snap) in run.snapshots.iter().enumerate() {
        write_artifact(t.out, &pool_step_name(step), &snap.to_bytes(), &mut files)?;
    }
    write_artifact(t.out, "pool_final.cpp1", &run.pool.to_bytes(), &mut files)?;
    fs::write(t.out.join(RUN_FILE), record.to_json())?;
    fs::write(t.out.join("metrics.json"), report.to_json())?;
    fs::write(t.out.join("metrics.csv"), report.to_csv())?;

    #[derive(Serialize)]
    struct Losses<'a> {
        task_ids: Vec<&'a str>,
        traces: &'a [Vec<f64>],
    }
    let losses = Losses {
        task_ids: tasks.iter().map(|t| t.task_id.as_str()).collect(),
        traces: &run.loss_traces,
    };
    let mut json = serde_json::to_string_pretty(&losses)?;
    json.push('\n');
    fs::write(t.out.join("losses.json"), json)?;

    print_matrix(&report);
    println!("wrote pool snapshots and metrics to {}", t.out.display());
    Ok(())
}

pub fn eval(data: &Path, pool_dir: &Path, out: &Path) -> Result<()> {
    let record = RunRecord::load(&pool_dir.join(RUN_FILE))?;
    let rc = &record.config;
    let backbone = Backbone::load(&data.join(BACKBONE_FILE))?;
    if backbone.cfg() != &rc.encoder {
        bail!("backbone does not match the recorded encoder configuration");
    }
    let tasks = apply_order(load_tasks(data)?, &record.order);

    let expect = config_digest(backbone.cfg(), rc.train.depth, rc.train.plen);
    let mut snapshots = Vec::with_capacity(tasks.len() + 1);
    for step in 0..=tasks.len() {
        let pool = PromptPool::load(&pool_dir.join(pool_step_name(step)))?;
        if pool.digest() != &expect {
            bail!(
                "pool snapshot {} was built under a different configuration",
                pool_step_name(step)
            );
        }
        snapshots.push(pool);
    }

    let (_, report) = report_from(&backbone, &snapshots, &tasks, &record)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), report.to_json())?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    print_matrix(&report);
    println!("wrote metrics to {}", out.display());
    Ok(())
}

pub struct SweepArgs<'a> {
    pub config: &'a ConfigArgs,
    pub data: &'a Path,
    pub out: &'a Path,
    pub axes: &'a [String],
}

enum AxisValues {
    Depth(Vec<usize>),
    Plen(Vec<usize>),
    Lr(Vec<f64>),
    Iterations(Vec<usize>),
}

fn parse_axis(spec: &str) -> Result<AxisValues> {
    let (name, rest) = spec
        .split_once('=')
        .with_context(|| format!("axis {spec:?} must look like name=v1,v2"))?;
    let parse_usizes = || -> Result<Vec<usize>> {
        rest.split(',')
            .map(|v| v.trim().parse::<usize>().with_context(|| format!("bad value {v:?}")))
            .collect()
    };
    let parse_f64s = || -> Result<Vec<f64>> {
        rest.split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad value {v:?}")))
            .collect()
    };
    let axis = match name {
        "depth" => AxisValues::Depth(parse_usizes()?),
        "plen" => AxisValues::Plen(parse_usizes()?),
        "lr" => AxisValues::Lr(parse_f64s()?),
        "iterations" => AxisValues::Iterations(parse_usizes()?),
        other => bail!("unknown sweep axis {other:?}; expected depth, plen, lr or iterations"),
    };
    Ok(axis)
}

fn axis_len(a: &AxisValues) -> usize {
    match a {
        AxisValues::Depth(v) | AxisValues::Plen(v) | AxisValues::Iterations(v) => v.len(),
        AxisValues::Lr(v) => v.len(),
    }
}

fn axis_apply(a: &AxisValues, i: usize, tc: &mut TrainConfig) {
    match a {
        AxisValues::Depth(v) => tc.depth = v[i],
        AxisValues::Plen(v) => tc.plen = v[i],
        AxisValues::Lr(v) => tc.lr = v[i],
        AxisValues::Iterations(v) => tc.iterations = v[i],
    }
}

fn axis_cell(a: &AxisValues, i: usize) -> String {
    match a {
        AxisValues::Depth(v) | AxisValues::Plen(v) | AxisValues::Iterations(v) => v[i].to_string(),
        AxisValues::Lr(v) => v[i].to_string(),
    }
}

fn axis_name(a: &AxisValues) -> &'static str {
    match a {
        AxisValues::Depth(_) => "depth",
        AxisValues::Plen(_) => "plen",
        AxisValues::Lr(_) => "lr",
        AxisValues::Iterations(_) => "iterations",
    }
}

pub fn sweep(s: &SweepArgs) -> Result<()> {
    let rc = RunConfig::resolve(s.config)?;
    if s.axes.is_empty() {
        bail!("sweep needs at least one --axis");
    }
    let axes: Vec<AxisValues> = s.axes.iter().map(|a| parse_axis(a)).collect::<Result<_>>()?;
    let backbone = Backbone::load(&s.data.join(BACKBONE_FILE))?;
    if backbone.cfg() != &rc.encoder {
        bail!(
            "backbone in {} was built with a different encoder configuration",
            s.data.display()
        );
    }
    let tasks = load_tasks(s.data)?;

    let mut head: Vec<&str> = axes.iter().map(|a| axis_name(a)).collect();
    head.extend(["transfer", "avg_full_matrix", "avg_seen_tasks", "last"]);
    let mut csv = format!("{}\n", head.join(","));

    let total: usize = axes.iter().map(axis_len).product();
    for point in 0..total {
        let mut tc = rc.train.clone();
        let mut indices = vec![0usize; axes.len()];
        let mut idx = point;
        for (k, a) in axes.iter().enumerate().rev() {
            indices[k] = idx % axis_len(a);
            idx /= axis_len(a);
        }
        let mut cells = Vec::with_capacity(axes.len() + 4);
        for (k, a) in axes.iter().enumerate() {
            axis_apply(a, indices[k], &mut tc);
            cells.push(axis_cell(a, indices[k]));
        }
        if tc.depth > rc.encoder.layers {
            bail!("depth {} exceeds encoder depth {}", tc.depth, rc.encoder.layers);
        }
        tc.validate()?;

        let run = train_sequence(&backbone, &tasks, &tc)?;
        let record = RunRecord {
            config: RunConfig {
                train: tc.clone(),
                ..rc.clone()
            },
            order: (0..tasks.len()).collect(),
            few_shot: None,
        };
        let (_, report) = report_from(&backbone, &run.snapshots, &tasks, &record)?;
        cells.push(report.transfer.map(|v| v.to_string()).unwrap_or_default());
        cells.push(report.avg_full_matrix.to_string());
        cells.push(report.avg_seen_tasks.to_string());
        cells.push(report.last.to_string());
        csv.push_str(&cells.join(","));
        csv.push('\n');
        println!(
            "point {}/{}: depth={} plen={} lr={} iterations={} -> last {:.4}",
            point + 1,
            total,
            tc.depth,
            tc.plen,
            tc.lr,
            tc.iterations,
            report.last
        );
    }

    fs::create_dir_all(s.out)?;
    fs::write(s.out.join("sweep.csv"), &csv)?;
    println!("wrote sweep grid to {}", s.out.display());
    Ok(())
}

pub fn inspect_pool(path: &Path) -> Result<()> {
    let pool = PromptPool::load(path)?;
    println!("pool {}", path.display());
    println!("  config digest {}", digest_hex(pool.digest()));
    println!("  entries       {}", pool.len());
    for (i, e) in pool.entries().iter().enumerate() {
        let n: usize = e.params.prompts.text().numel()
            + e.params.prompts.vis().numel()
            + e.params.aligner.v2t().numel()
            + e.params.aligner.t2v().numel();
        println!(
            "  [{i}] {:<12} key dim {}, depth {}, rows/layer {}, {n} trainable values",
            e.task_id,
            e.key.numel(),
            e.params.prompts.depth(),
            e.params.prompts.len()
        );
    }
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            let sim = cosine(&pool.entries()[i].key, &pool.entries()[j].key)?;
            println!(
                "  key cosine {} / {}: {sim:.4}",
                pool.entries()[i].task_id,
                pool.entries()[j].task_id
            );
        }
    }
    Ok(())
}
