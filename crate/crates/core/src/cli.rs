//! Command-line driver: dataset generation, training, evaluation,
//! averaging, CKA and plots.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::analysis::{cka_per_class, evaluate, EvalReport, IouKind};
use crate::averaging::{average_into, parse_weight_pairs, sweep_csv, SweepRow};
use crate::dataset::{load_dataset_dir, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::infer::{compose, infer_dataset, infer_dataset_composed, to_jsonl, InferOptions, ImageDetection, EVAL_SCORE_THRESH};
use crate::model::checkpoint::{load_checkpoint, load_for_inference, save_checkpoint};
use crate::model::ModelState;
use crate::plot::{bar_chart, line_chart, Series};
use crate::scenario::{filter_step, ScenarioSpec};
use crate::shapes::generate_shapes_dataset;
use crate::train::{increment_step, joint_train, metrics_csv, train_base, TrainConfig, TrainMode, TrainRun};

#[derive(Parser, Debug)]
#[command(name = "ykd", version, about = "Continual instance segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Force sequential, order-fixed computation.
    #[arg(long)]
    pub deterministic: bool,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ScenarioArgs {
    /// Scenario in `N-k` form.
    #[arg(long, default_value = "3-1")]
    pub scenario: String,
    /// Total number of classes.
    #[arg(long, default_value_t = 4)]
    pub classes: u32,
}

impl ScenarioArgs {
    fn spec(&self) -> Result<ScenarioSpec> {
        ScenarioSpec::parse(&self.scenario, self.classes)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic train and eval splits.
    Generate {
        #[arg(long, default_value_t = 4)]
        classes: u32,
        #[arg(long, default_value_t = 400)]
        images: usize,
        /// Eval split size; defaults to a quarter of `--images`.
        #[arg(long)]
        eval_images: Option<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train backbone, first feature extractor and head on step 0.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Learn the next step's classes from a checkpoint.
    Increment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Non-continual reference on all classes.
    Joint {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Mask AP of a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated branch indices; all when omitted.
        #[arg(long, value_delimiter = ',')]
        branches: Option<Vec<usize>>,
        /// Single route `fe:head`.
        #[arg(long)]
        compose: Option<String>,
        #[arg(long, default_value_t = EVAL_SCORE_THRESH)]
        score_thresh: f32,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Average an earlier head into a later checkpoint's head.
    Average {
        /// Checkpoint holding the earlier head.
        #[arg(long)]
        earlier: PathBuf,
        /// Checkpoint whose latest head is averaged.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Weight pairs `wi,wj` separated by `;`.
        #[arg(long)]
        weights: String,
        /// Eval split for the sweep report.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class linear CKA between two steps' feature extractors.
    Cka {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Two steps, `a,b`.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        steps: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Render CSV outputs as SVG charts.
    Plot {
        /// Sweep, CKA or evaluation-report CSV files.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_text(&read_text(p)?)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{kv}` is not key=value")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn git_hash() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Merges `entry` under `key` into `<dir>/run_manifest.json`.
fn record_run(dir: &Path, key: &str, entry: Value) -> Result<()> {
    let path = dir.join("run_manifest.json");
    let mut doc: BTreeMap<String, Value> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => BTreeMap::new(),
    };
    let mut entry = entry;
    entry["tool_version"] = json!(env!("CARGO_PKG_VERSION"));
    entry["git_hash"] = json!(git_hash());
    doc.insert(key.to_string(), entry);
    write_text(&path, &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn write_training(out: &Path, step: usize, cfg: &TrainConfig, run: &TrainRun) -> Result<PathBuf> {
    create_dir(out)?;
    write_text(&out.join(format!("config_step{step}.txt")), &cfg.to_text())?;
    write_text(&out.join(format!("metrics_step{step}.csv")), &metrics_csv(&run.metrics))?;
    let ckpt = out.join(format!("ckpt_step{step}"));
    save_checkpoint(&run.state, &ckpt)?;
    Ok(ckpt)
}

fn cmd_generate(classes: u32, images: usize, eval_images: Option<usize>, size: usize, force: bool, common: &Common) -> Result<()> {
    if images == 0 {
        return Err(Error::invalid("--images must be positive"));
    }
    let out = &common.out;
    if out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        if !force {
            return Err(Error::invalid(format!("{} already exists; pass --force to replace it", out.display())));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let seed = common.seed.unwrap_or(0);
    let class_set: BTreeSet<u32> = (1..=classes).collect();
    let eval_n = eval_images.unwrap_or_else(|| (images / 4).max(1));
    let train = generate_shapes_dataset(images, &class_set, size, seed)?;
    let eval = generate_shapes_dataset(eval_n, &class_set, size, seed ^ 0x5EED_E7A1)?;
    save_dataset(&train, &out.join("train"))?;
    save_dataset(&eval, &out.join("eval"))?;
    for (name, ds) in [("train", &train), ("eval", &eval)] {
        let counts = ds.class_counts();
        let per_class: Vec<String> = counts.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        println!(
            "{name}: {} images, {} instances, per class {}",
            ds.len(),
            counts.values().sum::<usize>(),
            per_class.join(" ")
        );
    }
    record_run(
        out,
        "generate",
        json!({"classes": classes, "images": images, "eval_images": eval_n, "size": size, "seed": seed}),
    )
}

fn cmd_train_base(data: &Path, scenario: &ScenarioArgs, common: &Common, joint: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = scenario.spec()?;
    let ds = load_dataset_dir(data)?;
    let (run, classes, key) = if joint {
        let classes: Vec<u32> = (1..=spec.total_classes).collect();
        (joint_train(&ds, &classes, &cfg)?, classes, "joint")
    } else {
        let classes = spec.step(0)?.to_vec();
        let filtered = filter_step(&ds, &spec, 0)?;
        (train_base(&filtered, &classes, &cfg)?, classes, "train-base")
    };
    let ckpt = write_training(&common.out, 0, &cfg, &run)?;
    println!("{key}: {} epochs, checkpoint {}", run.metrics.len(), ckpt.display());
    record_run(
        &common.out,
        key,
        json!({"data": data, "scenario": spec.name(), "classes": classes, "seed": cfg.seed,
               "deterministic": cfg.deterministic, "config": cfg, "checkpoint": ckpt}),
    )
}

fn cmd_increment(checkpoint: &Path, data: &Path, mode: Option<TrainMode>, scenario: &ScenarioArgs, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let spec = scenario.spec()?;
    let state = load_checkpoint(checkpoint)?;
    let t = state.current_step() + 1;
    let new_classes = spec.step(t)?.to_vec();
    let ds = filter_step(&load_dataset_dir(data)?, &spec, t)?;
    let run = increment_step(&state, &ds, &new_classes, &cfg)?;
    let ckpt = write_training(&common.out, t, &cfg, &run)?;
    println!(
        "increment step {t} ({}): classes {:?}, {} branches, checkpoint {}",
        cfg.mode,
        new_classes,
        run.state.fes.len(),
        ckpt.display()
    );
    record_run(
        &common.out,
        &format!("increment_step{t}"),
        json!({"from": checkpoint, "data": data, "scenario": spec.name(), "mode": cfg.mode, "classes": new_classes,
               "seed": cfg.seed, "deterministic": cfg.deterministic, "config": cfg, "checkpoint": ckpt,
               "trace": run.trace}),
    )
}

fn parse_compose(text: &str) -> Result<(usize, usize)> {
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("--compose `{text}` must look like fe:head")))?;
    let p = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::invalid(format!("--compose: bad index `{s}`")));
    Ok((p(a)?, p(b)?))
}

/// Scenario restricted to the classes a model has learnt.
fn spec_for(state: &ModelState, scenario: &ScenarioArgs) -> Result<ScenarioSpec> {
    let spec = scenario.spec()?;
    let t = state.current_step();
    let truncated = spec.truncated(t)?;
    if truncated.seen_classes(t) != state.last_head().domain {
        return Err(Error::invalid(format!(
            "checkpoint classes {:?} do not match scenario {} at step {t}",
            state.last_head().domain,
            spec.name()
        )));
    }
    Ok(truncated)
}

fn write_report(out: &Path, dets: &[ImageDetection], report: &EvalReport) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("detections.jsonl"), &to_jsonl(dets)?)?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_text(&out.join("report.txt"), &report.to_table())?;
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(report)? + "\n"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: &Path,
    data: &Path,
    branches: Option<Vec<usize>>,
    composition: Option<&str>,
    score_thresh: f32,
    scenario: &ScenarioArgs,
    common: &Common,
) -> Result<()> {
    let state = load_for_inference(checkpoint)?;
    let ds = load_dataset_dir(data)?;
    let opts = InferOptions {
        branches,
        score_thresh,
        ..InferOptions::default()
    };
    let (dets, spec) = match composition {
        Some(text) => {
            let (fe, head) = parse_compose(text)?;
            let route = compose(&state, fe, head)?;
            let full = scenario.spec()?;
            (infer_dataset_composed(&state, &ds.samples, route, &opts)?, full.truncated(head)?)
        }
        None => (infer_dataset(&state, &ds.samples, &opts)?, spec_for(&state, scenario)?),
    };
    let report = evaluate(&dets, &ds, &spec, IouKind::Mask);
    write_report(&common.out, &dets, &report)?;
    print!("{}", report.to_table());
    record_run(
        &common.out,
        "evaluate",
        json!({"checkpoint": checkpoint, "data": data, "branches": opts.branches, "compose": composition,
               "score_thresh": score_thresh, "scenario": spec.name()}),
    )
}

fn weight_tag(w: f64) -> String {
    format!("{w}").replace('.', "p")
}

fn cmd_average(earlier: &Path, checkpoint: &Path, weights: &str, data: &Path, scenario: &ScenarioArgs, common: &Common) -> Result<()> {
    let pairs = parse_weight_pairs(weights)?;
    let early = load_checkpoint(earlier)?;
    let head_i = early.last_head().clone();
    let state = load_for_inference(checkpoint)?;
    let spec = spec_for(&state, scenario)?;
    let ds = load_dataset_dir(data)?;
    create_dir(&common.out)?;
    let mut rows = Vec::new();
    for &(wi, wj) in &pairs {
        let merged = average_into(&state, &head_i, wi, wj)?;
        let tag = format!("w{}_{}", weight_tag(wi), weight_tag(wj));
        save_checkpoint(&merged, &common.out.join(format!("ckpt_{tag}")))?;
        let dets = infer_dataset(&merged, &ds.samples, &InferOptions::default())?;
        let report = evaluate(&dets, &ds, &spec, IouKind::Mask);
        write_report(&common.out.join(format!("eval_{tag}")), &dets, &report)?;
        rows.push(SweepRow { w_i: wi, w_j: wj, report });
    }
    let csv = sweep_csv(&rows);
    write_text(&common.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    record_run(
        &common.out,
        "average",
        json!({"earlier": earlier, "checkpoint": checkpoint, "weights": pairs, "data": data, "scenario": spec.name()}),
    )
}

fn cmd_cka(checkpoint: &Path, data: &Path, steps: &[usize], common: &Common) -> Result<()> {
    let &[a, b] = steps else {
        return Err(Error::invalid("--steps takes exactly two steps, e.g. 0,1"));
    };
    let state = load_for_inference(checkpoint)?;
    let ds = load_dataset_dir(data)?;
    let report = cka_per_class(&state, a, b, &ds)?;
    create_dir(&common.out)?;
    write_text(&common.out.join("cka.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    record_run(&common.out, "cka", json!({"checkpoint": checkpoint, "data": data, "steps": [a, b], "report": report}))
}

/// A parsed CSV: header plus rows of raw cells.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Table> {
    let text = read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::invalid(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok(Table { header, rows })
}

fn cell(row: &[String], i: usize) -> Option<f64> {
    row.get(i).and_then(|s| s.trim().parse().ok())
}

fn column(t: &Table, name: &str) -> Option<usize> {
    t.header.iter().position(|h| h == name)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into())
}

/// Renders one input; returns the files written.
fn plot_one(path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let t = read_csv(path)?;
    let name = stem(path);
    let mut written = Vec::new();
    let mut emit = |file: String, svg: String| -> Result<()> {
        let p = out.join(file);
        write_text(&p, &svg)?;
        written.push(p);
        Ok(())
    };
    if t.header.first().map(String::as_str) == Some("w_i") {
        let xs: Vec<f64> = t.rows.iter().map(|r| cell(r, 0).unwrap_or(f64::NAN)).collect();
        for (gi, g) in t.header.iter().enumerate().skip(2) {
            let values: Vec<Option<f64>> = t.rows.iter().map(|r| cell(r, gi)).collect();
            if values.iter().all(Option::is_none) {
                continue;
            }
            let series = [Series { name: format!("{g} mAP"), values }];
            emit(format!("{name}_{g}.svg"), line_chart(&format!("{g} mAP vs w_i"), "w_i", "mAP", &xs, &series))?;
        }
    } else if let (Some(ci), Some(ki)) = (column(&t, "class_id"), column(&t, "cka")) {
        let cats: Vec<String> = t.rows.iter().map(|r| format!("class {}", r[ci])).collect();
        let series = [Series { name: "linear CKA".into(), values: t.rows.iter().map(|r| cell(r, ki)).collect() }];
        emit(format!("{name}.svg"), bar_chart("Per-class CKA", "CKA", &cats, &series))?;
    } else if let (Some(ci), Some(mi)) = (column(&t, "class_id"), column(&t, "ap_mean")) {
        let (groups, classes): (Vec<&Vec<String>>, Vec<&Vec<String>>) =
            t.rows.iter().partition(|r| r[ci].parse::<u32>().is_err());
        for (suffix, rows, title) in [("groups", groups, "Grouped mAP"), ("classes", classes, "Per-class mAP")] {
            if rows.is_empty() {
                continue;
            }
            let cats: Vec<String> = rows.iter().map(|r| r[ci].clone()).collect();
            let series = [Series { name: "mAP@[.5:.95]".into(), values: rows.iter().map(|r| cell(r, mi)).collect() }];
            emit(format!("{name}_{suffix}.svg"), bar_chart(title, "mAP", &cats, &series))?;
        }
    } else {
        return Err(Error::invalid(format!("{}: unrecognised CSV header", path.display())));
    }
    Ok(written)
}

fn cmd_plot(inputs: &[PathBuf], common: &Common) -> Result<()> {
    create_dir(&common.out)?;
    let mut all = Vec::new();
    for p in inputs {
        all.extend(plot_one(p, &common.out)?);
    }
    for p in &all {
        println!("{}", p.display());
    }
    record_run(&common.out, "plot", json!({"inputs": inputs, "outputs": all}))
}

/// Executes a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { classes, images, eval_images, size, force, common } => {
            cmd_generate(*classes, *images, *eval_images, *size, *force, common)
        }
        Command::TrainBase { data, scenario, common } => cmd_train_base(data, scenario, common, false),
        Command::Joint { data, scenario, common } => cmd_train_base(data, scenario, common, true),
        Command::Increment { checkpoint, data, mode, scenario, common } => cmd_increment(checkpoint, data, *mode, scenario, common),
        Command::Evaluate { checkpoint, data, branches, compose, score_thresh, scenario, common } => {
            cmd_evaluate(checkpoint, data, branches.clone(), compose.as_deref(), *score_thresh, scenario, common)
        }
        Command::Average { earlier, checkpoint, weights, data, scenario, common } => {
            cmd_average(earlier, checkpoint, weights, data, scenario, common)
        }
        Command::Cka { checkpoint, data, steps, common } => cmd_cka(checkpoint, data, steps, common),
        Command::Plot { inputs, common } => cmd_plot(inputs, common),
    }
}

/// One-line JSON error record.
pub fn error_line(kind: &str, message: &str) -> String {
    let flat: String = message.split_whitespace().collect::<Vec<_>>().join(" ");
    json!({"error": kind, "message": flat}).to_string()
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", error_line("usage", &e.to_string()));
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

/// Image sizes keyed by id, for reading detection files back.
pub fn image_sizes(ds: &Dataset) -> HashMap<String, (usize, usize)> {
    ds.samples.iter().map(|s| (s.image_id.clone(), (s.width(), s.height()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_json_line() {
        let l = error_line("io", "a\nb   c");
        assert!(!l.contains('\n'));
        let v: Value = serde_json::from_str(&l).unwrap();
        assert_eq!(v["message"], "a b c");
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run(["ykd", "generate", "--images", "0", "--out", "/nonexistent/x"]), 1);
        assert_eq!(run(["ykd", "bogus"]), 2);
        assert!(parse_compose("0:1").is_ok());
        assert!(parse_compose("01").is_err());
    }
}
