//! Two-step continual run on synthetic shapes comparing the training modes,
//! branch compositions and head averaging.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::analysis::{evaluate, EvalReport, IouKind};
use crate::averaging::average_into;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::infer::{compose, infer_dataset, infer_dataset_composed, InferOptions};
use crate::model::ModelState;
use crate::scenario::{filter_step, ScenarioSpec};
use crate::shapes::generate_shapes_dataset;
use crate::train::{increment_step, train_base, TrainConfig, TrainMode};

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub classes: u32,
    pub base: u32,
    pub increment: u32,
    pub train_images: usize,
    pub eval_images: usize,
    pub image_size: usize,
    pub seed: u64,
    pub base_cfg: TrainConfig,
    pub increment_cfg: TrainConfig,
    /// Weight pairs `(w_0, w_1)` for averaging the base head into the ykd head.
    pub weights: Vec<(f64, f64)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            classes: 4,
            base: 3,
            increment: 1,
            train_images: 400,
            eval_images: 100,
            image_size: 64,
            seed: 0,
            base_cfg: TrainConfig::default(),
            increment_cfg: TrainConfig::default(),
            weights: vec![(0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25), (1.0, 0.0)],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeResult {
    pub mode: TrainMode,
    pub base_map: f64,
    pub new_map: f64,
    pub all_map: f64,
    pub branches: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub seed: u64,
    /// Base-class mAP of the step-0 model.
    pub base_before: f64,
    pub modes: Vec<ModeResult>,
    /// Base-class mAP of the ykd model routed through FE^0 and FE^1 alone.
    pub compose_fe0: f64,
    pub compose_fe1: f64,
    /// `(w_0, w_1, base + intermediary mean, new)` per averaging pair.
    pub sweep: Vec<(f64, f64, f64, f64)>,
}

impl ExperimentResult {
    pub fn mode(&self, mode: TrainMode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

fn group(r: &EvalReport, g: &str) -> f64 {
    r.group(g).unwrap_or(0.0)
}

/// Mean of the base and intermediary group scores that exist.
pub fn old_class_mean(r: &EvalReport) -> f64 {
    let v: Vec<f64> = ["base", "intermediary"].iter().filter_map(|g| r.group(g)).collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn eval_state(state: &ModelState, ds: &Dataset, spec: &ScenarioSpec) -> Result<EvalReport> {
    let dets = infer_dataset(state, &ds.samples, &InferOptions::default())?;
    Ok(evaluate(&dets, ds, spec, IouKind::Mask))
}

pub fn generate_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let classes: BTreeSet<u32> = (1..=cfg.classes).collect();
    let train = generate_shapes_dataset(cfg.train_images, &classes, cfg.image_size, cfg.seed)?;
    let eval = generate_shapes_dataset(cfg.eval_images, &classes, cfg.image_size, cfg.seed ^ 0x5EED_E7A1)?;
    Ok((train, eval))
}

/// Trains step 0, then each mode on step 1, and measures everything.
pub fn run_experiment(cfg: &ExperimentConfig, modes: &[TrainMode]) -> Result<ExperimentResult> {
    let spec = crate::scenario::build_scenario(cfg.classes, cfg.base, cfg.increment)?;
    let (train, eval) = generate_splits(cfg)?;
    let base_cfg = TrainConfig { seed: cfg.seed, ..cfg.base_cfg.clone() };
    let base_run = train_base(&filter_step(&train, &spec, 0)?, spec.step(0)?, &base_cfg)?;
    let spec0 = spec.truncated(0)?;
    let spec1 = spec.truncated(1)?;
    let base_before = group(&eval_state(&base_run.state, &eval, &spec0)?, "base");
    log::info!("seed {}: base mAP before increment {base_before:.4}", cfg.seed);

    let step1 = filter_step(&train, &spec, 1)?;
    let mut modes_out = Vec::new();
    let (mut compose_fe0, mut compose_fe1, mut sweep) = (0.0, 0.0, Vec::new());
    for &mode in modes {
        let inc_cfg = TrainConfig { mode, seed: cfg.seed, ..cfg.increment_cfg.clone() };
        let run = increment_step(&base_run.state, &step1, spec.step(1)?, &inc_cfg)?;
        let report = eval_state(&run.state, &eval, &spec1)?;
        let m = ModeResult {
            mode,
            base_map: group(&report, "base"),
            new_map: group(&report, "new"),
            all_map: group(&report, "all"),
            branches: run.state.fes.len(),
        };
        log::info!("seed {}: {mode}: base {:.4} new {:.4} all {:.4}", cfg.seed, m.base_map, m.new_map, m.all_map);
        modes_out.push(m);
        if mode == TrainMode::Ykd {
            let opts = InferOptions::default();
            for (fe, slot) in [(0, &mut compose_fe0), (1, &mut compose_fe1)] {
                let route = compose(&run.state, fe, 1)?;
                let dets = infer_dataset_composed(&run.state, &eval.samples, route, &opts)?;
                *slot = group(&evaluate(&dets, &eval, &spec1, IouKind::Mask), "base");
            }
            let h0 = base_run.state.last_head();
            for &(w0, w1) in &cfg.weights {
                let merged = average_into(&run.state, h0, w0, w1)?;
                let r = eval_state(&merged, &eval, &spec1)?;
                sweep.push((w0, w1, old_class_mean(&r), group(&r, "new")));
            }
            log::info!("seed {}: compose FE0 {compose_fe0:.4} FE1 {compose_fe1:.4}; sweep {sweep:?}", cfg.seed);
        }
    }
    Ok(ExperimentResult {
        seed: cfg.seed,
        base_before,
        modes: modes_out,
        compose_fe0,
        compose_fe1,
        sweep,
    })
}
