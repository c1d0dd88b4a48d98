//! Base training, incremental steps (fine-tuning, distillation from a
//! frozen feature extractor, and distillation through a shared feature
//! extractor) and joint training.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::losses::{self, KdTerms, KdWeights, SupervisedTargets};
use crate::model::network::{self, StackCache, BACKBONE_LAYERS, FE_LAYERS};
use crate::model::targets::{self, GtInstance};
use crate::model::{self, build_model_with_domain, expand_head, ArchConfig, HeadEntry, ModelState, ParamSet};
use crate::scenario::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Finetune,
    KdFrozen,
    Ykd,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(TrainMode::Finetune),
            "kd_frozen" => Ok(TrainMode::KdFrozen),
            "ykd" => Ok(TrainMode::Ykd),
            other => Err(Error::InvalidInput(format!("unknown mode `{other}` (expected finetune, kd_frozen or ykd)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Finetune => "finetune",
            TrainMode::KdFrozen => "kd_frozen",
            TrainMode::Ykd => "ykd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub kd: KdWeights,
    pub tau_reg: f64,
    pub tau_obj: f64,
    /// Sequential per-image computation. Results do not depend on it since
    /// gradients are always reduced in image order.
    pub deterministic: bool,
    pub hflip: bool,
    /// Let distillation gradients flow through the teacher head into the
    /// shared feature extractor.
    pub teacher_grad: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Ykd,
            epochs: 12,
            batch_size: 8,
            lr: 0.02,
            lr_step: 8,
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            seed: 0,
            kd: KdWeights::default(),
            tau_reg: 0.5,
            tau_obj: 0.7,
            deterministic: true,
            hflip: true,
            teacher_grad: false,
            arch: ArchConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidInput(format!("config key `{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidInput(format!("config key `{key}`: expected a boolean, got `{v}`"))),
    }
}

impl TrainConfig {
    /// Applies one `key=value` setting. Architecture fields are addressed
    /// as `arch.<field>`; list values are comma separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_step" => self.lr_step = parse_num(key, v)?,
            "lr_gamma" => self.lr_gamma = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "lambda1" => self.kd.lambda1 = parse_num(key, v)?,
            "lambda2" => self.kd.lambda2 = parse_num(key, v)?,
            "lambda3" => self.kd.lambda3 = parse_num(key, v)?,
            "tau_reg" => self.tau_reg = parse_num(key, v)?,
            "tau_obj" => self.tau_obj = parse_num(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "hflip" => self.hflip = parse_bool(key, v)?,
            "teacher_grad" => self.teacher_grad = parse_bool(key, v)?,
            k if k.starts_with("arch.") => {
                let field = &k[5..];
                let mut json = serde_json::to_value(&self.arch)?;
                let obj = json.as_object_mut().expect("arch serialises to an object");
                let current = obj
                    .get(field)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown config key `{k}`")))?;
                let parsed = if current.is_array() {
                    let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                    serde_json::from_str(&format!("[{}]", items.join(",")))
                } else {
                    serde_json::from_str(v)
                }
                .map_err(|_| Error::InvalidInput(format!("config key `{k}`: cannot parse `{v}`")))?;
                obj.insert(field.to_string(), parsed);
                self.arch = serde_json::from_value(json).map_err(|e| Error::InvalidInput(format!("config key `{k}`: {e}")))?;
            }
            other => return Err(Error::InvalidInput(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses flat `key=value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Canonical `key=value` rendering that [`TrainConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "mode={}\nepochs={}\nbatch_size={}\nlr={}\nlr_step={}\nlr_gamma={}\nmomentum={}\nweight_decay={}\nclip_norm={}\nseed={}\n\
             lambda1={}\nlambda2={}\nlambda3={}\ntau_reg={}\ntau_obj={}\ndeterministic={}\nhflip={}\nteacher_grad={}\n",
            self.mode,
            self.epochs,
            self.batch_size,
            self.lr,
            self.lr_step,
            self.lr_gamma,
            self.momentum,
            self.weight_decay,
            self.clip_norm,
            self.seed,
            self.kd.lambda1,
            self.kd.lambda2,
            self.kd.lambda3,
            self.tau_reg,
            self.tau_obj,
            self.deterministic,
            self.hflip,
            self.teacher_grad
        );
        if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(&self.arch) {
            for (k, v) in map {
                let text = match v {
                    serde_json::Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
                    other => other.to_string(),
                };
                out.push_str(&format!("arch.{k}={text}\n"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.kd.validate()?;
        self.arch.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.lr_step == 0 {
            return Err(Error::invalid("lr_step must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Effective distillation weights; zero in fine-tuning mode.
    pub fn effective_kd(&self) -> KdWeights {
        match self.mode {
            TrainMode::Finetune => KdWeights::ZERO,
            _ => self.kd,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step) as i32)
    }
}

/// Mean losses of one epoch; distillation terms are unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_sup: f64,
    pub loss_kd_box: f64,
    pub loss_kd_rpn: f64,
    pub loss_kd_mask: f64,
    pub map_all: Option<f64>,
}

impl EpochMetrics {
    pub fn total(&self, w: &KdWeights) -> f64 {
        losses::total_loss(
            self.loss_sup,
            KdTerms {
                box_kd: self.loss_kd_box,
                rpn_kd: self.loss_kd_rpn,
                mask_kd: self.loss_kd_mask,
            },
            w,
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss_sup,loss_kd_box,loss_kd_rpn,loss_kd_mask,map_all\n");
    for m in rows {
        let map = m.map_all.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            m.epoch, m.loss_sup, m.loss_kd_box, m.loss_kd_rpn, m.loss_kd_mask, map
        ));
    }
    out
}

/// Observations recorded while training, for structural checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    /// Per batch: whether teacher and student heads consumed identical
    /// feature values for every image.
    pub shared_features: Vec<bool>,
    /// Parameter collections consumed by the step (backbone, feature
    /// extractors, heads).
    pub live_collections: usize,
    /// Trainable scalars updated by the optimiser.
    pub trainable_scalars: usize,
    pub teacher_sha256_before: Option<String>,
    pub teacher_sha256_after: Option<String>,
    pub backbone_sha256_before: String,
    pub backbone_sha256_after: String,
}

pub struct TrainRun {
    pub state: ModelState,
    pub metrics: Vec<EpochMetrics>,
    pub trace: TrainTrace,
}

/// Optional evaluation hook run after every epoch; its value fills `map_all`.
pub type EpochEval<'a> = &'a (dyn Fn(&ModelState) -> Result<f64> + Sync);

/// The collections a step optimises, keyed `backbone.*`, `fe.*`, `head.*`.
struct Trainable {
    backbone: Option<ParamSet>,
    fe: ParamSet,
    head: ParamSet,
    domain: Vec<ClassId>,
}

impl Trainable {
    fn flatten(&self) -> ParamSet {
        let mut out = ParamSet::new();
        if let Some(b) = &self.backbone {
            for (k, v) in b.iter() {
                out.insert(format!("backbone.{k}"), v.clone());
            }
        }
        for (k, v) in self.fe.iter() {
            out.insert(format!("fe.{k}"), v.clone());
        }
        for (k, v) in self.head.iter() {
            out.insert(format!("head.{k}"), v.clone());
        }
        out
    }

    fn param_mut(&mut self, key: &str) -> &mut ndarray::ArrayD<f32> {
        let (prefix, name) = key.split_once('.').expect("prefixed key");
        match prefix {
            "backbone" => self.backbone.as_mut().expect("trainable backbone").get_mut(name),
            "fe" => self.fe.get_mut(name),
            _ => self.head.get_mut(name),
        }
    }
}

/// Frozen parts consumed by the step.
struct Frozen<'a> {
    backbone: Option<&'a ParamSet>,
    teacher: Option<&'a HeadEntry>,
    /// Feature extractor feeding the teacher in `kd_frozen` mode.
    teacher_fe: Option<&'a ParamSet>,
}

struct ImageResult {
    grads: ParamSet,
    sup: f64,
    kd: KdTerms,
    shared: bool,
}

fn image_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn image_step(
    cfg: &TrainConfig,
    train: &Trainable,
    frozen: &Frozen,
    sample: &ImageSample,
    rng: &mut ChaCha8Rng,
) -> Result<ImageResult> {
    let arch = &cfg.arch;
    let flipped;
    let sample = if cfg.hflip && rng.random_bool(0.5) {
        flipped = sample.flip_horizontal();
        &flipped
    } else {
        sample
    };
    let bb_params = train.backbone.as_ref().or(frozen.backbone).expect("a backbone");
    let (bb_out, bb_cache) = network::backbone_forward(arch, bb_params, &sample.pixels);
    let (x_t, fe_cache): (Array4<f32>, StackCache) = network::fe_forward(&train.fe, bb_out.clone());

    let mut gts = Vec::with_capacity(sample.annotations.len());
    for a in &sample.annotations {
        let label = train
            .domain
            .iter()
            .position(|&c| c == a.class_id)
            .map(|i| i + 1)
            .ok_or_else(|| Error::InvalidInput(format!("image {} has class {} outside the trained domain", sample.image_id, a.class_id)))?;
        gts.push(GtInstance {
            bbox: a.bbox,
            label,
            mask: &a.mask,
        });
    }

    let (fh, fw) = (x_t.dim().2, x_t.dim().3);
    let image_size = (sample.height(), sample.width());
    let rpn = model::run_rpn(&train.head, &x_t);
    let anchors = arch.anchors(fh, fw);
    let (anchor_labels, anchor_deltas) = targets::anchor_targets(arch, &anchors, &gts, rng);
    let proposals = model::propose(arch, &rpn.0, &rpn.1, (fh, fw), image_size, arch.rpn_top_k_train);
    let rois = targets::sample_rois(arch, &proposals, &gts, rng);

    let kd_w = cfg.effective_kd();
    let teacher = frozen.teacher.filter(|_| cfg.mode != TrainMode::Finetune);
    let mut mask_rois = rois.mask_rois.clone();
    if teacher.is_some() {
        // unlabelled objects of old classes appear among the top proposals
        let extra = arch.max_mask_rois.saturating_sub(mask_rois.len()).max(arch.max_mask_rois / 2);
        mask_rois.extend(proposals.iter().take(extra).copied());
    }

    let (s_out, s_caches) = model::run_roi_heads(arch, &train.head, &x_t, rpn, &rois.rois, &mask_rois);
    let sup_targets = SupervisedTargets {
        anchor_labels,
        anchor_deltas,
        roi_labels: rois.labels,
        roi_deltas: rois.deltas,
        mask_labels: rois.mask_labels,
        mask_targets: rois.mask_targets,
    };
    let (parts, mut g) = losses::supervised_loss(&s_out, &sup_targets)?;

    let mut kd = KdTerms::default();
    let mut shared = false;
    let mut teacher_feat_grad: Option<Array4<f32>> = None;
    if let Some(t) = teacher {
        let tp = t.params()?;
        let x_teacher = match frozen.teacher_fe {
            Some(fe) => network::fe_forward(fe, bb_out.clone()).0,
            None => x_t.clone(),
        };
        shared = x_teacher == x_t;
        let t_rpn = model::run_rpn(tp, &x_teacher);
        let (t_out, t_caches) = model::run_roi_heads(arch, tp, &x_teacher, t_rpn, &rois.rois, &mask_rois);
        let (terms, gk) = losses::distillation(&t_out, &s_out, &kd_w, cfg.tau_reg, cfg.tau_obj)?;
        kd = terms;
        g.add(&gk);
        if cfg.teacher_grad && frozen.teacher_fe.is_none() {
            let gt = losses::distillation_teacher_grads(&t_out, &s_out, &kd_w, cfg.tau_reg, cfg.tau_obj)?;
            teacher_feat_grad = Some(model::head_backward(arch, tp, &t_caches, &gt, None));
        }
    }

    let mut grads = ParamSet::new();
    let mut head_grads = ParamSet::new();
    let mut g_feat = model::head_backward(arch, &train.head, &s_caches, &g, Some(&mut head_grads));
    if let Some(tg) = teacher_feat_grad {
        g_feat += &tg;
    }
    let mut fe_grads = ParamSet::new();
    let need_bb = train.backbone.is_some();
    let g_bb = network::stack_backward(&train.fe, &FE_LAYERS, &fe_cache, g_feat, need_bb, Some(&mut fe_grads));
    for (k, v) in head_grads.iter() {
        grads.insert(format!("head.{k}"), v.clone());
    }
    for (k, v) in fe_grads.iter() {
        grads.insert(format!("fe.{k}"), v.clone());
    }
    if let (Some(bb), Some(gb)) = (&train.backbone, g_bb) {
        let mut bb_grads = ParamSet::new();
        network::stack_backward(bb, &BACKBONE_LAYERS, &bb_cache, gb, false, Some(&mut bb_grads));
        for (k, v) in bb_grads.iter() {
            grads.insert(format!("backbone.{k}"), v.clone());
        }
    }
    Ok(ImageResult {
        grads,
        sup: parts.total(),
        kd,
        shared,
    })
}

fn fit(
    cfg: &TrainConfig,
    dataset: &Dataset,
    train: &mut Trainable,
    frozen: &Frozen,
    mut snapshot: impl FnMut(&Trainable) -> ModelState,
    eval: Option<EpochEval>,
) -> Result<(Vec<EpochMetrics>, Vec<bool>)> {
    let mut velocity = train.flatten().zeros_like();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut shared_log = Vec::new();
    let n = dataset.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch) as f32;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 * 0x9E37_79B9)));
        let (mut sup, mut kbox, mut krpn, mut kmask) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let run = |&idx: &usize| {
                let mut rng = image_rng(cfg.seed, epoch, idx);
                image_step(cfg, train, frozen, &dataset.samples[idx], &mut rng)
            };
            let results: Vec<ImageResult> = if cfg.deterministic {
                batch.iter().map(run).collect::<Result<_>>()?
            } else {
                batch.par_iter().map(run).collect::<Result<_>>()?
            };
            let mut total = ParamSet::new();
            let mut shared = true;
            for r in &results {
                total.accumulate(&r.grads);
                sup += r.sup;
                kbox += r.kd.box_kd;
                krpn += r.kd.rpn_kd;
                kmask += r.kd.mask_kd;
                shared &= r.shared;
            }
            if frozen.teacher.is_some() && cfg.mode != TrainMode::Finetune {
                shared_log.push(shared);
            }
            total.scale(1.0 / results.len() as f32);
            sgd_step(cfg, train, &mut velocity, &total, lr);
        }
        let count = n.max(1) as f64;
        let map_all = match eval {
            Some(f) => Some(f(&snapshot(train))?),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            loss_sup: sup / count,
            loss_kd_box: kbox / count,
            loss_kd_rpn: krpn / count,
            loss_kd_mask: kmask / count,
            map_all,
        };
        log::info!(
            "epoch {epoch}: sup {:.4} kd_box {:.4} kd_rpn {:.4} kd_mask {:.4}",
            m.loss_sup,
            m.loss_kd_box,
            m.loss_kd_rpn,
            m.loss_kd_mask
        );
        metrics.push(m);
    }
    Ok((metrics, shared_log))
}

fn sgd_step(cfg: &TrainConfig, train: &mut Trainable, velocity: &mut ParamSet, grads: &ParamSet, lr: f32) {
    let norm = grads.iter().map(|(_, g)| g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sum::<f64>().sqrt();
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        (cfg.clip_norm / norm) as f32
    } else {
        1.0
    };
    let mu = cfg.momentum as f32;
    let wd = cfg.weight_decay as f32;
    for (key, v) in velocity.iter_mut() {
        let Some(g) = grads.try_get(key) else { continue };
        let p = train.param_mut(key);
        let decay = if p.ndim() > 1 { wd } else { 0.0 };
        ndarray::Zip::from(&mut *v).and(&mut *p).and(g).for_each(|v, p, &g| {
            *v = mu * *v + clip * g + decay * *p;
            *p -= lr * *v;
        });
    }
}

fn check_labels(dataset: &Dataset, allowed: &BTreeSet<ClassId>) -> Result<()> {
    for s in &dataset.samples {
        if let Some(a) = s.annotations.iter().find(|a| !allowed.contains(&a.class_id)) {
            return Err(Error::InvalidInput(format!(
                "image {} is labelled with class {} which is not trained at this step",
                s.image_id, a.class_id
            )));
        }
    }
    Ok(())
}

/// Trains backbone, feature extractor and head on the base classes, then
/// freezes the backbone.
pub fn train_base(dataset: &Dataset, classes: &[ClassId], cfg: &TrainConfig) -> Result<TrainRun> {
    train_base_with(dataset, classes, cfg, None)
}

pub fn train_base_with(dataset: &Dataset, classes: &[ClassId], cfg: &TrainConfig, eval: Option<EpochEval>) -> Result<TrainRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    check_labels(dataset, &classes.iter().copied().collect())?;
    let mut arch = cfg.arch.clone();
    arch.seed = cfg.seed;
    let init = build_model_with_domain(classes, &arch)?;
    let backbone_before = init.backbone.sha256();
    let mut train = Trainable {
        backbone: Some(init.backbone.clone()),
        fe: init.fes[0].params.clone(),
        head: init.last_head().params()?.clone(),
        domain: classes.to_vec(),
    };
    let frozen = Frozen {
        backbone: None,
        teacher: None,
        teacher_fe: None,
    };
    let assemble = |t: &Trainable| {
        let mut s = init.clone();
        s.backbone = t.backbone.clone().expect("trainable backbone");
        s.fes[0].params = t.fe.clone();
        s.heads[0].params = Some(t.head.clone());
        s
    };
    let trainable_scalars = train.flatten().num_scalars();
    let (metrics, _) = fit(cfg, dataset, &mut train, &frozen, assemble, eval)?;
    let mut state = assemble(&train);
    state.backbone_frozen = true;
    let trace = TrainTrace {
        live_collections: 3,
        trainable_scalars,
        backbone_sha256_before: backbone_before,
        backbone_sha256_after: state.backbone.sha256(),
        ..TrainTrace::default()
    };
    Ok(TrainRun { state, metrics, trace })
}

/// Non-continual reference trained on every class at once.
pub fn joint_train(dataset: &Dataset, classes: &[ClassId], cfg: &TrainConfig) -> Result<TrainRun> {
    train_base(dataset, classes, cfg)
}

/// One incremental step over `new_classes`.
pub fn increment_step(state: &ModelState, dataset: &Dataset, new_classes: &[ClassId], cfg: &TrainConfig) -> Result<TrainRun> {
    increment_step_with(state, dataset, new_classes, cfg, None)
}

pub fn increment_step_with(
    state: &ModelState,
    dataset: &Dataset,
    new_classes: &[ClassId],
    cfg: &TrainConfig,
    eval: Option<EpochEval>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.arch.feature_stride() != state.arch.feature_stride() {
        log::warn!("architecture overrides are ignored when incrementing a trained model");
    }
    let cfg = &TrainConfig {
        arch: state.arch.clone(),
        ..cfg.clone()
    };
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if new_classes.is_empty() {
        return Err(Error::invalid("an increment needs at least one new class"));
    }
    let prev = state.last_head();
    if let Some(c) = new_classes.iter().find(|c| prev.domain.contains(c)) {
        return Err(Error::InvalidInput(format!("class {c} is already known to the model")));
    }
    check_labels(dataset, &new_classes.iter().copied().collect())?;
    let t = prev.step + 1;
    let student_head = expand_head(prev, new_classes, cfg.seed ^ (t as u64).wrapping_mul(0x2545_F491_4F6C_DD1D))?;
    let teacher_sha = prev.params()?.sha256();

    let mut state_out = state.clone();
    state_out.backbone_frozen = true;
    // earlier heads are not needed any more
    let n = state_out.heads.len();
    for h in &mut state_out.heads[..n - 1] {
        h.params = None;
    }
    let source = state_out.fes.len() - 1;
    let branch = match cfg.mode {
        TrainMode::Finetune => source,
        TrainMode::Ykd | TrainMode::KdFrozen => state_out.clone_branch(source)?,
    };
    let mut train = Trainable {
        backbone: None,
        fe: state_out.fes[branch].params.clone(),
        head: student_head.params()?.clone(),
        domain: student_head.domain.clone(),
    };
    let teacher_fe = state.fes[source].params.clone();
    let frozen = Frozen {
        backbone: Some(&state.backbone),
        teacher: Some(prev),
        teacher_fe: (cfg.mode == TrainMode::KdFrozen).then_some(&teacher_fe),
    };
    let live_collections = match cfg.mode {
        TrainMode::Finetune => 3,
        TrainMode::Ykd => 4,
        TrainMode::KdFrozen => 5,
    };
    let template = {
        let mut s = state_out.clone();
        s.heads.push(student_head.clone());
        s
    };
    let assemble = |tr: &Trainable| {
        let mut s = template.clone();
        s.fes[branch].params = tr.fe.clone();
        s.heads.last_mut().unwrap().params = Some(tr.head.clone());
        s
    };
    let trainable_scalars = train.flatten().num_scalars();
    let (metrics, shared) = fit(cfg, dataset, &mut train, &frozen, assemble, eval)?;
    let mut out = assemble(&train);
    for fe in &mut out.fes {
        fe.frozen = true;
    }
    let last = out.heads.len() - 1;
    out.heads[last - 1].frozen = true;
    let trace = TrainTrace {
        shared_features: shared,
        live_collections,
        trainable_scalars,
        teacher_sha256_before: Some(teacher_sha),
        teacher_sha256_after: Some(prev.params()?.sha256()),
        backbone_sha256_before: state.backbone.sha256(),
        backbone_sha256_after: out.backbone.sha256(),
    };
    Ok(TrainRun { state: out, metrics, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::generate_shapes_dataset;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            hflip: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("mode", "kd_frozen").unwrap();
        cfg.set("lambda2", "0.5").unwrap();
        cfg.set("arch.anchor_sizes", "8,16").unwrap();
        cfg.set("arch.box_hidden", "64").unwrap();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::parse("nonsense=1").is_err());
        assert!(TrainConfig::parse("mode=sideways").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
    }

    #[test]
    fn finetune_disables_kd() {
        let cfg = TrainConfig {
            mode: TrainMode::Finetune,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_kd(), KdWeights::ZERO);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let classes: BTreeSet<ClassId> = [1, 2].into();
        let ds = generate_shapes_dataset(4, &classes, 32, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let run = train_base(&ds, &[1, 2], &cfg).unwrap();
        let mut arch = cfg.arch.clone();
        arch.seed = cfg.seed;
        let init = build_model_with_domain(&[1, 2], &arch).unwrap();
        assert_eq!(run.state.param_sha256(), init.param_sha256());
        assert!(run.state.backbone_frozen && !init.backbone_frozen);
        assert!(run.metrics.is_empty());
    }

    #[test]
    fn rejects_bad_increments() {
        let classes: BTreeSet<ClassId> = [1, 2].into();
        let ds = generate_shapes_dataset(4, &classes, 32, 1).unwrap();
        let run = train_base(&ds, &[1, 2], &TrainConfig { epochs: 0, ..tiny_cfg() }).unwrap();
        assert!(increment_step(&run.state, &ds, &[2], &tiny_cfg()).is_err());
        // labels of class 1 are out of step for an increment over {3}
        assert!(increment_step(&run.state, &ds, &[3], &tiny_cfg()).is_err());
        assert!(train_base(&Dataset::default(), &[1], &tiny_cfg()).is_err());
    }

    #[test]
    fn increment_modes_shape_the_state() {
        let base: BTreeSet<ClassId> = [1, 2].into();
        let ds0 = generate_shapes_dataset(4, &base, 32, 1).unwrap();
        let ds1 = generate_shapes_dataset(8, &[3].into(), 32, 2).unwrap();
        let run = train_base(&ds0, &[1, 2], &tiny_cfg()).unwrap();
        for mode in [TrainMode::Finetune, TrainMode::KdFrozen, TrainMode::Ykd] {
            let cfg = TrainConfig { mode, ..tiny_cfg() };
            let inc = increment_step(&run.state, &ds1, &[3], &cfg).unwrap();
            let s = &inc.state;
            assert_eq!(s.fes.len(), if mode == TrainMode::Finetune { 1 } else { 2 }, "{mode}");
            assert_eq!(s.last_head().domain, vec![1, 2, 3]);
            assert_eq!(inc.trace.teacher_sha256_before, inc.trace.teacher_sha256_after);
            assert_eq!(inc.trace.backbone_sha256_before, inc.trace.backbone_sha256_after);
            assert_eq!(s.backbone, run.state.backbone);
            match mode {
                TrainMode::Ykd => assert!(inc.trace.shared_features.iter().all(|&b| b)),
                TrainMode::KdFrozen => assert!(!inc.trace.shared_features[1..].iter().any(|&b| b)),
                TrainMode::Finetune => assert!(inc.trace.shared_features.is_empty()),
            }
            if mode != TrainMode::Finetune {
                let expected = s.fes[1].params.num_scalars() + s.last_head().params().unwrap().num_scalars();
                assert_eq!(inc.trace.trainable_scalars, expected);
                assert_eq!(s.fes[0].params, run.state.fes[0].params);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let classes: BTreeSet<ClassId> = [1].into();
        let ds = generate_shapes_dataset(6, &classes, 32, 5).unwrap();
        let cfg = TrainConfig { hflip: true, ..tiny_cfg() };
        let a = train_base(&ds, &[1], &cfg).unwrap();
        let b = train_base(&ds, &[1], &cfg).unwrap();
        assert_eq!(a.state.param_sha256(), b.state.param_sha256());
        let par = TrainConfig {
            deterministic: false,
            ..cfg
        };
        let c = train_base(&ds, &[1], &par).unwrap();
        assert_eq!(a.state.param_sha256(), c.state.param_sha256());
    }
}
