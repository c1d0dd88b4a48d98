//! A miniature detect-then-segment network split into a frozen backbone,
//! per-step feature extractors and a single class-incremental head.

pub mod boxes;
pub mod checkpoint;
pub(crate) mod network;
pub mod params;
pub(crate) mod targets;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};
use crate::scenario::ClassId;
use network::{BoxCache, MaskCache, RpnCache};
pub use params::ParamSet;
use params::Initializer;

/// Architecture and proposal settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub fe_channels: usize,
    pub head_in_channels: usize,
    pub rpn_channels: usize,
    pub anchor_sizes: Vec<f32>,
    /// Height over width.
    pub anchor_ratios: Vec<f32>,
    pub rpn_pre_nms: usize,
    pub rpn_nms: f32,
    pub rpn_top_k_train: usize,
    pub rpn_top_k_eval: usize,
    pub anchor_fg_iou: f32,
    pub anchor_bg_iou: f32,
    pub anchor_batch: usize,
    pub anchor_fg_fraction: f32,
    pub roi_batch: usize,
    pub roi_fg_fraction: f32,
    pub roi_fg_iou: f32,
    pub max_mask_rois: usize,
    pub box_pool: usize,
    pub box_hidden: usize,
    pub mask_pool: usize,
    pub mask_channels: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            backbone_channels: vec![16, 32, 32, 32],
            backbone_strides: vec![2, 2, 1, 1],
            fe_channels: 32,
            head_in_channels: 32,
            rpn_channels: 32,
            anchor_sizes: vec![12.0, 20.0, 32.0],
            anchor_ratios: vec![0.67, 1.5],
            rpn_pre_nms: 300,
            rpn_nms: 0.7,
            rpn_top_k_train: 64,
            rpn_top_k_eval: 32,
            anchor_fg_iou: 0.6,
            anchor_bg_iou: 0.3,
            anchor_batch: 64,
            anchor_fg_fraction: 0.5,
            roi_batch: 32,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
            max_mask_rois: 8,
            box_pool: 7,
            box_hidden: 128,
            mask_pool: 14,
            mask_channels: 16,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("arch config: {m}")));
        if self.backbone_channels.len() != network::BACKBONE_LAYERS.len() || self.backbone_strides.len() != self.backbone_channels.len() {
            return bad(format!("backbone needs {} channel and stride entries", network::BACKBONE_LAYERS.len()));
        }
        if self.fe_channels != self.head_in_channels {
            return bad(format!(
                "feature extractor outputs {} channels but the head expects {}",
                self.fe_channels, self.head_in_channels
            ));
        }
        let sizes = [self.fe_channels, self.rpn_channels, self.box_pool, self.box_hidden, self.mask_pool, self.mask_channels];
        if sizes.contains(&0) || self.backbone_channels.contains(&0) || self.backbone_strides.contains(&0) {
            return bad("zero-sized layer".into());
        }
        if self.anchor_sizes.is_empty() || self.anchor_ratios.is_empty() || self.anchor_sizes.iter().chain(&self.anchor_ratios).any(|&v| !(v > 0.0)) {
            return bad("anchor sizes and ratios must be positive and non-empty".into());
        }
        if self.rpn_top_k_train == 0 || self.rpn_top_k_eval == 0 || self.roi_batch == 0 || self.anchor_batch == 0 {
            return bad("proposal and sampling counts must be positive".into());
        }
        if !(self.anchor_bg_iou <= self.anchor_fg_iou) {
            return bad("anchor_bg_iou must not exceed anchor_fg_iou".into());
        }
        Ok(())
    }

    /// Total downsampling factor between image and feature map.
    pub fn feature_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub(crate) fn feature_scale(&self) -> f32 {
        1.0 / self.feature_stride() as f32
    }

    /// Feature map size for an image of `size` pixels along one axis.
    /// Each 3x3 padded conv of stride `s` maps `n` to `(n - 1) / s + 1`.
    pub fn feature_size(&self, size: usize) -> usize {
        self.backbone_strides.iter().fold(size, |n, &s| (n - 1) / s + 1)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    /// Side of the mask logits grid.
    pub fn mask_size(&self) -> usize {
        2 * self.mask_pool
    }

    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> Vec<BBox> {
        boxes::grid_anchors(feat_h, feat_w, self.feature_stride(), &self.anchor_sizes, &self.anchor_ratios)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeBranch {
    pub params: ParamSet,
    /// Step at which the branch was created.
    pub step: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadEntry {
    pub step: usize,
    /// Foreground classes in head row order (row `i + 1` is `domain[i]`).
    pub domain: Vec<ClassId>,
    /// `None` once the head has been discarded or was not loaded.
    pub params: Option<ParamSet>,
    pub frozen: bool,
}

impl HeadEntry {
    pub fn num_classes(&self) -> usize {
        self.domain.len()
    }

    /// Row of `class` in this head's class layout.
    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.domain.iter().position(|&c| c == class).map(|i| i + 1)
    }

    pub fn params(&self) -> Result<&ParamSet> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("head {} parameters are not loaded", self.step)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub backbone: ParamSet,
    pub backbone_frozen: bool,
    pub fes: Vec<FeBranch>,
    pub heads: Vec<HeadEntry>,
}

/// Features of one image after backbone and one feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    /// `(channels, h, w)`.
    pub data: Array3<f32>,
    /// Source image `(height, width)`.
    pub image_size: (usize, usize),
}

/// Raw head outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `(R, C + 1)` class logits, background first.
    pub p: Array2<f64>,
    /// `(R, 4 (C + 1))` class-specific box deltas.
    pub r: Array2<f64>,
    /// `(A)` objectness logits.
    pub s: Array1<f64>,
    /// `(A, 4)` anchor deltas.
    pub omega: Array2<f64>,
    /// `(M, C + 1, H, W)` mask logits.
    pub m: Array4<f64>,
    /// Boxes the rows of `p`, `r` and `m` were computed on.
    pub rois: Vec<BBox>,
}

/// Gradients of a scalar loss with respect to each [`HeadOutputs`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub p: Array2<f64>,
    pub r: Array2<f64>,
    pub s: Array1<f64>,
    pub omega: Array2<f64>,
    pub m: Array4<f64>,
}

impl OutputGrads {
    pub fn zeros_like(out: &HeadOutputs) -> Self {
        OutputGrads {
            p: Array2::zeros(out.p.raw_dim()),
            r: Array2::zeros(out.r.raw_dim()),
            s: Array1::zeros(out.s.raw_dim()),
            omega: Array2::zeros(out.omega.raw_dim()),
            m: Array4::zeros(out.m.raw_dim()),
        }
    }

    pub fn add(&mut self, other: &OutputGrads) {
        self.p += &other.p;
        self.r += &other.r;
        self.s += &other.s;
        self.omega += &other.omega;
        self.m += &other.m;
    }
}

/// One detected instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: ClassId,
    pub score: f32,
    pub bbox: BBox,
    pub mask: BinaryMask,
    /// Feature extractor that produced the detection.
    pub source_branch: usize,
}

/// Builds a fresh model over `num_base_classes` foreground classes. Class
/// ids default to `1..=num_base_classes`.
pub fn build_model(num_base_classes: usize, arch: &ArchConfig) -> Result<ModelState> {
    let domain: Vec<ClassId> = (1..=num_base_classes as ClassId).collect();
    build_model_with_domain(&domain, arch)
}

pub fn build_model_with_domain(domain: &[ClassId], arch: &ArchConfig) -> Result<ModelState> {
    arch.validate()?;
    if domain.is_empty() {
        return Err(Error::invalid("a model needs at least one class"));
    }
    let unique: BTreeSet<_> = domain.iter().collect();
    if unique.len() != domain.len() || domain.contains(&0) {
        return Err(Error::invalid("class ids must be distinct and non-zero"));
    }
    let init = Initializer::new(arch.seed);
    Ok(ModelState {
        arch: arch.clone(),
        backbone: network::init_backbone(arch, &init),
        backbone_frozen: false,
        fes: vec![FeBranch {
            params: network::init_fe(arch, &init),
            step: 0,
            frozen: false,
        }],
        heads: vec![HeadEntry {
            step: 0,
            domain: domain.to_vec(),
            params: Some(network::init_head(arch, domain.len(), &init)),
            frozen: false,
        }],
    })
}

/// Appends rows for `new_classes` to every class-indexed head layer.
/// Existing rows, including background, are copied unchanged.
pub fn expand_head(head: &HeadEntry, new_classes: &[ClassId], seed: u64) -> Result<HeadEntry> {
    let params = head.params()?;
    let mut seen: BTreeSet<ClassId> = head.domain.iter().copied().collect();
    for &c in new_classes {
        if c == 0 || !seen.insert(c) {
            return Err(Error::InvalidInput(format!("class {c} already in the head domain or invalid")));
        }
    }
    let old_k = head.domain.len() + 1;
    let init = Initializer::new(seed);
    let mut out = params.clone();
    if !new_classes.is_empty() {
        for (name, rows) in network::CLASS_ROWS {
            let old = params.get(name);
            let mut shape = old.shape().to_vec();
            let add = new_classes.len() * rows;
            shape[0] = add;
            let std = network::new_row_std(name);
            let fresh = if std > 0.0 {
                init.normal(&format!("{name}.rows{}", old_k), &shape, std)
            } else {
                params::zeros(&shape)
            };
            let joined = ndarray::concatenate(Axis(0), &[old.view(), fresh.view()])
                .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
            out.insert(name, joined);
        }
    }
    let mut domain = head.domain.clone();
    domain.extend_from_slice(new_classes);
    Ok(HeadEntry {
        step: head.step + 1,
        domain,
        params: Some(out),
        frozen: false,
    })
}

/// Output of the backbone for one image, batched `(1, C, h, w)`.
pub struct BackboneFeatures(pub(crate) Array4<f32>);

impl BackboneFeatures {
    pub fn as_array(&self) -> &Array4<f32> {
        &self.0
    }
}

impl ModelState {
    pub fn current_step(&self) -> usize {
        self.heads.last().map(|h| h.step).unwrap_or(0)
    }

    pub fn last_head(&self) -> &HeadEntry {
        self.heads.last().expect("a model has at least one head")
    }

    pub fn head(&self, t: usize) -> Result<&HeadEntry> {
        self.heads
            .iter()
            .find(|h| h.step == t)
            .ok_or_else(|| Error::InvalidInput(format!("no head for step {t}")))
    }

    pub fn fe(&self, branch: usize) -> Result<&FeBranch> {
        self.fes
            .get(branch)
            .ok_or_else(|| Error::InvalidInput(format!("unknown branch {branch}; model has {} feature extractors", self.fes.len())))
    }

    /// Number of head parameter collections currently held in memory.
    pub fn loaded_heads(&self) -> usize {
        self.heads.iter().filter(|h| h.params.is_some()).count()
    }

    /// Classes introduced at step `t`.
    pub fn step_classes(&self, t: usize) -> Vec<ClassId> {
        let Some(pos) = self.heads.iter().position(|h| h.step == t) else {
            return Vec::new();
        };
        let prev = if pos == 0 { 0 } else { self.heads[pos - 1].domain.len() };
        self.heads[pos].domain[prev..].to_vec()
    }

    /// Classes a branch is responsible for: everything introduced from its
    /// creation step up to the creation of the next branch.
    pub fn branch_domain(&self, branch: usize) -> Result<Vec<ClassId>> {
        let fe = self.fe(branch)?;
        let end = self.fes.get(branch + 1).map(|f| f.step).unwrap_or(usize::MAX);
        Ok(self
            .heads
            .iter()
            .filter(|h| h.step >= fe.step && h.step < end)
            .flat_map(|h| self.step_classes(h.step))
            .collect())
    }

    /// Trainable scalars in the current feature extractor and latest head.
    pub fn trainable_scalars(&self) -> usize {
        let fe: usize = self.fes.iter().filter(|f| !f.frozen).map(|f| f.params.num_scalars()).sum();
        let heads: usize = self
            .heads
            .iter()
            .filter(|h| !h.frozen)
            .filter_map(|h| h.params.as_ref())
            .map(|p| p.num_scalars())
            .sum();
        let bb = if self.backbone_frozen { 0 } else { self.backbone.num_scalars() };
        fe + heads + bb
    }

    pub fn backbone_forward(&self, pixels: &Array3<f32>) -> BackboneFeatures {
        BackboneFeatures(network::backbone_forward(&self.arch, &self.backbone, pixels).0)
    }

    pub fn features_from_backbone(&self, branch: usize, bb: &BackboneFeatures, image_size: (usize, usize)) -> Result<FeatureMaps> {
        let fe = self.fe(branch)?;
        let (out, _) = network::fe_forward(&fe.params, bb.0.clone());
        Ok(FeatureMaps {
            data: out.index_axis_move(Axis(0), 0),
            image_size,
        })
    }

    /// Backbone followed by feature extractor `branch`.
    pub fn forward_features(&self, branch: usize, pixels: &Array3<f32>) -> Result<FeatureMaps> {
        self.fe(branch)?;
        let bb = self.backbone_forward(pixels);
        self.features_from_backbone(branch, &bb, (pixels.dim().1, pixels.dim().2))
    }

    /// Gradient of `sum(grad_out * F(B(x)))` with respect to the parameters
    /// of feature extractor `branch`; all zeros when the branch is frozen.
    pub fn feature_param_grads(&self, branch: usize, pixels: &Array3<f32>, grad_out: &Array3<f32>) -> Result<ParamSet> {
        let fe = self.fe(branch)?;
        if fe.frozen {
            return Ok(fe.params.zeros_like());
        }
        let bb = self.backbone_forward(pixels);
        let (out, cache) = network::fe_forward(&fe.params, bb.0);
        if out.index_axis(Axis(0), 0).dim() != grad_out.dim() {
            return Err(Error::Shape(format!("gradient {:?} vs features {:?}", grad_out.dim(), out.dim())));
        }
        let mut grads = fe.params.zeros_like();
        network::stack_backward(
            &fe.params,
            &network::FE_LAYERS,
            &cache,
            network::batched(grad_out.clone()),
            false,
            Some(&mut grads),
        );
        Ok(grads)
    }

    /// Runs head `t`. Without `proposals` the box and mask branches use the
    /// head's own top-K proposals.
    pub fn forward_head(&self, t: usize, feats: &FeatureMaps, proposals: Option<&[BBox]>) -> Result<HeadOutputs> {
        let head = self.head(t)?;
        let params = head.params()?;
        if feats.data.dim().0 != self.arch.head_in_channels {
            return Err(Error::Shape(format!(
                "features have {} channels, head expects {}",
                feats.data.dim().0,
                self.arch.head_in_channels
            )));
        }
        let feat = network::batched(feats.data.clone());
        let (s, omega, _) = network::rpn_forward(params, &feat);
        let rois = match proposals {
            Some(p) => p.to_vec(),
            None => propose(&self.arch, &s, &omega, (feats.data.dim().1, feats.data.dim().2), feats.image_size, self.arch.rpn_top_k_eval),
        };
        let (p, r, _) = network::box_forward(&self.arch, params, feats.data.view(), &rois);
        let (m, _) = network::mask_forward(&self.arch, params, feats.data.view(), &rois);
        Ok(HeadOutputs { p, r, s, omega, m, rois })
    }

    /// Appends a copy of branch `source` created at the current step and
    /// freezes the source.
    pub fn clone_branch(&mut self, source: usize) -> Result<usize> {
        let params = self.fe(source)?.params.clone();
        self.fes[source].frozen = true;
        let step = self.current_step() + 1;
        self.fes.push(FeBranch { params, step, frozen: false });
        Ok(self.fes.len() - 1)
    }

    /// Keeps only the latest head's parameters in memory.
    pub fn retain_last_head(&mut self) {
        let n = self.heads.len();
        for h in &mut self.heads[..n - 1] {
            h.params = None;
        }
    }

    /// All parameter bytes, for hashing and equality checks.
    pub fn param_sha256(&self) -> String {
        let mut all = ParamSet::new();
        for (k, v) in self.backbone.iter() {
            all.insert(format!("backbone.{k}"), v.clone());
        }
        for (i, fe) in self.fes.iter().enumerate() {
            for (k, v) in fe.params.iter() {
                all.insert(format!("fe{i}.{k}"), v.clone());
            }
        }
        for h in &self.heads {
            if let Some(p) = &h.params {
                for (k, v) in p.iter() {
                    all.insert(format!("head{}.{k}", h.step), v.clone());
                }
            }
        }
        all.sha256()
    }
}

/// Decodes RPN outputs into at most `top_k` proposals after NMS.
pub(crate) fn propose(
    arch: &ArchConfig,
    s: &Array1<f64>,
    omega: &Array2<f64>,
    feat_hw: (usize, usize),
    image_size: (usize, usize),
    top_k: usize,
) -> Vec<BBox> {
    let anchors = arch.anchors(feat_hw.0, feat_hw.1);
    let scores: Vec<f32> = s.iter().map(|&v| v as f32).collect();
    let order = boxes::argsort_desc(&scores);
    let (h, w) = (image_size.0 as f32, image_size.1 as f32);
    let mut cand = Vec::new();
    let mut cand_scores = Vec::new();
    for &i in order.iter().take(arch.rpn_pre_nms) {
        let d = [omega[[i, 0]] as f32, omega[[i, 1]] as f32, omega[[i, 2]] as f32, omega[[i, 3]] as f32];
        let b = boxes::decode(&anchors[i], d, boxes::RPN_WEIGHTS).clip(w, h);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            cand.push(b);
            cand_scores.push(scores[i]);
        }
    }
    let keep = boxes::nms(&cand, &cand_scores, arch.rpn_nms);
    keep.into_iter().take(top_k).map(|i| cand[i]).collect()
}

/// Caches of one head's forward pass, for backpropagation.
pub(crate) struct HeadCaches {
    rpn: RpnCache,
    boxes: BoxCache,
    masks: MaskCache,
}

/// RPN forward only.
pub(crate) fn run_rpn(params: &ParamSet, feat: &Array4<f32>) -> (Array1<f64>, Array2<f64>, RpnCache) {
    network::rpn_forward(params, feat)
}

/// Box branch on `rois` and mask branch on `mask_rois`.
pub(crate) fn run_roi_heads(
    arch: &ArchConfig,
    params: &ParamSet,
    feat: &Array4<f32>,
    rpn: (Array1<f64>, Array2<f64>, RpnCache),
    rois: &[BBox],
    mask_rois: &[BBox],
) -> (HeadOutputs, HeadCaches) {
    let f = network::single(feat);
    let (p, r, bc) = network::box_forward(arch, params, f, rois);
    let (m, mc) = network::mask_forward(arch, params, f, mask_rois);
    let (s, omega, rc) = rpn;
    let out = HeadOutputs {
        p,
        r,
        s,
        omega,
        m,
        rois: rois.to_vec(),
    };
    (out, HeadCaches { rpn: rc, boxes: bc, masks: mc })
}

/// Backpropagates output gradients through a head; returns the gradient
/// with respect to the `(1, C, h, w)` input features.
pub(crate) fn head_backward(arch: &ArchConfig, params: &ParamSet, caches: &HeadCaches, g: &OutputGrads, mut grads: Option<&mut ParamSet>) -> Array4<f32> {
    let mut gf = network::rpn_backward(params, &caches.rpn, &g.s, &g.omega, grads.as_deref_mut());
    let gb = network::box_backward(arch, params, &caches.boxes, &g.p, &g.r, grads.as_deref_mut());
    let gm = network::mask_backward(arch, params, &caches.masks, &g.m, grads.as_deref_mut());
    let mut view = gf.index_axis_mut(Axis(0), 0);
    view += &gb;
    view += &gm;
    gf
}

/// Names of class-indexed head parameters with their rows per class.
pub fn class_indexed_params() -> &'static [(&'static str, usize)] {
    &network::CLASS_ROWS
}
