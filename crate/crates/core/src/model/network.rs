//! Forward and backward passes of the backbone, feature extractor and head
//! blocks for a single image.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, Ix1, Ix2, Ix4};

use super::params::{zeros, Initializer, ParamSet};
use super::ArchConfig;
use crate::mask::BBox;
use crate::nn::{self, ConvCache};

pub(crate) const ROI_SAMPLES: usize = 2;

pub(crate) const BACKBONE_LAYERS: [&str; 4] = ["conv1", "conv2", "conv3", "conv4"];
pub(crate) const FE_LAYERS: [&str; 2] = ["conv1", "conv2"];

/// Head parameters whose leading axis is indexed by class (background
/// first), with the number of rows per class.
pub(crate) const CLASS_ROWS: [(&str, usize); 6] = [
    ("box.cls.weight", 1),
    ("box.cls.bias", 1),
    ("box.reg.weight", 4),
    ("box.reg.bias", 4),
    ("mask.logits.weight", 1),
    ("mask.logits.bias", 1),
];

fn w4<'a>(p: &'a ParamSet, name: &str) -> ndarray::ArrayView4<'a, f32> {
    p.get(name).view().into_dimensionality::<Ix4>().expect("4-d conv weight")
}

fn w2<'a>(p: &'a ParamSet, name: &str) -> ndarray::ArrayView2<'a, f32> {
    p.get(name).view().into_dimensionality::<Ix2>().expect("2-d weight")
}

fn w1<'a>(p: &'a ParamSet, name: &str) -> ndarray::ArrayView1<'a, f32> {
    p.get(name).view().into_dimensionality::<Ix1>().expect("1-d bias")
}

fn add_grad(grads: &mut Option<&mut ParamSet>, name: &str, g: ndarray::ArrayD<f32>) {
    if let Some(gs) = grads.as_mut() {
        gs.add_to(name, g);
    }
}

pub(crate) struct ConvBlockCache {
    conv: ConvCache,
    out: Array4<f32>,
}

fn conv_relu(p: &ParamSet, layer: &str, x: &Array4<f32>, stride: usize) -> (Array4<f32>, ConvBlockCache) {
    let w = w4(p, &format!("{layer}.weight"));
    let pad = w.dim().2 / 2;
    let (mut y, conv) = nn::conv2d(x.view(), w, w1(p, &format!("{layer}.bias")), stride, pad);
    nn::relu_inplace(&mut y);
    (y.clone(), ConvBlockCache { conv, out: y })
}

fn conv_relu_backward(
    p: &ParamSet,
    layer: &str,
    cache: &ConvBlockCache,
    mut grad: Array4<f32>,
    need_input: bool,
    grads: &mut Option<&mut ParamSet>,
) -> Option<Array4<f32>> {
    nn::relu_backward(&mut grad, &cache.out);
    let g = nn::conv2d_backward(grad.view(), w4(p, &format!("{layer}.weight")), &cache.conv, need_input);
    add_grad(grads, &format!("{layer}.weight"), g.weight.into_dyn());
    add_grad(grads, &format!("{layer}.bias"), g.bias.into_dyn());
    g.input
}

/// Caches of a stack of conv+ReLU blocks.
pub(crate) struct StackCache {
    blocks: Vec<ConvBlockCache>,
}

pub(crate) fn stack_forward(p: &ParamSet, layers: &[&str], strides: &[usize], x: Array4<f32>) -> (Array4<f32>, StackCache) {
    let mut cur = x;
    let mut blocks = Vec::with_capacity(layers.len());
    for (layer, &stride) in layers.iter().zip(strides) {
        let (y, c) = conv_relu(p, layer, &cur, stride);
        blocks.push(c);
        cur = y;
    }
    (cur, StackCache { blocks })
}

pub(crate) fn stack_backward(
    p: &ParamSet,
    layers: &[&str],
    cache: &StackCache,
    grad: Array4<f32>,
    need_input: bool,
    mut grads: Option<&mut ParamSet>,
) -> Option<Array4<f32>> {
    let mut g = Some(grad);
    for (i, layer) in layers.iter().enumerate().rev() {
        let needs = i > 0 || need_input;
        g = conv_relu_backward(p, layer, &cache.blocks[i], g.expect("upstream gradient"), needs, &mut grads);
    }
    g
}

/// Image `(3, H, W)` in [0, 1] to a centred `(1, 3, H, W)` batch.
pub(crate) fn prepare_image(pixels: &Array3<f32>) -> Array4<f32> {
    let (c, h, w) = pixels.dim();
    pixels
        .mapv(|v| v - 0.5)
        .into_shape_with_order((1, c, h, w))
        .expect("standard layout image")
}

pub(crate) fn backbone_forward(arch: &ArchConfig, p: &ParamSet, pixels: &Array3<f32>) -> (Array4<f32>, StackCache) {
    stack_forward(p, &BACKBONE_LAYERS, &arch.backbone_strides, prepare_image(pixels))
}

pub(crate) fn fe_forward(p: &ParamSet, x: Array4<f32>) -> (Array4<f32>, StackCache) {
    stack_forward(p, &FE_LAYERS, &[1, 1], x)
}

pub(crate) fn init_backbone(arch: &ArchConfig, init: &Initializer) -> ParamSet {
    let mut p = ParamSet::new();
    let mut cin = 3;
    for (layer, &cout) in BACKBONE_LAYERS.iter().zip(&arch.backbone_channels) {
        p.insert(format!("{layer}.weight"), init.kaiming(&format!("backbone.{layer}"), &[cout, cin, 3, 3], cin * 9));
        p.insert(format!("{layer}.bias"), zeros(&[cout]));
        cin = cout;
    }
    p
}

pub(crate) fn init_fe(arch: &ArchConfig, init: &Initializer) -> ParamSet {
    let mut p = ParamSet::new();
    let mut cin = arch.backbone_channels[3];
    for layer in FE_LAYERS {
        let cout = arch.fe_channels;
        p.insert(format!("{layer}.weight"), init.kaiming(&format!("fe.{layer}"), &[cout, cin, 3, 3], cin * 9));
        p.insert(format!("{layer}.bias"), zeros(&[cout]));
        cin = cout;
    }
    p
}

/// Fresh head over `classes` foreground classes (plus background).
pub(crate) fn init_head(arch: &ArchConfig, classes: usize, init: &Initializer) -> ParamSet {
    let c_in = arch.head_in_channels;
    let a = arch.anchors_per_cell();
    let k = classes + 1;
    let pooled = c_in * arch.box_pool * arch.box_pool;
    let mc = arch.mask_channels;
    let mut p = ParamSet::new();
    p.insert("rpn.conv.weight", init.kaiming("rpn.conv", &[arch.rpn_channels, c_in, 3, 3], c_in * 9));
    p.insert("rpn.conv.bias", zeros(&[arch.rpn_channels]));
    p.insert("rpn.obj.weight", init.normal("rpn.obj", &[a, arch.rpn_channels, 1, 1], 0.01));
    p.insert("rpn.obj.bias", zeros(&[a]));
    p.insert("rpn.delta.weight", init.normal("rpn.delta", &[4 * a, arch.rpn_channels, 1, 1], 0.01));
    p.insert("rpn.delta.bias", zeros(&[4 * a]));
    p.insert("box.fc.weight", init.kaiming("box.fc", &[arch.box_hidden, pooled], pooled));
    p.insert("box.fc.bias", zeros(&[arch.box_hidden]));
    p.insert("box.cls.weight", init.normal("box.cls", &[k, arch.box_hidden], 0.01));
    p.insert("box.cls.bias", zeros(&[k]));
    p.insert("box.reg.weight", init.normal("box.reg", &[4 * k, arch.box_hidden], 0.001));
    p.insert("box.reg.bias", zeros(&[4 * k]));
    p.insert("mask.conv1.weight", init.kaiming("mask.conv1", &[mc, c_in, 3, 3], c_in * 9));
    p.insert("mask.conv1.bias", zeros(&[mc]));
    p.insert("mask.conv2.weight", init.kaiming("mask.conv2", &[mc, mc, 3, 3], mc * 9));
    p.insert("mask.conv2.bias", zeros(&[mc]));
    p.insert("mask.logits.weight", init.kaiming("mask.logits", &[k, mc, 1, 1], mc));
    p.insert("mask.logits.bias", zeros(&[k]));
    p
}

/// Standard deviation used for freshly added class rows.
pub(crate) fn new_row_std(name: &str) -> f32 {
    match name {
        "box.reg.weight" => 0.001,
        n if n.ends_with(".bias") => 0.0,
        _ => 0.01,
    }
}

pub(crate) struct RpnCache {
    hidden: ConvBlockCache,
    obj: ConvCache,
    delta: ConvCache,
    hidden_out: Array4<f32>,
}

/// Objectness per anchor `(A)` and deltas `(A, 4)` in [`super::boxes::grid_anchors`] order.
pub(crate) fn rpn_forward(p: &ParamSet, feat: &Array4<f32>) -> (Array1<f64>, Array2<f64>, RpnCache) {
    let (hidden_out, hidden) = conv_relu(p, "rpn.conv", feat, 1);
    let (obj, obj_cache) = nn::conv2d(hidden_out.view(), w4(p, "rpn.obj.weight"), w1(p, "rpn.obj.bias"), 1, 0);
    let (delta, delta_cache) = nn::conv2d(hidden_out.view(), w4(p, "rpn.delta.weight"), w1(p, "rpn.delta.bias"), 1, 0);
    let (_, a, h, w) = obj.dim();
    let mut s = Array1::zeros(h * w * a);
    let mut omega = Array2::zeros((h * w * a, 4));
    for y in 0..h {
        for x in 0..w {
            for ai in 0..a {
                let idx = (y * w + x) * a + ai;
                s[idx] = obj[[0, ai, y, x]] as f64;
                for k in 0..4 {
                    omega[[idx, k]] = delta[[0, ai * 4 + k, y, x]] as f64;
                }
            }
        }
    }
    let cache = RpnCache {
        hidden,
        obj: obj_cache,
        delta: delta_cache,
        hidden_out,
    };
    (s, omega, cache)
}

pub(crate) fn rpn_backward(
    p: &ParamSet,
    cache: &RpnCache,
    grad_s: &Array1<f64>,
    grad_omega: &Array2<f64>,
    mut grads: Option<&mut ParamSet>,
) -> Array4<f32> {
    let (_, _, h, w) = cache.hidden_out.dim();
    let a = grad_s.len() / (h * w);
    let mut g_obj = Array4::<f32>::zeros((1, a, h, w));
    let mut g_delta = Array4::<f32>::zeros((1, 4 * a, h, w));
    for y in 0..h {
        for x in 0..w {
            for ai in 0..a {
                let idx = (y * w + x) * a + ai;
                g_obj[[0, ai, y, x]] = grad_s[idx] as f32;
                for k in 0..4 {
                    g_delta[[0, ai * 4 + k, y, x]] = grad_omega[[idx, k]] as f32;
                }
            }
        }
    }
    let go = nn::conv2d_backward(g_obj.view(), w4(p, "rpn.obj.weight"), &cache.obj, true);
    let gd = nn::conv2d_backward(g_delta.view(), w4(p, "rpn.delta.weight"), &cache.delta, true);
    add_grad(&mut grads, "rpn.obj.weight", go.weight.into_dyn());
    add_grad(&mut grads, "rpn.obj.bias", go.bias.into_dyn());
    add_grad(&mut grads, "rpn.delta.weight", gd.weight.into_dyn());
    add_grad(&mut grads, "rpn.delta.bias", gd.bias.into_dyn());
    let g_hidden = go.input.unwrap() + gd.input.unwrap();
    conv_relu_backward(p, "rpn.conv", &cache.hidden, g_hidden, true, &mut grads).unwrap()
}

pub(crate) struct BoxCache {
    rois: Vec<BBox>,
    pooled: Array2<f32>,
    hidden: Array2<f32>,
    feat_dim: (usize, usize, usize),
}

pub(crate) fn box_forward(arch: &ArchConfig, p: &ParamSet, feat: ArrayView3<f32>, rois: &[BBox]) -> (Array2<f64>, Array2<f64>, BoxCache) {
    let r = rois.len();
    let (c, _, _) = feat.dim();
    let pool = arch.box_pool;
    let pooled = nn::roi_align(feat, rois, arch.feature_scale(), pool, ROI_SAMPLES)
        .into_shape_with_order((r, c * pool * pool))
        .unwrap();
    let mut hidden = nn::linear(pooled.view(), w2(p, "box.fc.weight"), w1(p, "box.fc.bias"));
    nn::relu_inplace(&mut hidden);
    let cls = nn::linear(hidden.view(), w2(p, "box.cls.weight"), w1(p, "box.cls.bias"));
    let reg = nn::linear(hidden.view(), w2(p, "box.reg.weight"), w1(p, "box.reg.bias"));
    let cache = BoxCache {
        rois: rois.to_vec(),
        pooled,
        hidden,
        feat_dim: feat.dim(),
    };
    (cls.mapv(f64::from), reg.mapv(f64::from), cache)
}

pub(crate) fn box_backward(
    arch: &ArchConfig,
    p: &ParamSet,
    cache: &BoxCache,
    grad_p: &Array2<f64>,
    grad_r: &Array2<f64>,
    mut grads: Option<&mut ParamSet>,
) -> Array3<f32> {
    if cache.rois.is_empty() {
        return Array3::zeros(cache.feat_dim);
    }
    let gp = grad_p.mapv(|v| v as f32);
    let gr = grad_r.mapv(|v| v as f32);
    let gc = nn::linear_backward(gp.view(), cache.hidden.view(), w2(p, "box.cls.weight"));
    let gg = nn::linear_backward(gr.view(), cache.hidden.view(), w2(p, "box.reg.weight"));
    add_grad(&mut grads, "box.cls.weight", gc.weight.into_dyn());
    add_grad(&mut grads, "box.cls.bias", gc.bias.into_dyn());
    add_grad(&mut grads, "box.reg.weight", gg.weight.into_dyn());
    add_grad(&mut grads, "box.reg.bias", gg.bias.into_dyn());
    let mut g_hidden = gc.input + gg.input;
    nn::relu_backward(&mut g_hidden, &cache.hidden);
    let gf = nn::linear_backward(g_hidden.view(), cache.pooled.view(), w2(p, "box.fc.weight"));
    add_grad(&mut grads, "box.fc.weight", gf.weight.into_dyn());
    add_grad(&mut grads, "box.fc.bias", gf.bias.into_dyn());
    let (c, _, _) = cache.feat_dim;
    let pool = arch.box_pool;
    let g_pooled = gf
        .input
        .into_shape_with_order((cache.rois.len(), c, pool, pool))
        .unwrap();
    nn::roi_align_backward(g_pooled.view(), &cache.rois, arch.feature_scale(), cache.feat_dim, ROI_SAMPLES)
}

pub(crate) struct MaskCache {
    rois: Vec<BBox>,
    conv1: Option<ConvBlockCache>,
    conv2: Option<ConvBlockCache>,
    logits: Option<ConvCache>,
    feat_dim: (usize, usize, usize),
}

/// Per-class mask logits `(M, K, 2·pool, 2·pool)`.
pub(crate) fn mask_forward(arch: &ArchConfig, p: &ParamSet, feat: ArrayView3<f32>, rois: &[BBox]) -> (Array4<f64>, MaskCache) {
    let k = p.get("mask.logits.bias").len();
    let size = arch.mask_size();
    if rois.is_empty() {
        let cache = MaskCache {
            rois: Vec::new(),
            conv1: None,
            conv2: None,
            logits: None,
            feat_dim: feat.dim(),
        };
        return (Array4::zeros((0, k, size, size)), cache);
    }
    let pooled = nn::roi_align(feat, rois, arch.feature_scale(), arch.mask_pool, ROI_SAMPLES);
    let (h1, c1) = conv_relu(p, "mask.conv1", &pooled, 1);
    let (h2, c2) = conv_relu(p, "mask.conv2", &h1, 1);
    let up = nn::upsample2x(h2.view());
    let (logits, lc) = nn::conv2d(up.view(), w4(p, "mask.logits.weight"), w1(p, "mask.logits.bias"), 1, 0);
    let cache = MaskCache {
        rois: rois.to_vec(),
        conv1: Some(c1),
        conv2: Some(c2),
        logits: Some(lc),
        feat_dim: feat.dim(),
    };
    (logits.mapv(f64::from), cache)
}

pub(crate) fn mask_backward(arch: &ArchConfig, p: &ParamSet, cache: &MaskCache, grad_m: &Array4<f64>, mut grads: Option<&mut ParamSet>) -> Array3<f32> {
    let (Some(c1), Some(c2), Some(lc)) = (&cache.conv1, &cache.conv2, &cache.logits) else {
        return Array3::zeros(cache.feat_dim);
    };
    let g = grad_m.mapv(|v| v as f32);
    let gl = nn::conv2d_backward(g.view(), w4(p, "mask.logits.weight"), lc, true);
    add_grad(&mut grads, "mask.logits.weight", gl.weight.into_dyn());
    add_grad(&mut grads, "mask.logits.bias", gl.bias.into_dyn());
    let g_h2 = nn::upsample2x_backward(gl.input.unwrap().view());
    let g_h1 = conv_relu_backward(p, "mask.conv2", c2, g_h2, true, &mut grads).unwrap();
    let g_pooled = conv_relu_backward(p, "mask.conv1", c1, g_h1, true, &mut grads).unwrap();
    nn::roi_align_backward(g_pooled.view(), &cache.rois, arch.feature_scale(), cache.feat_dim, ROI_SAMPLES)
}

/// Drops the batch axis of a single-image feature batch.
pub(crate) fn single(feat: &Array4<f32>) -> ArrayView3<'_, f32> {
    feat.index_axis(Axis(0), 0)
}

/// Adds a batch axis.
pub(crate) fn batched(feat: Array3<f32>) -> Array4<f32> {
    feat.insert_axis(Axis(0))
}
