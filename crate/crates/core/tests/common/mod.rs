//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ykd::dataset::{Dataset, ImageSample, InstanceAnnotation};
use ykd::infer::ImageDetection;
use ykd::mask::{BBox, BinaryMask};
use ykd::model::{Detection, HeadOutputs};
use ykd::scenario::ClassId;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    rng.sample::<f64, _>(StandardNormal) * scale
}

pub fn array2(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || normal(rng, scale))
}

pub fn array4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), scale: f64) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || normal(rng, scale))
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Flattens head outputs into one vector (p, r, s, omega, m order).
pub fn flatten(out: &HeadOutputs) -> Vec<f64> {
    out.p
        .iter()
        .chain(out.r.iter())
        .chain(out.s.iter())
        .chain(out.omega.iter())
        .chain(out.m.iter())
        .copied()
        .collect()
}

pub fn flatten_grads(g: &ykd::model::OutputGrads) -> Vec<f64> {
    g.p.iter()
        .chain(g.r.iter())
        .chain(g.s.iter())
        .chain(g.omega.iter())
        .chain(g.m.iter())
        .copied()
        .collect()
}

/// Inverse of [`flatten`] for outputs shaped like `like`.
pub fn unflatten(like: &HeadOutputs, v: &[f64]) -> HeadOutputs {
    let mut it = v.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    HeadOutputs {
        p: Array2::from_shape_vec(like.p.raw_dim(), take(like.p.len())).unwrap(),
        r: Array2::from_shape_vec(like.r.raw_dim(), take(like.r.len())).unwrap(),
        s: Array1::from_vec(take(like.s.len())),
        omega: Array2::from_shape_vec(like.omega.raw_dim(), take(like.omega.len())).unwrap(),
        m: Array4::from_shape_vec(like.m.raw_dim(), take(like.m.len())).unwrap(),
        rois: like.rois.clone(),
    }
}

/// Random outputs of a head over `classes` foreground classes.
pub fn head_outputs(rng: &mut ChaCha8Rng, rois: usize, classes: usize, anchors: usize, masks: usize, mask_size: usize) -> HeadOutputs {
    let k = classes + 1;
    HeadOutputs {
        p: array2(rng, (rois, k), 1.5),
        r: array2(rng, (rois, 4 * k), 0.5),
        s: Array1::from_shape_simple_fn(anchors, || normal(rng, 1.5)),
        omega: array2(rng, (anchors, 4), 0.5),
        m: array4(rng, (masks, k, mask_size, mask_size), 1.5),
        rois: vec![BBox::new(0.0, 0.0, 8.0, 8.0); rois],
    }
}

/// Moves `x` away from the non-smooth points `±beta` of smooth-L1.
pub fn off_kink(x: f64, beta: f64, margin: f64) -> f64 {
    let d = x.abs() - beta;
    if d.abs() < margin {
        x + x.signum() * 3.0 * margin
    } else {
        x
    }
}

pub fn rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(width, height);
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(x, y, true);
        }
    }
    m
}

pub fn detection(image: &str, class: ClassId, score: f32, mask: BinaryMask) -> ImageDetection {
    ImageDetection {
        image_id: image.into(),
        detection: Detection {
            class_id: class,
            score,
            bbox: mask.bounding_box().unwrap_or(BBox::new(0.0, 0.0, 1.0, 1.0)),
            mask,
            source_branch: 0,
        },
    }
}

/// Ground truth from `(image id, [(class, mask)])`; all masks share one size.
pub fn ground_truth(images: &[(&str, Vec<(ClassId, BinaryMask)>)], size: usize) -> Dataset {
    Dataset {
        samples: images
            .iter()
            .map(|(id, anns)| ImageSample {
                image_id: id.to_string(),
                pixels: Array3::zeros((3, size, size)),
                annotations: anns.iter().map(|(c, m)| InstanceAnnotation::new(*c, m.clone()).unwrap()).collect(),
            })
            .collect(),
        class_catalog: Default::default(),
    }
}

fn pixel_iou(a: &BinaryMask, b: &BinaryMask) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as u64;
            union += (p || q) as u64;
        }
    }
    (inter, union)
}

/// Brute-force AP of one class: for every rank cutoff the matching is
/// recomputed from scratch on the detections above it, precision and recall
/// are read off, and the envelope is integrated over recall.
pub fn brute_force_ap(dets: &[ImageDetection], gt: &Dataset, class: ClassId, thr: f64) -> Option<f64> {
    let gts: Vec<(&str, &BinaryMask)> = gt
        .samples
        .iter()
        .flat_map(|s| s.annotations.iter().filter(|a| a.class_id == class).map(move |a| (s.image_id.as_str(), &a.mask)))
        .collect();
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<&ImageDetection> = dets.iter().filter(|d| d.detection.class_id == class).collect();
    order.sort_by(|a, b| b.detection.score.total_cmp(&a.detection.score).then_with(|| a.image_id.cmp(&b.image_id)));

    let true_positives = |k: usize| -> usize {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for d in &order[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (j, (img, m)) in gts.iter().enumerate() {
                if used[j] || *img != d.image_id {
                    continue;
                }
                let (i, u) = pixel_iou(&d.detection.mask, m);
                let v = if u == 0 { 0.0 } else { i as f64 / u as f64 };
                if v + 1e-9 >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                tp += 1;
            }
        }
        tp
    };
    let n = order.len();
    let points: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let tp = true_positives(k) as f64;
            (tp / gts.len() as f64, tp / k as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        let envelope = points[k..].iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        ap += (points[k].0 - prev_recall) * envelope;
        prev_recall = points[k].0;
    }
    Some(ap)
}

pub fn classes(n: u32) -> BTreeSet<ClassId> {
    (1..=n).collect()
}
