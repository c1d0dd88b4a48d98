//! Average precision with greedy matching and all-point interpolation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::{Dataset, InstanceAnnotation};
use crate::infer::ImageDetection;
use crate::mask::{BBox, BinaryMask};
use crate::scenario::{ClassId, ScenarioSpec};

/// 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Slack for comparisons against an IoU threshold.
const IOU_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Box,
    Mask,
}

fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    if a.width() != b.width() || a.height() != b.height() {
        return 0.0;
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x != 0 && y != 0) as usize;
        union += (x != 0 || y != 0) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0) as f64;
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0) as f64;
    let inter = iw * ih;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn iou(kind: IouKind, det: &ImageDetection, gt: &InstanceAnnotation) -> f64 {
    match kind {
        IouKind::Box => box_iou(&det.detection.bbox, &gt.bbox),
        IouKind::Mask => mask_iou(&det.detection.mask, &gt.mask),
    }
}

/// Area under the precision envelope given per-detection TP flags in
/// ranking order.
pub(crate) fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Detections of `class` in ranking order: descending score, ties by image
/// id then input order.
fn ranked<'a>(dets: &'a [ImageDetection], class: ClassId) -> Vec<&'a ImageDetection> {
    let mut out: Vec<&ImageDetection> = dets.iter().filter(|d| d.detection.class_id == class).collect();
    out.sort_by(|a, b| {
        b.detection
            .score
            .total_cmp(&a.detection.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    out
}

fn gt_by_image(gt: &Dataset, class: ClassId) -> HashMap<&str, Vec<&InstanceAnnotation>> {
    let mut out: HashMap<&str, Vec<&InstanceAnnotation>> = HashMap::new();
    for s in &gt.samples {
        let items: Vec<_> = s.annotations.iter().filter(|a| a.class_id == class).collect();
        if !items.is_empty() {
            out.insert(s.image_id.as_str(), items);
        }
    }
    out
}

/// TP flags for each ranked detection at each threshold.
fn match_flags(ranked: &[&ImageDetection], gts: &HashMap<&str, Vec<&InstanceAnnotation>>, kind: IouKind, thresholds: &[f64]) -> Vec<Vec<bool>> {
    // IoUs are computed once and reused across thresholds
    let ious: Vec<Vec<f64>> = ranked
        .iter()
        .map(|d| gts.get(d.image_id.as_str()).map(|g| g.iter().map(|a| iou(kind, d, a)).collect()).unwrap_or_default())
        .collect();
    thresholds
        .iter()
        .map(|&thr| {
            let mut used: HashMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
            ranked
                .iter()
                .zip(&ious)
                .map(|(d, row)| {
                    let Some(flags) = used.get_mut(d.image_id.as_str()) else {
                        return false;
                    };
                    let best = row
                        .iter()
                        .enumerate()
                        .filter(|(j, &v)| !flags[*j] && v + IOU_SLACK >= thr)
                        .fold(None::<(usize, f64)>, |b, (j, &v)| match b {
                            Some((_, bv)) if bv >= v => b,
                            _ => Some((j, v)),
                        });
                    match best {
                        Some((j, _)) => {
                            flags[j] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect()
        })
        .collect()
}

/// AP of one class at one IoU threshold; `None` when the split has no
/// ground truth of that class.
pub fn match_and_ap(dets: &[ImageDetection], gt: &Dataset, class: ClassId, iou_thresh: f64, kind: IouKind) -> Option<f64> {
    let gts = gt_by_image(gt, class);
    let num_gt: usize = gts.values().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let r = ranked(dets, class);
    let flags = match_flags(&r, &gts, kind, &[iou_thresh]);
    Some(average_precision(&flags[0], num_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    /// One value per entry of [`IOU_THRESHOLDS`].
    pub aps: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScore {
    pub name: String,
    pub classes: Vec<ClassId>,
    pub aps: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub iou_kind: IouKind,
    pub per_class: BTreeMap<ClassId, ClassAp>,
    /// Groups `base`, `intermediary`, `new`, `all`; a group is absent when
    /// none of its classes has ground truth.
    pub groups: BTreeMap<String, GroupScore>,
    /// Classes skipped because the split holds no instance of them.
    pub excluded: Vec<ClassId>,
}

impl EvalReport {
    pub fn group(&self, name: &str) -> Option<f64> {
        self.groups.get(name).map(|g| g.mean)
    }

    pub fn class(&self, class: ClassId) -> Option<f64> {
        self.per_class.get(&class).map(|c| c.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id");
        for t in &self.iou_thresholds {
            let _ = write!(out, ",ap_{:03}", (t * 100.0).round() as u32);
        }
        out.push_str(",ap_mean\n");
        let row = |out: &mut String, label: &str, aps: &[f64], mean: f64| {
            out.push_str(label);
            for a in aps {
                let _ = write!(out, ",{a:.6}");
            }
            let _ = writeln!(out, ",{mean:.6}");
        };
        for c in self.per_class.values() {
            row(&mut out, &c.class_id.to_string(), &c.aps, c.mean);
        }
        for name in GROUP_ORDER {
            if let Some(g) = self.groups.get(name) {
                row(&mut out, name, &g.aps, g.mean);
            }
        }
        out
    }

    /// Human-readable table in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>8} {:>8} {:>8}", "class", "AP50", "AP75", "mAP");
        let line = |out: &mut String, label: &str, aps: &[f64], mean: f64| {
            let _ = writeln!(out, "{label:<14} {:>8.1} {:>8.1} {:>8.1}", aps[0] * 100.0, aps[5] * 100.0, mean * 100.0);
        };
        for c in self.per_class.values() {
            line(&mut out, &format!("class {}", c.class_id), &c.aps, c.mean);
        }
        for name in GROUP_ORDER {
            if let Some(g) = self.groups.get(name) {
                line(&mut out, name, &g.aps, g.mean);
            }
        }
        for c in &self.excluded {
            let _ = writeln!(out, "class {c}: no ground truth in this split, excluded");
        }
        out
    }
}

const GROUP_ORDER: [&str; 4] = ["base", "intermediary", "new", "all"];

/// Per-class AP at every IoU threshold, grouped by the scenario's steps.
pub fn evaluate(dets: &[ImageDetection], gt: &Dataset, spec: &ScenarioSpec, kind: IouKind) -> EvalReport {
    let groups = spec.groups();
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for &class in &groups.all {
        let gts = gt_by_image(gt, class);
        let num_gt: usize = gts.values().map(Vec::len).sum();
        if num_gt == 0 {
            log::warn!("class {class} has no ground truth in the evaluation split; excluded from means");
            excluded.push(class);
            continue;
        }
        let r = ranked(dets, class);
        let aps: Vec<f64> = match_flags(&r, &gts, kind, &IOU_THRESHOLDS)
            .iter()
            .map(|f| average_precision(f, num_gt))
            .collect();
        let mean = aps.iter().sum::<f64>() / aps.len() as f64;
        per_class.insert(class, ClassAp { class_id: class, aps, mean });
    }
    let mut group_scores = BTreeMap::new();
    for (name, members) in [
        ("base", &groups.base),
        ("intermediary", &groups.intermediary),
        ("new", &groups.new),
        ("all", &groups.all),
    ] {
        let scored: Vec<&ClassAp> = members.iter().filter_map(|c| per_class.get(c)).collect();
        if scored.is_empty() {
            continue;
        }
        let n = scored.len() as f64;
        let aps: Vec<f64> = (0..IOU_THRESHOLDS.len())
            .map(|i| scored.iter().map(|c| c.aps[i]).sum::<f64>() / n)
            .collect();
        let mean = scored.iter().map(|c| c.mean).sum::<f64>() / n;
        group_scores.insert(
            name.to_string(),
            GroupScore {
                name: name.to_string(),
                classes: scored.iter().map(|c| c.class_id).collect(),
                aps,
                mean,
            },
        );
    }
    EvalReport {
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        iou_kind: kind,
        per_class,
        groups: group_scores,
        excluded,
    }
}

/// `value / joint`, undefined when the reference is zero.
pub fn ratio(value: f64, joint: f64) -> Option<f64> {
    (joint != 0.0).then(|| value / joint)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRatios {
    pub ratios: BTreeMap<String, Option<f64>>,
}

impl GroupRatios {
    pub fn get(&self, group: &str) -> Option<f64> {
        self.ratios.get(group).copied().flatten()
    }

    pub fn describe(&self) -> String {
        GROUP_ORDER
            .iter()
            .filter_map(|g| self.ratios.get(*g).map(|r| (g, r)))
            .map(|(g, r)| match r {
                Some(v) => format!("{g}: {v:.3}"),
                None => format!("{g}: n/a"),
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Group-wise ratio of a continual run to the joint-training reference.
pub fn ratio_to_joint(report: &EvalReport, joint: &EvalReport) -> GroupRatios {
    let mut ratios = BTreeMap::new();
    for (name, g) in &report.groups {
        let r = joint.groups.get(name).and_then(|j| ratio(g.mean, j.mean));
        ratios.insert(name.clone(), r);
    }
    GroupRatios { ratios }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageSample;
    use crate::model::Detection;
    use crate::scenario::build_scenario;
    use ndarray::Array3;

    fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(20, 20);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    fn det(image: &str, class: ClassId, score: f32, mask: BinaryMask) -> ImageDetection {
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

    fn gt(images: &[(&str, Vec<(ClassId, BinaryMask)>)]) -> Dataset {
        Dataset {
            samples: images
                .iter()
                .map(|(id, anns)| ImageSample {
                    image_id: id.to_string(),
                    pixels: Array3::zeros((3, 20, 20)),
                    annotations: anns.iter().map(|(c, m)| InstanceAnnotation::new(*c, m.clone()).unwrap()).collect(),
                })
                .collect(),
            class_catalog: Default::default(),
        }
    }

    #[test]
    fn perfect_detection_scores_one() {
        let g = gt(&[("a", vec![(1, rect(2, 2, 10, 10))])]);
        let d = [det("a", 1, 0.9, rect(2, 2, 10, 10))];
        assert_eq!(match_and_ap(&d, &g, 1, 0.5, IouKind::Mask), Some(1.0));
        assert_eq!(match_and_ap(&d, &g, 2, 0.5, IouKind::Mask), None);
    }

    #[test]
    fn iou_point_six_gives_point_three() {
        // 10x10 target, 6x10 detection inside it: IoU exactly 0.6
        let g = gt(&[("a", vec![(1, rect(0, 0, 10, 10))])]);
        let d = [det("a", 1, 0.8, rect(0, 0, 6, 10))];
        let spec = build_scenario(1, 1, 1).unwrap();
        let r = evaluate(&d, &g, &spec, IouKind::Mask);
        assert!((r.class(1).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn empty_detections_score_zero() {
        let g = gt(&[("a", vec![(1, rect(0, 0, 5, 5)), (2, rect(10, 10, 15, 15))])]);
        let spec = build_scenario(2, 1, 1).unwrap();
        let r = evaluate(&[], &g, &spec, IouKind::Mask);
        assert_eq!(r.group("all"), Some(0.0));
        assert_eq!(r.group("base"), Some(0.0));
        assert_eq!(r.group("new"), Some(0.0));
    }

    #[test]
    fn missing_class_is_excluded() {
        let g = gt(&[("a", vec![(1, rect(0, 0, 5, 5))])]);
        let spec = build_scenario(2, 1, 1).unwrap();
        let d = [det("a", 1, 0.5, rect(0, 0, 5, 5))];
        let r = evaluate(&d, &g, &spec, IouKind::Mask);
        assert_eq!(r.excluded, vec![2]);
        assert_eq!(r.group("all"), Some(1.0));
        assert!(r.group("new").is_none());
        assert!(r.to_csv().lines().next().unwrap().starts_with("class_id,ap_050,ap_055"));
    }

    #[test]
    fn ratios() {
        assert_eq!(ratio(1.0, 0.0), None);
        assert!((ratio(38.8, 39.9).unwrap() - 0.972).abs() < 5e-4);
        let g = gt(&[("a", vec![(1, rect(0, 0, 5, 5))])]);
        let spec = build_scenario(1, 1, 1).unwrap();
        let r = evaluate(&[det("a", 1, 0.5, rect(0, 0, 5, 5))], &g, &spec, IouKind::Mask);
        assert_eq!(ratio_to_joint(&r, &r).get("all"), Some(1.0));
    }
}
