//! Anchor labelling, RoI sampling and mask target extraction.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use super::boxes::{self, ROI_WEIGHTS, RPN_WEIGHTS};
use super::ArchConfig;
use crate::mask::{BBox, BinaryMask};

/// A ground-truth instance with its row in the head's class layout.
pub(crate) struct GtInstance<'a> {
    pub bbox: BBox,
    pub label: usize,
    pub mask: &'a BinaryMask,
}

fn best_match(b: &BBox, gts: &[GtInstance]) -> (f32, usize) {
    gts.iter()
        .enumerate()
        .map(|(j, g)| (b.iou(&g.bbox), j))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

fn subsample<R: Rng>(mut pos: Vec<usize>, mut neg: Vec<usize>, total: usize, fg_fraction: f32, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let max_pos = ((total as f32) * fg_fraction).round() as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    neg.shuffle(rng);
    neg.truncate(total - pos.len());
    (pos, neg)
}

/// Per-anchor labels (1 fg, 0 bg, -1 ignored) and encoded deltas.
pub(crate) fn anchor_targets<R: Rng>(arch: &ArchConfig, anchors: &[BBox], gts: &[GtInstance], rng: &mut R) -> (Vec<i8>, Array2<f64>) {
    let n = anchors.len();
    let mut labels = vec![-1i8; n];
    let mut deltas = Array2::zeros((n, 4));
    let mut matched = vec![0usize; n];
    let mut best_per_gt = vec![0.0f32; gts.len()];
    let ious: Vec<Vec<f32>> = anchors.iter().map(|a| gts.iter().map(|g| a.iou(&g.bbox)).collect()).collect();
    for row in &ious {
        for (j, &v) in row.iter().enumerate() {
            best_per_gt[j] = best_per_gt[j].max(v);
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, row) in ious.iter().enumerate() {
        let (best, j) = row
            .iter()
            .enumerate()
            .fold((0.0f32, 0usize), |b, (j, &v)| if v > b.0 { (v, j) } else { b });
        matched[i] = j;
        let is_best = row.iter().enumerate().any(|(j, &v)| v > 0.0 && v == best_per_gt[j]);
        if best >= arch.anchor_fg_iou || is_best {
            pos.push(i);
        } else if best < arch.anchor_bg_iou {
            neg.push(i);
        }
    }
    let (pos, neg) = subsample(pos, neg, arch.anchor_batch, arch.anchor_fg_fraction, rng);
    for &i in &pos {
        labels[i] = 1;
        let d = boxes::encode(&anchors[i], &gts[matched[i]].bbox, RPN_WEIGHTS);
        for k in 0..4 {
            deltas[[i, k]] = d[k] as f64;
        }
    }
    for &i in &neg {
        labels[i] = 0;
    }
    (labels, deltas)
}

/// Sampled RoIs for the box branch and the positive subset for the mask branch.
pub(crate) struct RoiSample {
    pub rois: Vec<BBox>,
    pub labels: Vec<usize>,
    pub deltas: Array2<f64>,
    pub mask_rois: Vec<BBox>,
    pub mask_labels: Vec<usize>,
    pub mask_targets: Array3<f64>,
}

/// Samples RoIs from `proposals` plus the ground-truth boxes. Positives
/// come first in the returned order.
pub(crate) fn sample_rois<R: Rng>(arch: &ArchConfig, proposals: &[BBox], gts: &[GtInstance], rng: &mut R) -> RoiSample {
    let mut cands: Vec<BBox> = proposals.to_vec();
    cands.extend(gts.iter().map(|g| g.bbox));
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut matched = vec![0usize; cands.len()];
    for (i, c) in cands.iter().enumerate() {
        let (iou, j) = best_match(c, gts);
        matched[i] = j;
        if !gts.is_empty() && iou >= arch.roi_fg_iou {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let (mut pos, mut neg) = subsample(pos, neg, arch.roi_batch, arch.roi_fg_fraction, rng);
    pos.sort_unstable();
    neg.sort_unstable();
    let count = pos.len() + neg.len();
    let mut rois = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut deltas = Array2::zeros((count, 4));
    for (row, &i) in pos.iter().chain(&neg).enumerate() {
        rois.push(cands[i]);
        if row < pos.len() {
            let g = &gts[matched[i]];
            labels.push(g.label);
            let d = boxes::encode(&cands[i], &g.bbox, ROI_WEIGHTS);
            for k in 0..4 {
                deltas[[row, k]] = d[k] as f64;
            }
        } else {
            labels.push(0);
        }
    }
    let size = arch.mask_size();
    let m = pos.len().min(arch.max_mask_rois);
    let mut mask_targets = Array3::zeros((m, size, size));
    let mut mask_rois = Vec::with_capacity(m);
    let mut mask_labels = Vec::with_capacity(m);
    for (row, &i) in pos.iter().take(m).enumerate() {
        let g = &gts[matched[i]];
        mask_rois.push(cands[i]);
        mask_labels.push(g.label);
        mask_targets
            .index_axis_mut(ndarray::Axis(0), row)
            .assign(&mask_target(g.mask, &cands[i], size));
    }
    RoiSample {
        rois,
        labels,
        deltas,
        mask_rois,
        mask_labels,
        mask_targets,
    }
}

/// Samples the mask at the centres of a `size x size` grid over `roi`.
pub(crate) fn mask_target(mask: &BinaryMask, roi: &BBox, size: usize) -> Array2<f64> {
    let (w, h) = (roi.width() / size as f32, roi.height() / size as f32);
    Array2::from_shape_fn((size, size), |(i, j)| {
        let x = (roi.x0 + (j as f32 + 0.5) * w).floor();
        let y = (roi.y0 + (i as f32 + 0.5) * h).floor();
        if x < 0.0 || y < 0.0 || x >= mask.width() as f32 || y >= mask.height() as f32 {
            0.0
        } else {
            f64::from(mask.get(x as usize, y as usize))
        }
    })
}

/// Bilinearly resamples `probs` (a `size x size` grid over `bbox`) to the
/// image and thresholds at 0.5.
pub(crate) fn paste_mask(probs: &Array2<f64>, bbox: &BBox, width: usize, height: usize) -> BinaryMask {
    let (gh, gw) = probs.dim();
    let mut out = BinaryMask::zeros(width, height);
    if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
        return out;
    }
    let x_lo = bbox.x0.floor().max(0.0) as usize;
    let y_lo = bbox.y0.floor().max(0.0) as usize;
    let x_hi = (bbox.x1.ceil().max(0.0) as usize).min(width);
    let y_hi = (bbox.y1.ceil().max(0.0) as usize).min(height);
    let sx = gw as f32 / bbox.width();
    let sy = gh as f32 / bbox.height();
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            if px < bbox.x0 || px > bbox.x1 || py < bbox.y0 || py > bbox.y1 {
                continue;
            }
            let gx = ((px - bbox.x0) * sx - 0.5).clamp(0.0, (gw - 1) as f32);
            let gy = ((py - bbox.y0) * sy - 0.5).clamp(0.0, (gh - 1) as f32);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gh - 1));
            let (fx, fy) = ((gx - x0 as f32) as f64, (gy - y0 as f32) as f64);
            let v = probs[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
                + probs[[y0, x1]] * fx * (1.0 - fy)
                + probs[[y1, x0]] * (1.0 - fx) * fy
                + probs[[y1, x1]] * fx * fy;
            if v >= 0.5 {
                out.set(x, y, true);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square_mask(x0: usize, y0: usize, s: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(64, 64);
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn every_gt_gets_a_positive_anchor() {
        let arch = ArchConfig::default();
        let anchors = arch.anchors(16, 16);
        let m1 = square_mask(4, 4, 10);
        let m2 = square_mask(30, 30, 25);
        let gts = [
            GtInstance { bbox: m1.bounding_box().unwrap(), label: 1, mask: &m1 },
            GtInstance { bbox: m2.bounding_box().unwrap(), label: 2, mask: &m2 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (labels, deltas) = anchor_targets(&arch, &anchors, &gts, &mut rng);
        let sampled = labels.iter().filter(|&&l| l >= 0).count();
        assert!(sampled <= arch.anchor_batch);
        for g in &gts {
            assert!(labels.iter().enumerate().any(|(i, &l)| l == 1 && anchors[i].iou(&g.bbox) > 0.3));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l == 1 {
                let (_, j) = best_match(&anchors[i], &gts);
                let back = boxes::decode(&anchors[i], [0, 1, 2, 3].map(|k| deltas[[i, k]] as f32), RPN_WEIGHTS);
                assert!(back.iou(&gts[j].bbox) > 0.99);
            }
        }
    }

    #[test]
    fn roi_sampling_includes_gt_positives() {
        let arch = ArchConfig::default();
        let m1 = square_mask(10, 10, 20);
        let gts = [GtInstance { bbox: m1.bounding_box().unwrap(), label: 3, mask: &m1 }];
        let props = [BBox::new(40.0, 40.0, 60.0, 60.0), BBox::new(11.0, 9.0, 31.0, 29.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_rois(&arch, &props, &gts, &mut rng);
        assert_eq!(s.labels, vec![3, 3, 0]);
        assert_eq!(s.mask_labels, vec![3, 3]);
        // the GT box itself maps to a full mask
        assert!(s.mask_targets.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 1.0));
        assert_eq!(s.deltas.row(1).to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn paste_recovers_box_region() {
        let probs = Array2::from_elem((28, 28), 0.9);
        let b = BBox::new(10.0, 12.0, 30.0, 20.0);
        let m = paste_mask(&probs, &b, 64, 64);
        assert_eq!(m.area(), 20 * 8);
        assert_eq!(m.bounding_box().unwrap(), b);
    }
}
