//! Anchors, box encoding and non-maximum suppression.

use crate::mask::BBox;

/// Deltas larger than this are clamped before `exp`.
const MAX_LOG_SCALE: f32 = 4.135_166_6; // ln(1000 / 16)

pub const RPN_WEIGHTS: [f32; 4] = [1.0, 1.0, 1.0, 1.0];
pub const ROI_WEIGHTS: [f32; 4] = [10.0, 10.0, 5.0, 5.0];

/// Anchors for a `feat_h x feat_w` grid, ordered cell-major then by
/// (size, ratio); index `(y * feat_w + x) * A + a`.
pub fn grid_anchors(feat_h: usize, feat_w: usize, stride: usize, sizes: &[f32], ratios: &[f32]) -> Vec<BBox> {
    let mut out = Vec::with_capacity(feat_h * feat_w * sizes.len() * ratios.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f32 + 0.5) * stride as f32;
            let cy = (y as f32 + 0.5) * stride as f32;
            for &s in sizes {
                for &r in ratios {
                    // r is height / width
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    out.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
                }
            }
        }
    }
    out
}

pub fn encode(reference: &BBox, target: &BBox, weights: [f32; 4]) -> [f32; 4] {
    let (rw, rh) = (reference.width().max(1e-3), reference.height().max(1e-3));
    let (rx, ry) = (reference.x0 + 0.5 * rw, reference.y0 + 0.5 * rh);
    let (tw, th) = (target.width().max(1e-3), target.height().max(1e-3));
    let (tx, ty) = (target.x0 + 0.5 * tw, target.y0 + 0.5 * th);
    [
        weights[0] * (tx - rx) / rw,
        weights[1] * (ty - ry) / rh,
        weights[2] * (tw / rw).ln(),
        weights[3] * (th / rh).ln(),
    ]
}

pub fn decode(reference: &BBox, deltas: [f32; 4], weights: [f32; 4]) -> BBox {
    let (rw, rh) = (reference.width().max(1e-3), reference.height().max(1e-3));
    let (rx, ry) = (reference.x0 + 0.5 * rw, reference.y0 + 0.5 * rh);
    let dx = deltas[0] / weights[0];
    let dy = deltas[1] / weights[1];
    let dw = (deltas[2] / weights[2]).min(MAX_LOG_SCALE);
    let dh = (deltas[3] / weights[3]).min(MAX_LOG_SCALE);
    let (cx, cy) = (rx + dx * rw, ry + dy * rh);
    let (w, h) = (rw * dw.exp(), rh * dh.exp());
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Indices sorted by descending score, ties broken by index.
pub fn argsort_desc(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy NMS; returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f32], iou_thresh: f32) -> Vec<usize> {
    let order = argsort_desc(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let a = BBox::new(10.0, 12.0, 30.0, 40.0);
        let t = BBox::new(14.0, 9.0, 33.0, 47.0);
        for w in [RPN_WEIGHTS, ROI_WEIGHTS] {
            let d = decode(&a, encode(&a, &t, w), w);
            for (x, y) in d.to_array().iter().zip(t.to_array()) {
                assert!((x - y).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn anchor_layout() {
        let a = grid_anchors(2, 3, 4, &[8.0, 16.0], &[1.0]);
        assert_eq!(a.len(), 12);
        // cell (0, 1), size 16
        let b = a[(1) * 2 + 1];
        assert_eq!(b, BBox::new(6.0 - 8.0, 2.0 - 8.0, 6.0 + 8.0, 2.0 + 8.0));
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let boxes = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(1.0, 1.0, 11.0, 11.0),
            BBox::new(20.0, 20.0, 30.0, 30.0),
        ];
        assert_eq!(nms(&boxes, &[0.9, 0.95, 0.5], 0.5), vec![1, 2]);
        assert_eq!(nms(&boxes, &[0.9, 0.95, 0.5], 0.9), vec![1, 0, 2]);
    }
}
