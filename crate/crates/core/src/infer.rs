//! Inference over feature-extractor branches sharing one backbone pass and
//! the latest head, keeping each branch's detections within its own
//! classes.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::losses::{sigmoid, softmax_rows};
use crate::mask::{BBox, BinaryMask};
use crate::model::network;
use crate::model::targets::paste_mask;
use crate::model::{boxes, propose, BackboneFeatures, Detection, ModelState};
use crate::scenario::ClassId;

pub const EVAL_SCORE_THRESH: f32 = 0.05;
pub const DEMO_SCORE_THRESH: f32 = 0.5;
pub const NMS_THRESH: f32 = 0.5;
/// Per-route cap on kept detections.
pub const MAX_DETECTIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    /// Branches to run; `None` means all.
    pub branches: Option<Vec<usize>>,
    pub score_thresh: f32,
    pub nms_thresh: f32,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            branches: None,
            score_thresh: EVAL_SCORE_THRESH,
            nms_thresh: NMS_THRESH,
        }
    }
}

/// A route through one feature extractor and one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Composition {
    pub fe: usize,
    pub head: usize,
}

/// Validates and returns a route `B -> F^fe -> H^head`.
pub fn compose(state: &ModelState, fe: usize, head: usize) -> Result<Composition> {
    state.fe(fe)?;
    state.head(head)?.params()?;
    Ok(Composition { fe, head })
}

/// Runs inference for one model, caching backbone features per image and
/// counting backbone and head invocations.
pub struct InferenceEngine<'a> {
    state: &'a ModelState,
    cache: Mutex<HashMap<String, Arc<BackboneFeatures>>>,
    backbone_calls: AtomicUsize,
    head_calls: AtomicUsize,
}

impl<'a> InferenceEngine<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        InferenceEngine {
            state,
            cache: Mutex::new(HashMap::new()),
            backbone_calls: AtomicUsize::new(0),
            head_calls: AtomicUsize::new(0),
        }
    }

    pub fn state(&self) -> &ModelState {
        self.state
    }

    pub fn backbone_calls(&self) -> usize {
        self.backbone_calls.load(Ordering::SeqCst)
    }

    pub fn head_calls(&self) -> usize {
        self.head_calls.load(Ordering::SeqCst)
    }

    /// Drops cached backbone features.
    pub fn clear_cache(&self) {
        self.cache.lock().expect("cache lock").clear();
    }

    /// Backbone features of `image`, computed at most once per image id.
    pub fn backbone_shared_pass(&self, image: &ImageSample) -> Arc<BackboneFeatures> {
        if let Some(f) = self.cache.lock().expect("cache lock").get(&image.image_id) {
            return Arc::clone(f);
        }
        self.backbone_calls.fetch_add(1, Ordering::SeqCst);
        let f = Arc::new(self.state.backbone_forward(&image.pixels));
        self.cache
            .lock()
            .expect("cache lock")
            .insert(image.image_id.clone(), Arc::clone(&f));
        f
    }

    /// Detections of the latest head over the selected branches, each
    /// restricted to the classes its branch was trained for.
    pub fn infer(&self, image: &ImageSample, opts: &InferOptions) -> Result<Vec<Detection>> {
        let all: Vec<usize> = (0..self.state.fes.len()).collect();
        let branches = opts.branches.clone().unwrap_or(all);
        if branches.is_empty() {
            return Err(Error::invalid("no branches selected"));
        }
        let head = self.state.last_head().step;
        let mut out = Vec::new();
        for &b in &branches {
            let domain = self.state.branch_domain(b)?;
            let route = Composition { fe: b, head };
            out.extend(self.run_route(image, route, Some(&domain), opts)?);
        }
        sort_detections(&mut out);
        Ok(out)
    }

    /// Detections of an arbitrary route over the head's full domain.
    pub fn infer_composed(&self, image: &ImageSample, route: Composition, opts: &InferOptions) -> Result<Vec<Detection>> {
        let mut out = self.run_route(image, route, None, opts)?;
        sort_detections(&mut out);
        Ok(out)
    }

    fn run_route(&self, image: &ImageSample, route: Composition, allowed: Option<&[ClassId]>, opts: &InferOptions) -> Result<Vec<Detection>> {
        let state = self.state;
        let head = state.head(route.head)?;
        let params = head.params()?;
        let bb = self.backbone_shared_pass(image);
        let fe = &state.fe(route.fe)?.params;
        let (feat, _) = network::fe_forward(fe, bb.as_array().clone());
        self.head_calls.fetch_add(1, Ordering::SeqCst);
        let arch = &state.arch;
        let (fh, fw) = (feat.dim().2, feat.dim().3);
        let (h, w) = (image.height(), image.width());
        let (s, omega, _) = network::rpn_forward(params, &feat);
        let rois = propose(arch, &s, &omega, (fh, fw), (h, w), arch.rpn_top_k_eval);
        let view = feat.index_axis(Axis(0), 0);
        let (p, r, _) = network::box_forward(arch, params, view, &rois);
        let probs = softmax_rows(p.view());

        let mut kept: Vec<(usize, ClassId, f32, BBox)> = Vec::new();
        for (k, &class) in head.domain.iter().enumerate() {
            if allowed.is_some_and(|a| !a.contains(&class)) {
                continue;
            }
            let col = k + 1;
            let mut cand = Vec::new();
            let mut scores = Vec::new();
            for (i, roi) in rois.iter().enumerate() {
                let score = probs[[i, col]] as f32;
                if score < opts.score_thresh {
                    continue;
                }
                let d = [0, 1, 2, 3].map(|j| r[[i, 4 * col + j]] as f32);
                let b = boxes::decode(roi, d, boxes::ROI_WEIGHTS).clip(w as f32, h as f32);
                if b.width() > 0.0 && b.height() > 0.0 {
                    cand.push(b);
                    scores.push(score);
                }
            }
            for i in boxes::nms(&cand, &scores, opts.nms_thresh) {
                kept.push((col, class, scores[i], cand[i]));
            }
        }
        kept.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)));
        kept.truncate(MAX_DETECTIONS);

        let det_boxes: Vec<BBox> = kept.iter().map(|k| k.3).collect();
        let (m, _) = network::mask_forward(arch, params, view, &det_boxes);
        let size = arch.mask_size();
        Ok(kept
            .iter()
            .enumerate()
            .map(|(i, &(col, class, score, bbox))| {
                let probs = ndarray::Array2::from_shape_fn((size, size), |(y, x)| sigmoid(m[[i, col, y, x]]));
                Detection {
                    class_id: class,
                    score,
                    bbox,
                    mask: paste_mask(&probs, &bbox, w, h),
                    source_branch: route.fe,
                }
            })
            .collect())
    }
}

/// Orders detections by class, then descending score, then branch.
pub fn sort_detections(d: &mut [Detection]) {
    d.sort_by(|a, b| {
        a.class_id
            .cmp(&b.class_id)
            .then(b.score.total_cmp(&a.score))
            .then(a.source_branch.cmp(&b.source_branch))
    });
}

/// Convenience wrapper running a fresh engine on one image.
pub fn infer(state: &ModelState, image: &ImageSample, opts: &InferOptions) -> Result<Vec<Detection>> {
    InferenceEngine::new(state).infer(image, opts)
}

/// A detection tied to its image, as exchanged with the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetection {
    pub image_id: String,
    pub detection: Detection,
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    image_id: String,
    class_id: ClassId,
    score: f32,
    #[serde(rename = "box")]
    bbox: [f32; 4],
    mask_rle: String,
    branch: usize,
}

/// One JSON object per line.
pub fn to_jsonl(dets: &[ImageDetection]) -> Result<String> {
    let mut out = String::new();
    for d in dets {
        let line = DetectionLine {
            image_id: d.image_id.clone(),
            class_id: d.detection.class_id,
            score: d.detection.score,
            bbox: d.detection.bbox.to_array(),
            mask_rle: d.detection.mask.to_rle(),
            branch: d.detection.source_branch,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses detections; `sizes` maps image ids to `(width, height)`.
pub fn from_jsonl(text: &str, sizes: &HashMap<String, (usize, usize)>) -> Result<Vec<ImageDetection>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec = |m: String| Error::Record {
            file: "detections".into(),
            record: format!("line {}", n + 1),
            message: m,
        };
        let d: DetectionLine = serde_json::from_str(line).map_err(|e| rec(e.to_string()))?;
        let &(w, h) = sizes.get(&d.image_id).ok_or_else(|| rec(format!("unknown image `{}`", d.image_id)))?;
        let mask = BinaryMask::from_rle(w, h, &d.mask_rle).map_err(|e| rec(e.to_string()))?;
        out.push(ImageDetection {
            image_id: d.image_id,
            detection: Detection {
                class_id: d.class_id,
                score: d.score,
                bbox: BBox::from_array(d.bbox),
                mask,
                source_branch: d.branch,
            },
        });
    }
    Ok(out)
}

/// Runs [`InferenceEngine::infer`] over every image of a split.
pub fn infer_dataset(state: &ModelState, images: &[ImageSample], opts: &InferOptions) -> Result<Vec<ImageDetection>> {
    let engine = InferenceEngine::new(state);
    let mut out = Vec::new();
    for img in images {
        for d in engine.infer(img, opts)? {
            out.push(ImageDetection {
                image_id: img.image_id.clone(),
                detection: d,
            });
        }
        engine.clear_cache();
    }
    Ok(out)
}

/// Runs a fixed route over every image of a split.
pub fn infer_dataset_composed(state: &ModelState, images: &[ImageSample], route: Composition, opts: &InferOptions) -> Result<Vec<ImageDetection>> {
    let engine = InferenceEngine::new(state);
    let mut out = Vec::new();
    for img in images {
        for d in engine.infer_composed(img, route, opts)? {
            out.push(ImageDetection {
                image_id: img.image_id.clone(),
                detection: d,
            });
        }
        engine.clear_cache();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, expand_head, ArchConfig};
    use ndarray::Array3;

    fn two_branch_state() -> ModelState {
        let mut s = build_model(3, &ArchConfig { seed: 4, ..ArchConfig::default() }).unwrap();
        s.clone_branch(0).unwrap();
        let h = expand_head(s.last_head(), &[4], 7).unwrap();
        s.heads.push(h);
        // make the branches differ
        for (_, v) in s.fes[1].params.iter_mut() {
            v.mapv_inplace(|x| x * 1.1);
        }
        s
    }

    fn image(id: &str, seed: usize) -> ImageSample {
        ImageSample {
            image_id: id.into(),
            pixels: Array3::from_shape_fn((3, 48, 48), |(c, y, x)| ((c * 5 + y * 7 + x * 3 + seed) % 13) as f32 / 12.0),
            annotations: vec![],
        }
    }

    fn low() -> InferOptions {
        InferOptions {
            score_thresh: 0.0,
            ..InferOptions::default()
        }
    }

    #[test]
    fn backbone_runs_once_per_image() {
        let s = two_branch_state();
        let e = InferenceEngine::new(&s);
        let img = image("a", 0);
        e.infer(&img, &low()).unwrap();
        assert_eq!(e.backbone_calls(), 1);
        assert_eq!(e.head_calls(), 2);
        let again = e.backbone_shared_pass(&img);
        assert_eq!(e.backbone_calls(), 1);
        assert_eq!(again.as_array(), s.backbone_forward(&img.pixels).as_array());
        e.backbone_shared_pass(&image("b", 1));
        assert_eq!(e.backbone_calls(), 2);
    }

    #[test]
    fn domains_are_respected_and_merge_is_a_union() {
        let s = two_branch_state();
        let img = image("a", 3);
        let merged = infer(&s, &img, &low()).unwrap();
        assert!(!merged.is_empty());
        for d in &merged {
            assert!(s.branch_domain(d.source_branch).unwrap().contains(&d.class_id));
        }
        let mut union = Vec::new();
        for b in 0..2 {
            let single = infer(
                &s,
                &img,
                &InferOptions {
                    branches: Some(vec![b]),
                    ..low()
                },
            )
            .unwrap();
            union.extend(single);
        }
        sort_detections(&mut union);
        assert_eq!(merged, union);
        assert!(infer(&s, &img, &InferOptions { branches: Some(vec![]), ..low() }).is_err());
        assert!(infer(&s, &img, &InferOptions { branches: Some(vec![2]), ..low() }).is_err());
    }

    #[test]
    fn deterministic_and_composable() {
        let s = two_branch_state();
        let img = image("a", 5);
        assert_eq!(infer(&s, &img, &low()).unwrap(), infer(&s, &img, &low()).unwrap());
        assert!(compose(&s, 2, 1).is_err());
        assert!(compose(&s, 0, 3).is_err());
        let route = compose(&s, 0, 0).unwrap();
        let e = InferenceEngine::new(&s);
        let dets = e.infer_composed(&img, route, &low()).unwrap();
        assert!(dets.iter().all(|d| d.class_id <= 3));
    }

    #[test]
    fn jsonl_round_trip() {
        let s = two_branch_state();
        let img = image("a", 2);
        let dets: Vec<ImageDetection> = infer(&s, &img, &low())
            .unwrap()
            .into_iter()
            .map(|d| ImageDetection {
                image_id: "a".into(),
                detection: d,
            })
            .collect();
        let text = to_jsonl(&dets).unwrap();
        let sizes = HashMap::from([("a".to_string(), (48usize, 48usize))]);
        assert_eq!(from_jsonl(&text, &sizes).unwrap(), dets);
        assert!(from_jsonl(&text, &HashMap::new()).is_err());
    }
}
