//! Deterministic synthetic shapes dataset.
//!
//! Classes are shape family × fill style:
//!
//! | id | shape    | fill   |
//! |----|----------|--------|
//! | 1  | circle   | solid  |
//! | 2  | square   | solid  |
//! | 3  | triangle | solid  |
//! | 4  | cross    | solid  |
//! | 5  | circle   | hollow |
//! | 6  | square   | hollow |
//! | 7  | triangle | hollow |
//! | 8  | cross    | hollow |
//!
//! Instances never overlap, so every mask is exact and every box is the
//! tight box of its mask.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, ImageSample, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};
use crate::scenario::ClassId;

pub const SUPPORTED_CLASSES: u32 = 8;

const FAMILIES: [&str; 4] = ["circle", "square", "triangle", "cross"];

pub fn class_name(class: ClassId) -> Option<String> {
    if class == 0 || class > SUPPORTED_CLASSES {
        return None;
    }
    let fill = if class <= 4 { "solid" } else { "hollow" };
    Some(format!("{}_{fill}", FAMILIES[((class - 1) % 4) as usize]))
}

pub fn catalog() -> BTreeMap<ClassId, String> {
    (1..=SUPPORTED_CLASSES)
        .map(|c| (c, class_name(c).unwrap()))
        .collect()
}

pub fn generate_shapes_dataset(
    num_images: usize,
    classes: &BTreeSet<ClassId>,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::invalid("no classes requested"));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c == 0 || c > SUPPORTED_CLASSES) {
        return Err(Error::invalid(format!(
            "class {bad} not in the shapes catalog (1..={SUPPORTED_CLASSES})"
        )));
    }
    if image_size < 32 {
        return Err(Error::invalid(format!("image_size {image_size} < 32")));
    }
    if num_images == 0 {
        return Err(Error::invalid("num_images must be at least 1"));
    }
    let classes: Vec<ClassId> = classes.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..num_images)
        .map(|i| render_image(&mut rng, &classes, image_size, format!("{i:06}")))
        .collect();
    Ok(Dataset {
        samples,
        class_catalog: catalog(),
    })
}

fn render_image(rng: &mut ChaCha8Rng, classes: &[ClassId], size: usize, image_id: String) -> ImageSample {
    let bg: [u8; 3] = [rng.random_range(0..=90), rng.random_range(0..=90), rng.random_range(0..=90)];
    let mut pixels = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let v = bg[c] as i32 + rng.random_range(-12..=12);
                pixels[[c, y, x]] = v.clamp(0, 255) as f32 / 255.0;
            }
        }
    }

    let wanted = rng.random_range(1..=4usize);
    let mut placed: Vec<BBox> = Vec::new();
    let mut annotations = Vec::new();
    let thickness = (size / 24).max(2) as f32;
    let (min_side, max_side) = ((size as f32 * 0.2).round(), (size as f32 * 0.42).round());
    for _ in 0..wanted {
        let class = classes[rng.random_range(0..classes.len())];
        for _attempt in 0..60 {
            let w = rng.random_range(min_side..=max_side).round();
            let h = (w * rng.random_range(0.8f32..=1.25)).round().clamp(min_side, max_side);
            let x0 = rng.random_range(0.0..=(size as f32 - w)).floor();
            let y0 = rng.random_range(0.0..=(size as f32 - h)).floor();
            let frame = BBox::new(x0, y0, x0 + w, y0 + h);
            let clear = placed.iter().all(|p| {
                frame.x1 + 1.0 <= p.x0 || p.x1 + 1.0 <= frame.x0 || frame.y1 + 1.0 <= p.y0 || p.y1 + 1.0 <= frame.y0
            });
            if !clear {
                continue;
            }
            let mask = rasterize(class, &frame, thickness, size);
            let Ok(ann) = InstanceAnnotation::new(class, mask) else {
                continue;
            };
            let color = contrasting_color(rng, bg);
            for y in 0..size {
                for x in 0..size {
                    if ann.mask.get(x, y) {
                        for c in 0..3 {
                            pixels[[c, y, x]] = color[c] as f32 / 255.0;
                        }
                    }
                }
            }
            placed.push(frame);
            annotations.push(ann);
            break;
        }
    }
    ImageSample {
        image_id,
        pixels,
        annotations,
    }
}

fn contrasting_color(rng: &mut ChaCha8Rng, bg: [u8; 3]) -> [u8; 3] {
    loop {
        let c: [u8; 3] = [rng.random_range(60..=255), rng.random_range(60..=255), rng.random_range(60..=255)];
        let dist: i32 = (0..3).map(|i| (c[i] as i32 - bg[i] as i32).abs()).sum();
        if dist >= 180 {
            return c;
        }
    }
}

fn inside(family: u32, frame: &BBox, px: f32, py: f32) -> bool {
    let (w, h) = (frame.width(), frame.height());
    if w <= 0.0 || h <= 0.0 {
        return false;
    }
    let (cx, cy) = ((frame.x0 + frame.x1) / 2.0, (frame.y0 + frame.y1) / 2.0);
    match family {
        0 => {
            let dx = (px - cx) / (w / 2.0);
            let dy = (py - cy) / (h / 2.0);
            dx * dx + dy * dy <= 1.0
        }
        1 => px >= frame.x0 && px < frame.x1 && py >= frame.y0 && py < frame.y1,
        2 => {
            // apex at top centre, base along the bottom edge
            if py < frame.y0 || py >= frame.y1 {
                return false;
            }
            let half = (py - frame.y0) / h * (w / 2.0);
            (px - cx).abs() <= half
        }
        _ => {
            let in_frame = px >= frame.x0 && px < frame.x1 && py >= frame.y0 && py < frame.y1;
            in_frame && ((px - cx).abs() <= w / 6.0 || (py - cy).abs() <= h / 6.0)
        }
    }
}

fn rasterize(class: ClassId, frame: &BBox, thickness: f32, size: usize) -> BinaryMask {
    let family = (class - 1) % 4;
    let hollow = class > 4;
    let inner = if family == 2 {
        // shrink toward the centroid so the outline has roughly even width
        let k = 2.2 * thickness;
        BBox::new(frame.x0 + k, frame.y0 + 1.6 * k, frame.x1 - k, frame.y1 - thickness)
    } else {
        BBox::new(
            frame.x0 + thickness,
            frame.y0 + thickness,
            frame.x1 - thickness,
            frame.y1 - thickness,
        )
    };
    let mut mask = BinaryMask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut on = inside(family, frame, px, py);
            if on && hollow {
                on = !inside(family, &inner, px, py);
            }
            mask.set(x, y, on);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::save_dataset;

    #[test]
    fn same_seed_gives_identical_files() {
        let classes: BTreeSet<_> = [1, 2, 3].into();
        let a = generate_shapes_dataset(100, &classes, 64, 7).unwrap();
        let b = generate_shapes_dataset(100, &classes, 64, 7).unwrap();
        assert_eq!(a, b);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(&a, da.path()).unwrap();
        save_dataset(&b, db.path()).unwrap();
        for rel in ["annotations.json", "images/000042.png"] {
            assert_eq!(
                std::fs::read(da.path().join(rel)).unwrap(),
                std::fs::read(db.path().join(rel)).unwrap()
            );
        }
        let c = generate_shapes_dataset(100, &classes, 64, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boxes_are_tight_and_instance_counts_bounded() {
        let classes: BTreeSet<_> = (1..=8).collect();
        let ds = generate_shapes_dataset(200, &classes, 64, 3).unwrap();
        for s in &ds.samples {
            assert!((1..=4).contains(&s.annotations.len()), "{}", s.annotations.len());
            for a in &s.annotations {
                a.validate().unwrap();
                assert!(classes.contains(&a.class_id));
            }
        }
    }

    #[test]
    fn class_frequencies_are_balanced() {
        let classes: BTreeSet<_> = (1..=8).collect();
        let ds = generate_shapes_dataset(1000, &classes, 64, 1).unwrap();
        let counts = ds.class_counts();
        assert_eq!(counts.len(), 8);
        let mean = counts.values().sum::<usize>() as f64 / 8.0;
        for (c, &n) in &counts {
            let dev = (n as f64 - mean).abs() / mean;
            assert!(dev <= 0.30, "class {c}: {n} vs mean {mean}");
        }
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(generate_shapes_dataset(10, &[9].into(), 64, 0).is_err());
        assert!(generate_shapes_dataset(10, &BTreeSet::new(), 64, 0).is_err());
        assert!(generate_shapes_dataset(10, &[1].into(), 16, 0).is_err());
        assert!(generate_shapes_dataset(0, &[1].into(), 64, 0).is_err());
    }

    #[test]
    fn hollow_shapes_have_holes() {
        let frame = BBox::new(10.0, 10.0, 40.0, 40.0);
        for class in 5..=8 {
            let solid = rasterize(class - 4, &frame, 3.0, 64);
            let hollow = rasterize(class, &frame, 3.0, 64);
            assert!(hollow.area() < solid.area(), "class {class}");
            assert!(hollow.area() > 0);
        }
    }
}
