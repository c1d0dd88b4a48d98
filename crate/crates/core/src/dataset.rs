//! In-memory datasets and their on-disk form: one JSON annotation document
//! plus a directory of PNG images.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};
use crate::scenario::ClassId;

/// One labelled object.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub class_id: ClassId,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

impl InstanceAnnotation {
    /// Builds an annotation whose box is the tight box of `mask`.
    pub fn new(class_id: ClassId, mask: BinaryMask) -> Result<Self> {
        let bbox = mask
            .bounding_box()
            .ok_or_else(|| Error::invalid("annotation mask has no foreground pixel"))?;
        Ok(InstanceAnnotation {
            class_id,
            bbox,
            mask,
        })
    }

    /// Checks box validity, bounds and agreement with the mask (±1 px per side).
    pub fn validate(&self) -> std::result::Result<(), String> {
        let b = &self.bbox;
        if !(b.x0 < b.x1 && b.y0 < b.y1) {
            return Err(format!("degenerate box {:?}", b.to_array()));
        }
        let (w, h) = (self.mask.width() as f32, self.mask.height() as f32);
        if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > w || b.y1 > h {
            return Err(format!("box {:?} outside {w}x{h} image", b.to_array()));
        }
        let tight = self
            .mask
            .bounding_box()
            .ok_or_else(|| "mask has no foreground pixel".to_string())?;
        let off = [
            (b.x0 - tight.x0).abs(),
            (b.y0 - tight.y0).abs(),
            (b.x1 - tight.x1).abs(),
            (b.y1 - tight.y1).abs(),
        ];
        if off.iter().any(|&d| d > 1.0) {
            return Err(format!(
                "box {:?} is not the tight box {:?} of its mask",
                b.to_array(),
                tight.to_array()
            ));
        }
        Ok(())
    }
}

/// An image (channels x height x width, values in [0, 1]) and its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image_id: String,
    pub pixels: Array3<f32>,
    pub annotations: Vec<InstanceAnnotation>,
}

impl ImageSample {
    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn flip_horizontal(&self) -> ImageSample {
        let mut pixels = self.pixels.clone();
        pixels.invert_axis(ndarray::Axis(2));
        let w = self.width() as f32;
        ImageSample {
            image_id: self.image_id.clone(),
            pixels: pixels.as_standard_layout().to_owned(),
            annotations: self
                .annotations
                .iter()
                .map(|a| InstanceAnnotation {
                    class_id: a.class_id,
                    bbox: a.bbox.flip_horizontal(w),
                    mask: a.mask.flip_horizontal(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub class_catalog: BTreeMap<ClassId, String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Instance count per class id.
    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for a in self.samples.iter().flat_map(|s| &s.annotations) {
            *counts.entry(a.class_id).or_insert(0) += 1;
        }
        counts
    }

    pub fn classes_present(&self) -> Vec<ClassId> {
        self.class_counts().into_keys().collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    file: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: String,
    class_id: ClassId,
    #[serde(rename = "box")]
    bbox: [f32; 4],
    mask_rle: String,
}

#[derive(Serialize, Deserialize)]
struct CategoryRecord {
    id: ClassId,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct AnnotationDocument {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<CategoryRecord>,
}

/// Writes `<dir>/annotations.json` and `<dir>/images/<id>.png`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut doc = AnnotationDocument {
        images: Vec::with_capacity(dataset.samples.len()),
        annotations: Vec::new(),
        categories: dataset
            .class_catalog
            .iter()
            .map(|(&id, name)| CategoryRecord {
                id,
                name: name.clone(),
            })
            .collect(),
    };
    for s in &dataset.samples {
        let file = format!("{}.png", s.image_id);
        write_png(&image_dir.join(&file), &s.pixels)?;
        doc.images.push(ImageRecord {
            id: s.image_id.clone(),
            file,
            width: s.width(),
            height: s.height(),
        });
        for a in &s.annotations {
            doc.annotations.push(AnnotationRecord {
                image_id: s.image_id.clone(),
                class_id: a.class_id,
                bbox: a.bbox.to_array(),
                mask_rle: a.mask.to_rle(),
            });
        }
    }
    let path = dir.join("annotations.json");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &doc)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads an annotation document; image paths are resolved against `image_root`.
pub fn load_dataset(annotation_file: &Path, image_root: &Path) -> Result<Dataset> {
    let f = File::open(annotation_file).map_err(|e| Error::io(annotation_file, e))?;
    let doc: AnnotationDocument = serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Record {
        file: annotation_file.to_path_buf(),
        record: "<document>".into(),
        message: format!("schema violation: {e}"),
    })?;
    let record_err = |record: &str, message: String| Error::Record {
        file: annotation_file.to_path_buf(),
        record: record.to_string(),
        message,
    };

    let class_catalog: BTreeMap<ClassId, String> =
        doc.categories.into_iter().map(|c| (c.id, c.name)).collect();
    let mut index = BTreeMap::new();
    let mut samples = Vec::with_capacity(doc.images.len());
    for rec in doc.images {
        let path = image_root.join(&rec.file);
        if !path.is_file() {
            return Err(record_err(&rec.id, format!("missing image file {}", path.display())));
        }
        let pixels = read_png(&path)?;
        if pixels.dim().1 != rec.height || pixels.dim().2 != rec.width {
            return Err(record_err(
                &rec.id,
                format!(
                    "image is {}x{}, record says {}x{}",
                    pixels.dim().2,
                    pixels.dim().1,
                    rec.width,
                    rec.height
                ),
            ));
        }
        if index.insert(rec.id.clone(), samples.len()).is_some() {
            return Err(record_err(&rec.id, "duplicate image id".into()));
        }
        samples.push(ImageSample {
            image_id: rec.id,
            pixels,
            annotations: Vec::new(),
        });
    }
    for rec in doc.annotations {
        let &i = index
            .get(&rec.image_id)
            .ok_or_else(|| record_err(&rec.image_id, "annotation refers to unknown image".into()))?;
        let sample = &mut samples[i];
        if !class_catalog.contains_key(&rec.class_id) {
            return Err(record_err(
                &rec.image_id,
                format!("class {} not in categories", rec.class_id),
            ));
        }
        let mask = BinaryMask::from_rle(sample.width(), sample.height(), &rec.mask_rle)
            .map_err(|e| record_err(&rec.image_id, e.to_string()))?;
        let ann = InstanceAnnotation {
            class_id: rec.class_id,
            bbox: BBox::from_array(rec.bbox),
            mask,
        };
        ann.validate().map_err(|m| record_err(&rec.image_id, m))?;
        sample.annotations.push(ann);
    }
    Ok(Dataset {
        samples,
        class_catalog,
    })
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join("annotations.json"), &dir.join("images"))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn write_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(to_u8(pixels[[ch, y, x]]));
            }
        }
    }
    write_rgb_png(path, w, h, &buf)
}

pub(crate) fn write_rgb_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

fn read_png(path: &Path) -> Result<Array3<f32>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(f));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Png(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = &buf[(y * w + x) * stride..];
            for ch in 0..3 {
                let v = if stride >= 3 { px[ch] } else { px[0] };
                out[[ch, y, x]] = v as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, s: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(w, h);
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                m.set(x, y, true);
            }
        }
        m
    }

    fn tiny_dataset() -> Dataset {
        let mut pixels = Array3::zeros((3, 16, 16));
        pixels[[0, 3, 4]] = 128.0 / 255.0;
        let positive = ImageSample {
            image_id: "img0".into(),
            pixels: pixels.clone(),
            annotations: vec![InstanceAnnotation::new(2, square_mask(16, 16, 2, 3, 5)).unwrap()],
        };
        let negative = ImageSample {
            image_id: "img1".into(),
            pixels,
            annotations: vec![],
        };
        Dataset {
            samples: vec![positive, negative],
            class_catalog: [(1, "a".to_string()), (2, "b".to_string())].into_iter().collect(),
        }
    }

    #[test]
    fn round_trip_keeps_negative_images() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(back.samples[1].annotations.is_empty());
    }

    #[test]
    fn inverted_box_is_rejected_with_image_id() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny_dataset(), dir.path()).unwrap();
        let path = dir.path().join("annotations.json");
        let text = fs::read_to_string(&path).unwrap();
        let text = text.replace("\"box\":[2.0,3.0,7.0,8.0]", "\"box\":[7.0,3.0,2.0,8.0]");
        fs::write(&path, text).unwrap();
        let err = load_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("img0") && err.contains("degenerate"), "{err}");
    }

    #[test]
    fn loose_box_and_missing_image_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny_dataset(), dir.path()).unwrap();
        let path = dir.path().join("annotations.json");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("[2.0,3.0,7.0,8.0]", "[0.0,3.0,7.0,8.0]")).unwrap();
        assert!(load_dataset_dir(dir.path()).unwrap_err().to_string().contains("tight"));

        fs::write(&path, text).unwrap();
        fs::remove_file(dir.path().join("images/img1.png")).unwrap();
        let err = load_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("img1") && err.contains("missing"), "{err}");
    }
}
