//! Binary instance masks, pixel-edge bounding boxes and the run-length
//! encoding used by the annotation and detection files.
//!
//! Runs are taken over the mask in row-major order and always start with a
//! background run (possibly of length zero), so `"0 4"` is a mask whose
//! first four pixels are foreground.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel-edge coordinates: a mask covering columns
/// `3..=7` has `x0 = 3.0, x1 = 8.0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BBox {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let iw = self.x1.min(other.x1) - self.x0.max(other.x0);
        let ih = self.y1.min(other.y1) - self.y0.max(other.y0);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f32, height: f32) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    pub fn flip_horizontal(&self, width: f32) -> BBox {
        BBox::new(width - self.x1, self.y0, width - self.x0, self.y1)
    }
}

/// Row-major 0/1 mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask data has {} pixels, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Tight pixel-edge bounding box, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32))
    }

    pub fn iou(&self, other: &BinaryMask) -> f32 {
        debug_assert_eq!(self.data.len(), other.data.len());
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f32 / union as f32
        }
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut out = BinaryMask::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + (self.width - 1 - x)] = self.data[y * self.width + x];
            }
        }
        out
    }

    pub fn to_rle(&self) -> String {
        encode_rle(&self.data)
    }

    pub fn from_rle(width: usize, height: usize, counts: &str) -> Result<Self> {
        let data = decode_rle(counts, width * height)?;
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }
}

/// Encodes a 0/1 sequence as alternating run lengths, background first.
pub fn encode_rle(bits: &[u8]) -> String {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for &b in bits {
        let b = u8::from(b != 0);
        if b == current {
            run += 1;
        } else {
            counts.push(run);
            current = b;
            run = 1;
        }
    }
    counts.push(run);
    counts
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn decode_rle(counts: &str, len: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(len);
    let mut value = 0u8;
    for tok in counts.split_whitespace() {
        let n: usize = tok
            .parse()
            .map_err(|_| Error::invalid(format!("bad run length `{tok}` in mask counts")))?;
        if out.len() + n > len {
            return Err(Error::invalid(format!(
                "mask counts cover more than {len} pixels"
            )));
        }
        out.extend(std::iter::repeat_n(value, n));
        value ^= 1;
    }
    if out.len() != len {
        return Err(Error::invalid(format!(
            "mask counts cover {} pixels, expected {len}",
            out.len()
        )));
    }
    Ok(out)
}
