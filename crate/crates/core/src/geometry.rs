//! Geometric kernels shared by the losses, the matcher and the evaluator.
//!
//! Boxes use the half-open pixel-area convention: a box `[x1, y1, x2, y2]`
//! covers `(x2 - x1) * (y2 - y1)` square pixels, so a single pixel at column
//! `x` spans `[x, x + 1)`. Masks are stored row-major as packed bits; the RLE
//! codec walks them column-major to stay compatible with COCO annotation files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in absolute image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxXyxy { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self> {
        let [x, y, w, h] = xywh;
        Self::new(x, y, x + w, y + h)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::InvalidBox(format!("negative extent in {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    /// Normalizes into center/size form relative to an image of the given size.
    pub fn to_ccwh(&self, image_width: f64, image_height: f64) -> BoxCcwh {
        BoxCcwh {
            cx: (self.x1 + self.x2) * 0.5 / image_width,
            cy: (self.y1 + self.y2) * 0.5 / image_height,
            w: self.width() / image_width,
            h: self.height() / image_height,
        }
    }

    pub fn clip(&self, image_width: f64, image_height: f64) -> BoxXyxy {
        let x1 = self.x1.clamp(0.0, image_width);
        let y1 = self.y1.clamp(0.0, image_height);
        BoxXyxy {
            x1,
            y1,
            x2: self.x2.clamp(x1, image_width),
            y2: self.y2.clamp(y1, image_height),
        }
    }

    /// Mirror about the vertical center line of an image of width `image_width`.
    pub fn hflip(&self, image_width: f64) -> BoxXyxy {
        BoxXyxy {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    fn intersection(&self, other: &BoxXyxy) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    fn hull(&self, other: &BoxXyxy) -> BoxXyxy {
        BoxXyxy {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

/// Center/size box normalized by the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCcwh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCcwh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoxCcwh { cx, cy, w, h };
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {b:?}")));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!("negative size in {b:?}")));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::InvalidBox(format!("center outside the image in {b:?}")));
        }
        Ok(b)
    }

    pub const FULL_IMAGE: BoxCcwh = BoxCcwh {
        cx: 0.5,
        cy: 0.5,
        w: 1.0,
        h: 1.0,
    };

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxCcwh {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }

    /// Corners in normalized coordinates (image size 1x1).
    pub fn corners(&self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn to_xyxy(&self, image_width: f64, image_height: f64) -> BoxXyxy {
        let c = self.corners();
        BoxXyxy {
            x1: c.x1 * image_width,
            y1: c.y1 * image_height,
            x2: c.x2 * image_width,
            y2: c.y2 * image_height,
        }
    }

    /// Clamps into a valid normalized box: center inside the image, size in `[min_size, 1]`.
    pub fn sanitized(&self, min_size: f64) -> BoxCcwh {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_finite() { v.clamp(lo, hi) } else { lo };
        BoxCcwh {
            cx: fix(self.cx, 0.0, 1.0),
            cy: fix(self.cy, 0.0, 1.0),
            w: fix(self.w, min_size, 1.0),
            h: fix(self.h, min_size, 1.0),
        }
    }
}

/// Intersection over union of two boxes. Two zero-area boxes give 0.
pub fn box_iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn generalized_iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (hull - union) / hull
}

/// Binary mask of `height x width` pixels, packed row-major into 64-bit words.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        BinaryMask {
            height,
            width,
            bits: vec![0; n.div_ceil(64)],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = BinaryMask::new(height, width);
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    /// Row-major booleans; `data.len()` must equal `height * width`.
    pub fn from_row_major(height: usize, width: usize, data: &[bool]) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                left: (height, width),
                right: (data.len(), 1),
            });
        }
        Ok(BinaryMask::from_fn(height, width, |y, x| data[y * width + x]))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        let i = y * self.width + x;
        (self.bits[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        let i = y * self.width + x;
        if value {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn to_row_major(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.get(y, x));
            }
        }
        out
    }

    /// Tight half-open bounding box, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BoxXyxy> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    any = true;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        any.then(|| BoxXyxy {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: x2 as f64,
            y2: y2 as f64,
        })
    }

    pub fn hflip(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    pub fn and_not(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !b;
        }
        Ok(())
    }

    pub fn or_assign(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `(|a and b|, |a or b|)`.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        self.check_shape(other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b).count_ones() as u64;
            union += (a | b).count_ones() as u64;
        }
        Ok((inter, union))
    }
}

/// Value reported by [`mask_iou`] when both masks are empty.
pub const EMPTY_MASK_IOU: f64 = 1.0;

/// Mask IoU; two empty masks count as a perfect match.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    mask_iou_with_empty(a, b, EMPTY_MASK_IOU)
}

pub fn mask_iou_with_empty(a: &BinaryMask, b: &BinaryMask, empty_value: f64) -> Result<f64> {
    let (inter, union) = a.overlap_counts(b)?;
    if union == 0 {
        Ok(empty_value)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Uncompressed COCO run-length encoding: column-major runs starting with zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn new(height: usize, width: usize, counts: Vec<u32>) -> Result<Self> {
        let r = RleMask {
            height,
            width,
            counts,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expected = (self.height * self.width) as u64;
        if total != expected {
            return Err(Error::InvalidRle(format!(
                "counts sum to {total}, expected {}x{} = {expected}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Foreground pixel count: the odd-indexed runs.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..mask.width() {
        for y in 0..mask.height() {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask {
        height: mask.height(),
        width: mask.width(),
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    rle.validate()?;
    let mut mask = BinaryMask::new(rle.height, rle.width);
    let mut idx = 0usize;
    let mut value = false;
    for &c in &rle.counts {
        if value {
            for i in idx..idx + c as usize {
                // column-major position i -> (y, x)
                mask.set(i % rle.height, i / rle.height, true);
            }
        }
        idx += c as usize;
        value = !value;
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];
}

pub const SMALL_AREA_LIMIT: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA_LIMIT: f64 = 96.0 * 96.0;

pub fn size_bucket(area: f64) -> Result<SizeBucket> {
    if area.is_nan() || area < 0.0 {
        return Err(Error::NegativeArea(area));
    }
    Ok(if area < SMALL_AREA_LIMIT {
        SizeBucket::Small
    } else if area < MEDIUM_AREA_LIMIT {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    })
}
