use std::fmt;
use std::str::FromStr;

use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GroundTruthInstance;
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

pub const LSJ_SCALE_RANGE: (f64, f64) = (0.1, 2.0);

/// Instances whose mask shrinks below this many pixels are dropped.
pub const MIN_INSTANCE_AREA: u64 = 4;

const PAD_VALUE: Rgb<u8> = Rgb([124, 116, 104]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    None,
    /// Horizontal flip with probability 0.5.
    #[default]
    Flip,
    /// Large-scale jitter followed by a flip.
    Lsj,
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMode::None => "none",
            AugmentMode::Flip => "flip",
            AugmentMode::Lsj => "lsj",
        })
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentMode::None),
            "flip" => Ok(AugmentMode::Flip),
            "lsj" => Ok(AugmentMode::Lsj),
            other => Err(Error::InvalidConfig(format!("unknown augmentation `{other}`"))),
        }
    }
}

pub fn hflip_sample(image: &RgbImage, instances: &[GroundTruthInstance]) -> (RgbImage, Vec<GroundTruthInstance>) {
    let width = image.width() as f64;
    let flipped = imageops::flip_horizontal(image);
    let inst = instances
        .iter()
        .map(|i| GroundTruthInstance {
            bbox: i.bbox.hflip(width),
            mask: i.mask.hflip(),
            ..i.clone()
        })
        .collect();
    (flipped, inst)
}

/// Rescales by `scale`, then copies an output-sized window whose top-left
/// corner sits at `offset` in the rescaled image. Negative offsets pad.
pub fn lsj_transform(
    image: &RgbImage,
    instances: &[GroundTruthInstance],
    scale: f64,
    offset: (i64, i64),
) -> (RgbImage, Vec<GroundTruthInstance>) {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let resized = if (nw, nh) == (w, h) {
        image.clone()
    } else {
        imageops::resize(image, nw as u32, nh as u32, imageops::FilterType::Triangle)
    };
    let (ox, oy) = offset;
    let src = |y: usize, x: usize| -> Option<(usize, usize)> {
        let sy = y as i64 + oy;
        let sx = x as i64 + ox;
        (sy >= 0 && sx >= 0 && (sy as usize) < nh && (sx as usize) < nw).then_some((sy as usize, sx as usize))
    };
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| match src(y as usize, x as usize) {
        Some((sy, sx)) => *resized.get_pixel(sx as u32, sy as u32),
        None => PAD_VALUE,
    });
    let (ry, rx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let inst = instances
        .iter()
        .filter_map(|i| {
            // Nearest neighbour through pixel centers.
            let mask = BinaryMask::from_fn(h, w, |y, x| match src(y, x) {
                Some((sy, sx)) => {
                    let oy = (((sy as f64 + 0.5) * ry) as usize).min(h - 1);
                    let ox = (((sx as f64 + 0.5) * rx) as usize).min(w - 1);
                    i.mask.get(oy, ox)
                }
                None => false,
            });
            if mask.area() < MIN_INSTANCE_AREA {
                return None;
            }
            GroundTruthInstance::from_mask(mask, i.category_id, i.is_base)
        })
        .collect();
    (out, inst)
}

pub fn augment(
    image: &RgbImage,
    instances: &[GroundTruthInstance],
    mode: AugmentMode,
    rng: &mut impl Rng,
) -> (RgbImage, Vec<GroundTruthInstance>) {
    let (image, instances) = match mode {
        AugmentMode::None => return (image.clone(), instances.to_vec()),
        AugmentMode::Flip => (image.clone(), instances.to_vec()),
        AugmentMode::Lsj => {
            let scale = rng.random_range(LSJ_SCALE_RANGE.0..=LSJ_SCALE_RANGE.1);
            let (w, h) = (image.width() as i64, image.height() as i64);
            let nw = ((w as f64 * scale).round() as i64).max(1);
            let nh = ((h as f64 * scale).round() as i64).max(1);
            let pick = |rng: &mut dyn rand::RngCore, span: i64| {
                if span >= 0 {
                    rng.random_range(0..=span)
                } else {
                    -rng.random_range(0..=-span)
                }
            };
            let ox = pick(rng, nw - w);
            let oy = pick(rng, nh - h);
            lsj_transform(image, instances, scale, (ox, oy))
        }
    };
    if rng.random_bool(0.5) {
        hflip_sample(&image, &instances)
    } else {
        (image, instances)
    }
}
