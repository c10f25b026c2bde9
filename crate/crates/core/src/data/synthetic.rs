//! Seeded synthetic scenes of simple shapes with exhaustive instance labels.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Category, Dataset, GroundTruthInstance, Sample, Supervision};
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Triangle,
    Ring,
    Cross,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Rectangle,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
        }
    }

    /// Rasterizes the shape inscribed in `[x0, x0 + w) x [y0, y0 + h)`.
    /// `apex` in `[0, 1]` positions the triangle's top vertex.
    fn rasterize(&self, x0: f64, y0: f64, w: f64, h: f64, apex: f64, height: usize, width: usize) -> BinaryMask {
        let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
        let (rx, ry) = (w / 2.0, h / 2.0);
        BinaryMask::from_fn(height, width, |y, x| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside_box = px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
            let ell = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
            match self {
                ShapeFamily::Ellipse => ell <= 1.0,
                ShapeFamily::Rectangle => inside_box,
                ShapeFamily::Ring => ell <= 1.0 && ell >= 0.3,
                ShapeFamily::Cross => {
                    let hbar = (py - cy).abs() <= h / 6.0 && px >= x0 && px < x0 + w;
                    let vbar = (px - cx).abs() <= w / 6.0 && py >= y0 && py < y0 + h;
                    hbar || vbar
                }
                ShapeFamily::Triangle => {
                    if !inside_box {
                        return false;
                    }
                    // Edges from the apex (ax, y0) down to the bottom corners.
                    let ax = x0 + apex * w;
                    let t = (py - y0) / h;
                    let left = ax + (x0 - ax) * t;
                    let right = ax + (x0 + w - ax) * t;
                    px >= left && px <= right
                }
            }
        })
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shape family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// One category per family, with ids assigned in list order starting at 1.
    pub families: Vec<ShapeFamily>,
    /// Chance that a new shape may overlap earlier ones.
    pub occlusion_prob: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            min_shapes: 2,
            max_shapes: 4,
            families: ShapeFamily::ALL.to_vec(),
            occlusion_prob: 0.2,
            min_size: 10,
            max_size: 28,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::InvalidConfig("at least one shape family is required".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidConfig("need 1 <= min_shapes <= max_shapes".into()));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size > self.width.min(self.height) {
            return Err(Error::InvalidConfig(
                "need 4 <= min_size <= max_size <= image side".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::InvalidConfig("occlusion_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        self.families
            .iter()
            .enumerate()
            .map(|(i, f)| Category {
                id: i as u64 + 1,
                name: f.name().to_string(),
            })
            .collect()
    }
}

const MIN_VISIBLE_FRACTION: f64 = 0.4;
const MIN_VISIBLE_PIXELS: u64 = 16;
const PLACEMENT_TRIES: usize = 40;

struct Placed {
    mask: BinaryMask,
    full_area: u64,
    category_id: u64,
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> i32 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i32 - y as i32).abs()).sum()
}

fn render_scene(spec: &SceneSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let (h, w) = (spec.height, spec.width);
    let background = random_color(&mut rng);
    let mut image = RgbImage::from_fn(w as u32, h as u32, |_, _| {
        let mut px = background;
        for c in &mut px {
            *c = (*c as i32 + rng.random_range(-6..=6)).clamp(0, 255) as u8;
        }
        Rgb(px)
    });

    let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..n_shapes {
        let family_idx = rng.random_range(0..spec.families.len());
        let family = spec.families[family_idx];
        let may_overlap = rng.random_bool(spec.occlusion_prob);
        let mut color = random_color(&mut rng);
        while color_distance(color, background) < 150 {
            color = random_color(&mut rng);
        }
        for _ in 0..PLACEMENT_TRIES {
            let sw = rng.random_range(spec.min_size..=spec.max_size) as f64;
            let sh = rng.random_range(spec.min_size..=spec.max_size) as f64;
            let x0 = rng.random_range(0.0..=(w as f64 - sw));
            let y0 = rng.random_range(0.0..=(h as f64 - sh));
            let apex = rng.random_range(0.2..0.8);
            let region = family.rasterize(x0, y0, sw, sh, apex, h, w);
            let area = region.area();
            if area < MIN_VISIBLE_PIXELS {
                continue;
            }
            let acceptable = placed.iter().all(|p| {
                let (inter, _) = p.mask.overlap_counts(&region).expect("same canvas");
                if may_overlap {
                    let left = p.mask.area() - inter;
                    left >= MIN_VISIBLE_PIXELS
                        && left as f64 >= MIN_VISIBLE_FRACTION * p.full_area as f64
                } else {
                    inter == 0 && !boxes_touch(&p.mask, &region)
                }
            });
            if !acceptable {
                continue;
            }
            for p in &mut placed {
                p.mask.and_not(&region).expect("same canvas");
            }
            for y in 0..h {
                for x in 0..w {
                    if region.get(y, x) {
                        image.put_pixel(x as u32, y as u32, Rgb(color));
                    }
                }
            }
            placed.push(Placed {
                mask: region,
                full_area: area,
                category_id: family_idx as u64 + 1,
            });
            break;
        }
    }

    let instances = placed
        .into_iter()
        .filter_map(|p| GroundTruthInstance::from_mask(p.mask, p.category_id, true))
        .collect();
    Sample {
        image_id: index as u64 + 1,
        file_name: format!("images/{index:06}.png"),
        width: w,
        height: h,
        image: Some(image),
        instances,
    }
}

fn boxes_touch(a: &BinaryMask, b: &BinaryMask) -> bool {
    match (a.tight_box(), b.tight_box()) {
        (Some(p), Some(q)) => p.x1 <= q.x2 && q.x1 <= p.x2 && p.y1 <= q.y2 && q.y1 <= p.y2,
        _ => false,
    }
}

/// `n_images` scenes; scene `i` depends only on `(spec, i)`.
pub fn generate_synthetic(spec: &SceneSpec, n_images: usize) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        categories: spec.categories(),
        samples: (0..n_images).map(|i| render_scene(spec, i)).collect(),
        supervision: Supervision::All,
    })
}
