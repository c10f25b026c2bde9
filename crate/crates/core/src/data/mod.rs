//! Datasets: COCO-format ingestion, base/novel category splits, synthetic
//! scenes and augmentation.

mod augment;
mod coco;
mod raster;
mod synthetic;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalGroundTruth;
use crate::geometry::{BinaryMask, BoxXyxy};

pub use augment::{augment, hflip_sample, lsj_transform, AugmentMode, LSJ_SCALE_RANGE, MIN_INSTANCE_AREA};
pub use coco::{
    load_coco, load_results, parse_coco, write_results, CocoAnnotation, CocoCategory, CocoFile,
    CocoImage, ResultRecord, RleJson, Segmentation,
};
pub use raster::{rasterize_box, rasterize_polygons};
pub use synthetic::{generate_synthetic, SceneSpec, ShapeFamily};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Disjoint base (seen in training) and novel (evaluation-only) category ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategorySplit {
    base: BTreeSet<u64>,
    novel: BTreeSet<u64>,
}

impl CategorySplit {
    pub fn new(
        base: impl IntoIterator<Item = u64>,
        novel: impl IntoIterator<Item = u64>,
    ) -> Result<Self> {
        let base: BTreeSet<u64> = base.into_iter().collect();
        let novel: BTreeSet<u64> = novel.into_iter().collect();
        if let Some(id) = base.intersection(&novel).next() {
            return Err(Error::InvalidConfig(format!(
                "category {id} is both base and novel"
            )));
        }
        Ok(CategorySplit { base, novel })
    }

    /// Every listed category is base; nothing is novel.
    pub fn all_base(ids: impl IntoIterator<Item = u64>) -> Self {
        CategorySplit {
            base: ids.into_iter().collect(),
            novel: BTreeSet::new(),
        }
    }

    pub fn base_ids(&self) -> &BTreeSet<u64> {
        &self.base
    }

    pub fn novel_ids(&self) -> &BTreeSet<u64> {
        &self.novel
    }

    pub fn is_base(&self, id: u64) -> bool {
        self.base.contains(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Novel-category instances are kept for evaluation only.
    BaseOnly,
    #[default]
    All,
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::BaseOnly => "base-only",
            Supervision::All => "all",
        })
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base-only" | "base_only" => Ok(Supervision::BaseOnly),
            "all" => Ok(Supervision::All),
            other => Err(Error::InvalidConfig(format!("unknown supervision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub bbox: BoxXyxy,
    pub mask: BinaryMask,
    pub category_id: u64,
    pub is_base: bool,
    /// Area used for size bucketing; the mask's pixel count unless the source says otherwise.
    pub area: f64,
}

impl GroundTruthInstance {
    /// Instance whose box is the tight box of `mask`. `None` for an empty mask.
    pub fn from_mask(mask: BinaryMask, category_id: u64, is_base: bool) -> Option<Self> {
        let bbox = mask.tight_box()?;
        let area = mask.area() as f64;
        Some(GroundTruthInstance {
            bbox,
            mask,
            category_id,
            is_base,
            area,
        })
    }

    pub fn to_eval(&self) -> EvalGroundTruth {
        EvalGroundTruth {
            bbox: self.bbox,
            mask: Some(self.mask.clone()),
            area: self.area,
            is_base: self.is_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub image: Option<RgbImage>,
    /// Every annotated instance, including those withheld from supervision.
    pub instances: Vec<GroundTruthInstance>,
}

impl Sample {
    pub fn supervised(&self, supervision: Supervision) -> Vec<&GroundTruthInstance> {
        self.instances
            .iter()
            .filter(|i| supervision == Supervision::All || i.is_base)
            .collect()
    }

    pub fn eval_ground_truth(&self) -> Vec<EvalGroundTruth> {
        self.instances.iter().map(GroundTruthInstance::to_eval).collect()
    }

    pub fn image(&self) -> Result<&RgbImage> {
        self.image.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("pixels for image {} were not loaded", self.file_name))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub samples: Vec<Sample>,
    pub supervision: Supervision,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Re-tags every instance from `split` and sets the supervision mode.
    pub fn apply_split(&mut self, split: &CategorySplit, supervision: Supervision) {
        for s in &mut self.samples {
            for inst in &mut s.instances {
                inst.is_base = split.is_base(inst.category_id);
            }
        }
        self.supervision = supervision;
    }

    /// Split built from category names.
    pub fn split_by_names(&self, base: &[&str], novel: &[&str]) -> Result<CategorySplit> {
        let lookup = |n: &&str| {
            self.category_by_name(n)
                .map(|c| c.id)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown category `{n}`")))
        };
        CategorySplit::new(
            base.iter().map(lookup).collect::<Result<Vec<_>>>()?,
            novel.iter().map(lookup).collect::<Result<Vec<_>>>()?,
        )
    }

    /// Loads the pixels of every sample from `root/<file_name>`.
    pub fn load_images(&mut self, root: &std::path::Path) -> Result<()> {
        for s in &mut self.samples {
            let path = root.join(&s.file_name);
            let img = image::open(&path)?.to_rgb8();
            if (img.width() as usize, img.height() as usize) != (s.width, s.height) {
                return Err(Error::InvalidConfig(format!(
                    "{} is {}x{}, annotations say {}x{}",
                    path.display(),
                    img.width(),
                    img.height(),
                    s.width,
                    s.height
                )));
            }
            s.image = Some(img);
        }
        Ok(())
    }
}
