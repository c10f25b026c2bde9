//! COCO annotation files and COCO results files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raster::{rasterize_box, rasterize_polygons};
use super::{Category, CategorySplit, Dataset, GroundTruthInstance, Sample, Supervision};
use crate::error::{Error, Result};
use crate::geometry::{rle_decode, rle_encode, BinaryMask, BoxXyxy, RleMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default)]
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
    #[serde(default)]
    pub iscrowd: u8,
}

/// RLE in its JSON form: `{"size": [h, w], "counts": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleJson {
    pub size: [usize; 2],
    pub counts: RleCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Runs(Vec<u32>),
    /// Compressed string form; recognized so it can be rejected with a clear message.
    Compressed(String),
}

impl RleJson {
    pub fn from_rle(rle: &RleMask) -> Self {
        RleJson {
            size: [rle.height, rle.width],
            counts: RleCounts::Runs(rle.counts.clone()),
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self::from_rle(&rle_encode(mask))
    }

    pub fn to_rle(&self) -> Result<RleMask> {
        match &self.counts {
            RleCounts::Runs(c) => RleMask::new(self.size[0], self.size[1], c.clone()),
            RleCounts::Compressed(_) => Err(Error::InvalidRle(
                "compressed string counts are not supported; use integer runs".into(),
            )),
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        rle_decode(&self.to_rle()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(RleJson),
}

pub fn parse_coco(json: &str) -> Result<CocoFile> {
    Ok(serde_json::from_str(json)?)
}

pub fn load_coco(path: &Path, split: &CategorySplit, supervision: Supervision) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = parse_coco(&text)?;
    Dataset::from_coco(&file, split, supervision)
}

impl Dataset {
    pub fn from_coco(file: &CocoFile, split: &CategorySplit, supervision: Supervision) -> Result<Self> {
        let categories: Vec<Category> = file
            .categories
            .iter()
            .map(|c| Category {
                id: c.id,
                name: c.name.clone(),
            })
            .collect();
        let known: std::collections::HashSet<u64> = categories.iter().map(|c| c.id).collect();
        for id in split.base_ids().iter().chain(split.novel_ids()) {
            if !known.contains(id) {
                return Err(Error::InvalidConfig(format!(
                    "split names category {id}, which the file does not define"
                )));
            }
        }
        let mut samples: Vec<Sample> = file
            .images
            .iter()
            .map(|im| Sample {
                image_id: im.id,
                file_name: im.file_name.clone(),
                width: im.width,
                height: im.height,
                image: None,
                instances: Vec::new(),
            })
            .collect();
        let by_id: HashMap<u64, usize> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.image_id, i))
            .collect();

        for (index, ann) in file.annotations.iter().enumerate() {
            let fail = |message: String| Error::Annotation { index, message };
            if !known.contains(&ann.category_id) {
                return Err(fail(format!("unknown category id {}", ann.category_id)));
            }
            let &si = by_id
                .get(&ann.image_id)
                .ok_or_else(|| fail(format!("unknown image id {}", ann.image_id)))?;
            let (h, w) = (samples[si].height, samples[si].width);
            let bbox = BoxXyxy::from_xywh(ann.bbox).map_err(|e| fail(e.to_string()))?;
            let mask = match &ann.segmentation {
                Some(Segmentation::Polygons(p)) => rasterize_polygons(p, h, w),
                Some(Segmentation::Rle(r)) => {
                    if r.size != [h, w] {
                        return Err(fail(format!("RLE size {:?} differs from image {h}x{w}", r.size)));
                    }
                    let m = r.decode().map_err(|e| fail(e.to_string()))?;
                    if let Some(a) = ann.area {
                        if (m.area() as f64 - a).abs() > 1.0 {
                            log::warn!(
                                "annotation {index}: decoded area {} differs from recorded area {a}",
                                m.area()
                            );
                        }
                    }
                    m
                }
                None => rasterize_box(&bbox, h, w),
            };
            if let Some(tb) = mask.tight_box() {
                let outside = tb.x1 < bbox.x1 - 1.0
                    || tb.y1 < bbox.y1 - 1.0
                    || tb.x2 > bbox.x2 + 1.0
                    || tb.y2 > bbox.y2 + 1.0;
                if outside {
                    log::warn!("annotation {index}: mask extends beyond its box");
                }
            }
            let area = ann.area.unwrap_or(mask.area() as f64);
            samples[si].instances.push(GroundTruthInstance {
                bbox,
                mask,
                category_id: ann.category_id,
                is_base: split.is_base(ann.category_id),
                area,
            });
        }
        Ok(Dataset {
            categories,
            samples,
            supervision,
        })
    }

    /// Serializes every instance (supervised or not) with RLE segmentations.
    pub fn to_coco(&self) -> CocoFile {
        let mut annotations = Vec::new();
        for s in &self.samples {
            for inst in &s.instances {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: s.image_id,
                    category_id: inst.category_id,
                    bbox: inst.bbox.to_xywh(),
                    area: Some(inst.area),
                    segmentation: Some(Segmentation::Rle(RleJson::from_mask(&inst.mask))),
                    iscrowd: 0,
                });
            }
        }
        CocoFile {
            images: self
                .samples
                .iter()
                .map(|s| CocoImage {
                    id: s.image_id,
                    file_name: s.file_name.clone(),
                    width: s.width,
                    height: s.height,
                })
                .collect(),
            annotations,
            categories: self
                .categories
                .iter()
                .map(|c| CocoCategory {
                    id: c.id,
                    name: c.name.clone(),
                    supercategory: None,
                })
                .collect(),
        }
    }

    /// Writes `annotations.json` and the PNG images under `dir/images/`.
    pub fn write_coco(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.samples {
            if let Some(img) = &s.image {
                let path = dir.join(&s.file_name);
                img.save_with_format(&path, image::ImageFormat::Png)?;
            }
        }
        let path = dir.join("annotations.json");
        let json = serde_json::to_string(&self.to_coco())?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<RleJson>,
    #[serde(default)]
    pub score: Option<f64>,
}

fn default_category() -> u64 {
    1
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let json = serde_json::to_string(records)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads a results file and groups its records by image id, keeping file order.
pub fn load_results(path: &Path) -> Result<BTreeMap<u64, Vec<ResultRecord>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<ResultRecord> = serde_json::from_str(&text)?;
    let mut out: BTreeMap<u64, Vec<ResultRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.image_id).or_default().push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = r#"{
        "images": [{"id": 1, "file_name": "a.png", "width": 4, "height": 3}],
        "categories": [{"id": 1, "name": "cat"}, {"id": 2, "name": "dog"}, {"id": 3, "name": "cow"}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 3],
             "area": 3, "segmentation": {"size": [3, 4], "counts": [0, 3, 9]}},
            {"id": 2, "image_id": 1, "category_id": 2, "bbox": [1, 0, 2, 2],
             "segmentation": [[1, 0, 3, 0, 3, 2, 1, 2]]},
            {"id": 3, "image_id": 1, "category_id": 3, "bbox": [3, 2, 1, 1]}
        ]
    }"#;

    #[test]
    fn base_only_keeps_novel_for_evaluation() {
        let split = CategorySplit::new([1, 2], [3]).unwrap();
        let ds = Dataset::from_coco(&parse_coco(FILE).unwrap(), &split, Supervision::BaseOnly).unwrap();
        let s = &ds.samples[0];
        assert_eq!(s.instances.len(), 3);
        assert_eq!(s.supervised(ds.supervision).len(), 2);
        assert_eq!(s.eval_ground_truth().len(), 3);
        assert!(!s.instances[2].is_base);
    }

    #[test]
    fn rle_area_matches_record() {
        let split = CategorySplit::all_base([1, 2, 3]);
        let ds = Dataset::from_coco(&parse_coco(FILE).unwrap(), &split, Supervision::All).unwrap();
        let inst = &ds.samples[0].instances[0];
        assert!((inst.mask.area() as f64 - 3.0).abs() <= 1.0);
        assert_eq!(inst.mask.tight_box().unwrap(), inst.bbox);
        assert_eq!(ds.samples[0].instances[1].mask.area(), 4);
        assert_eq!(ds.samples[0].instances[2].mask.area(), 1);
    }

    #[test]
    fn rejects_bad_records() {
        let split = CategorySplit::default();
        let unknown = FILE.replace(r#""category_id": 3"#, r#""category_id": 9"#);
        let err = Dataset::from_coco(&parse_coco(&unknown).unwrap(), &split, Supervision::All).unwrap_err();
        assert!(matches!(err, Error::Annotation { index: 2, .. }), "{err}");

        let bad_rle = FILE.replace("[0, 3, 9]", "[0, 3, 8]");
        let err = Dataset::from_coco(&parse_coco(&bad_rle).unwrap(), &split, Supervision::All).unwrap_err();
        assert!(matches!(err, Error::Annotation { index: 0, .. }), "{err}");

        assert!(parse_coco("{\"images\": [").is_err());

        let compressed = FILE.replace("[0, 3, 9]", "\"abc\"");
        assert!(Dataset::from_coco(&parse_coco(&compressed).unwrap(), &split, Supervision::All).is_err());
    }

    #[test]
    fn empty_annotation_list() {
        let f = r#"{"images": [{"id": 1, "width": 2, "height": 2}], "annotations": [], "categories": []}"#;
        let ds = Dataset::from_coco(&parse_coco(f).unwrap(), &CategorySplit::default(), Supervision::All)
            .unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.samples[0].instances.is_empty());
    }

    #[test]
    fn round_trip_through_coco_json() {
        let split = CategorySplit::new([1, 2], [3]).unwrap();
        let ds = Dataset::from_coco(&parse_coco(FILE).unwrap(), &split, Supervision::All).unwrap();
        let json = serde_json::to_string(&ds.to_coco()).unwrap();
        let back = Dataset::from_coco(&parse_coco(&json).unwrap(), &split, Supervision::All).unwrap();
        for (a, b) in ds.samples[0].instances.iter().zip(&back.samples[0].instances) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.category_id, b.category_id);
        }
    }

    #[test]
    fn results_parse_with_optional_fields() {
        let text = r#"[{"image_id": 4, "bbox": [1, 2, 3, 4], "score": 0.5},
                       {"image_id": 4, "bbox": [0, 0, 1, 1], "score": null,
                        "segmentation": {"size": [2, 2], "counts": [1, 1, 2]}}]"#;
        let recs: Vec<ResultRecord> = serde_json::from_str(text).unwrap();
        assert_eq!(recs[0].score, Some(0.5));
        assert_eq!(recs[1].score, None);
        assert_eq!(recs[1].segmentation.as_ref().unwrap().decode().unwrap().area(), 1);
    }
}
