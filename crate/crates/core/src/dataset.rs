//! On-disk dataset layout:
//!
//! ```text
//! DIR/annotations/<split>.json   COCO-style, plus amodal_seg / visible_seg / occlusion_rate
//! DIR/images/<split>/<id>.png
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_area, occlusion_rate, BoundingBox};
use crate::rle::Rle;
use crate::synth::{Scene, ShapeTemplate};
use crate::types::{CategoryId, InstanceAnnotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: CategoryId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub id: u64,
    pub image_id: u64,
    pub category_id: CategoryId,
    /// `[x, y, w, h]` of the amodal mask.
    pub bbox: [f64; 4],
    /// Amodal area in pixels.
    pub area: f64,
    pub iscrowd: u8,
    pub amodal_seg: Rle,
    pub visible_seg: Rle,
    pub occlusion_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub categories: Vec<CategoryEntry>,
}

/// One split held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<CategoryEntry>,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn from_scenes(templates: &[ShapeTemplate], scenes: Vec<Scene>) -> Self {
        let categories = templates.iter().map(|t| CategoryEntry { id: t.category_id, name: t.name.clone() }).collect();
        Self { categories, scenes }
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn category_ids(&self) -> Vec<CategoryId> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn num_instances(&self) -> usize {
        self.scenes.iter().map(|s| s.instances.len()).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = (&Scene, &InstanceAnnotation)> {
        self.scenes.iter().flat_map(|s| s.instances.iter().map(move |a| (s, a)))
    }

    pub fn to_annotation_file(&self, split: &str) -> AnnotationFile {
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for scene in &self.scenes {
            images.push(ImageEntry {
                id: scene.id,
                file_name: format!("{split}/{:06}.png", scene.id),
                width: scene.image.width() as usize,
                height: scene.image.height() as usize,
            });
            for a in &scene.instances {
                annotations.push(AnnotationEntry {
                    id: annotations.len() as u64 + 1,
                    image_id: scene.id,
                    category_id: a.category_id,
                    bbox: a.bbox.to_xywh(),
                    area: mask_area(&a.amodal_mask),
                    iscrowd: 0,
                    amodal_seg: Rle::encode(&a.amodal_mask),
                    visible_seg: Rle::encode(&a.visible_mask),
                    occlusion_rate: a.occlusion_rate,
                });
            }
        }
        AnnotationFile { images, annotations, categories: self.categories.clone() }
    }

    pub fn save(&self, dir: &Path, split: &str) -> Result<()> {
        let img_dir = dir.join("images").join(split);
        fs::create_dir_all(&img_dir)?;
        fs::create_dir_all(dir.join("annotations"))?;
        let file = self.to_annotation_file(split);
        for (scene, entry) in self.scenes.iter().zip(&file.images) {
            scene.image.save(dir.join("images").join(&entry.file_name))?;
        }
        let w = BufWriter::new(fs::File::create(annotation_path(dir, split))?);
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn load(dir: &Path, split: &str) -> Result<Self> {
        let path = annotation_path(dir, split);
        let bad = |msg: String| Error::Dataset { path: path.clone(), msg };
        let file: AnnotationFile = serde_json::from_slice(&fs::read(&path)?)?;
        let mut scenes = Vec::with_capacity(file.images.len());
        for img in &file.images {
            let image = image::open(dir.join("images").join(&img.file_name))?.to_rgb8();
            if (image.width() as usize, image.height() as usize) != (img.width, img.height) {
                return Err(bad(format!("image {} size differs from its entry", img.file_name)));
            }
            scenes.push(Scene { id: img.id, image, instances: Vec::new() });
        }
        for ann in &file.annotations {
            let scene = scenes
                .iter_mut()
                .find(|s| s.id == ann.image_id)
                .ok_or_else(|| bad(format!("annotation {} references unknown image {}", ann.id, ann.image_id)))?;
            if !file.categories.iter().any(|c| c.id == ann.category_id) {
                return Err(bad(format!("annotation {} has unknown category {}", ann.id, ann.category_id)));
            }
            let amodal = ann.amodal_seg.decode()?;
            let visible = ann.visible_seg.decode()?;
            let rate = occlusion_rate(&visible, &amodal)?;
            if (rate - ann.occlusion_rate).abs() > 1e-6 {
                return Err(bad(format!("annotation {}: stored occlusion rate {} != {rate}", ann.id, ann.occlusion_rate)));
            }
            let mut a = InstanceAnnotation::new(ann.category_id, amodal, visible)?;
            a.bbox = BoundingBox::from_xywh(ann.bbox)?;
            scene.instances.push(a);
        }
        Ok(Self { categories: file.categories, scenes })
    }
}

pub fn annotation_path(dir: &Path, split: &str) -> PathBuf {
    dir.join("annotations").join(format!("{split}.json"))
}
