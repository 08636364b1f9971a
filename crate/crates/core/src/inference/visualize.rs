use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::pipeline::Detector;
use crate::error::Result;
use crate::mask::{BoundingBox, Mask};
use crate::synth::{Scene, PALETTE};

const ALPHA: f64 = 0.5;

/// `image` with each mask tinted in its colour.
pub fn overlay(image: &RgbImage, masks: &[(&Mask, [u8; 3])]) -> RgbImage {
    let mut out = image.clone();
    for (m, color) in masks {
        for (x, y, px) in out.enumerate_pixels_mut() {
            if m.get(y as usize, x as usize) >= 0.5 {
                for c in 0..3 {
                    px.0[c] = ((1.0 - ALPHA) * px.0[c] as f64 + ALPHA * color[c] as f64).round() as u8;
                }
            }
        }
    }
    out
}

/// Writes the input, ground-truth amodal, coarse amodal and refined amodal
/// overlays for one scene; returns the paths in that order.
pub fn visualize_scene(detector: &Detector, scene: &Scene, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let boxes: Vec<BoundingBox> = scene.instances.iter().map(|a| a.bbox).collect();
    let dets = detector.detect(&scene.image, Some(&boxes))?;
    let color = |i: usize| PALETTE[i % PALETTE.len()];
    let gt: Vec<(&Mask, [u8; 3])> = scene.instances.iter().enumerate().map(|(i, a)| (&a.amodal_mask, color(i))).collect();
    let coarse: Vec<(&Mask, [u8; 3])> = dets.iter().enumerate().map(|(i, d)| (&d.coarse_amodal, color(i))).collect();
    let refined: Vec<(&Mask, [u8; 3])> =
        dets.iter().enumerate().map(|(i, d)| (&d.detection.amodal_mask, color(i))).collect();
    let panels = [
        ("image", scene.image.clone()),
        ("gt_amodal", overlay(&scene.image, &gt)),
        ("coarse", overlay(&scene.image, &coarse)),
        ("refined", overlay(&scene.image, &refined)),
    ];
    let mut paths = Vec::with_capacity(panels.len());
    for (name, img) in panels {
        let p = out_dir.join(format!("scene{:06}_{name}.png", scene.id));
        img.save(&p)?;
        paths.push(p);
    }
    Ok(paths)
}
