//! Back-to-front compositing of category silhouettes into occluded scenes.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::templates::{render_template, Placement, ShapeTemplate};
use crate::error::Result;
use crate::mask::{mask_area, occlusion_rate, Mask};
use crate::types::{CategoryId, InstanceAnnotation};

/// Instances hidden at or above this rate are removed from the scene.
pub const DROP_OCCLUSION: f64 = 0.95;
/// Smallest on-canvas silhouette (pixels) accepted by the sampler.
pub const MIN_INSTANCE_AREA: f64 = 40.0;
/// Placement resampling bound before an instance is skipped.
pub const MAX_RETRIES: usize = 20;

pub const PALETTE: [[u8; 3]; 8] = [
    [220, 60, 50],
    [60, 170, 75],
    [50, 90, 210],
    [235, 200, 40],
    [170, 70, 190],
    [40, 190, 200],
    [240, 130, 40],
    [200, 200, 200],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillPolicy {
    pub background: [u8; 3],
    /// Per-pixel uniform noise amplitude in intensity units.
    pub max_noise: f64,
}

impl Default for FillPolicy {
    fn default() -> Self {
        Self { background: [60, 60, 60], max_noise: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(height, width)`.
    pub canvas: (usize, usize),
    pub min_instances: usize,
    pub max_instances: usize,
    pub seed: u64,
    pub fill: FillPolicy,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { canvas: (64, 64), min_instances: 2, max_instances: 4, seed: 0, fill: FillPolicy::default() }
    }
}

/// Colour and texture of one painted layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub color: [u8; 3],
    pub noise: f64,
    pub noise_seed: u64,
}

/// One silhouette in a scene, before visibility is resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub category_id: CategoryId,
    pub amodal: Mask,
    pub fill: Fill,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub image: RgbImage,
    /// Back-to-front stacking order.
    pub instances: Vec<InstanceAnnotation>,
}

/// Independent rng stream for scene `index` under `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub(crate) fn sample_placement<R: Rng>(t: &ShapeTemplate, canvas: (usize, usize), rng: &mut R) -> Placement {
    let scale = rng.gen_range(t.scale_range.0..=t.scale_range.1);
    let rotation = rng.gen_range(t.rotation_range.0..=t.rotation_range.1);
    // keep most of the shape on canvas
    let margin = 0.6 * scale * t.silhouette.extent();
    let (h, w) = (canvas.0 as f64, canvas.1 as f64);
    let x = rng.gen_range(margin.min(w / 2.0)..=(w - margin).max(w / 2.0));
    let y = rng.gen_range(margin.min(h / 2.0)..=(h - margin).max(h / 2.0));
    Placement { scale, rotation, position: (x, y) }
}

pub(crate) fn sample_fill<R: Rng>(policy: &FillPolicy, rng: &mut R) -> Fill {
    Fill {
        color: PALETTE[rng.gen_range(0..PALETTE.len())],
        noise: rng.gen_range(0.0..=policy.max_noise),
        noise_seed: rng.gen(),
    }
}

/// Resolves visibility for back-to-front `layers` and paints the image.
///
/// Each visible mask is the layer's amodal mask minus every layer above it.
/// Layers hidden at `DROP_OCCLUSION` or more are removed (and no longer
/// occlude anything), then visibility is recomputed once; removal can only
/// lower the remaining layers' occlusion.
pub fn composite_layers(
    id: u64,
    canvas: (usize, usize),
    fill: &FillPolicy,
    background_seed: u64,
    layers: Vec<Layer>,
) -> Result<Scene> {
    let visible = resolve_visibility(&layers)?;
    let kept: Vec<Layer> = layers
        .into_iter()
        .zip(&visible)
        .filter(|(l, v)| occlusion_rate(v, &l.amodal).map(|r| r < DROP_OCCLUSION).unwrap_or(false))
        .map(|(l, _)| l)
        .collect();
    let visible = resolve_visibility(&kept)?;

    let (h, w) = canvas;
    let mut image = RgbImage::new(w as u32, h as u32);
    paint(&mut image, None, fill.background, fill.max_noise * 0.5, background_seed);
    let mut instances = Vec::with_capacity(kept.len());
    for (layer, vis) in kept.into_iter().zip(visible) {
        paint(&mut image, Some(&vis), layer.fill.color, layer.fill.noise, layer.fill.noise_seed);
        instances.push(InstanceAnnotation::new(layer.category_id, layer.amodal, vis)?);
    }
    Ok(Scene { id, image, instances })
}

fn resolve_visibility(layers: &[Layer]) -> Result<Vec<Mask>> {
    let mut out = vec![None; layers.len()];
    let Some(first) = layers.first() else { return Ok(Vec::new()) };
    let (h, w) = first.amodal.resolution();
    let mut above = Mask::zeros(h, w);
    for (i, layer) in layers.iter().enumerate().rev() {
        out[i] = Some(layer.amodal.subtract(&above)?);
        above = above.union(&layer.amodal)?;
    }
    Ok(out.into_iter().map(|m| m.expect("filled")).collect())
}

fn paint(image: &mut RgbImage, region: Option<&Mask>, color: [u8; 3], noise: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (x, y, px) in image.enumerate_pixels_mut() {
        // draw for every pixel so the texture is independent of the region
        let n: f64 = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
        if region.map_or(true, |m| m.get(y as usize, x as usize) >= 0.5) {
            *px = Rgb(color.map(|c| (c as f64 + n).round().clamp(0.0, 255.0) as u8));
        }
    }
}

/// Samples one scene from stream `index` of `spec.seed`.
pub fn composite_scene(spec: &SceneSpec, templates: &[ShapeTemplate], index: u64) -> Result<Scene> {
    assert!(!templates.is_empty(), "at least one template is required");
    assert!(spec.min_instances >= 1 && spec.min_instances <= spec.max_instances);
    let mut rng = scene_rng(spec.seed, index);
    let count = rng.gen_range(spec.min_instances..=spec.max_instances);
    let background_seed = rng.gen();
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..MAX_RETRIES {
            let t = &templates[rng.gen_range(0..templates.len())];
            let placement = sample_placement(t, spec.canvas, &mut rng);
            let fill = sample_fill(&spec.fill, &mut rng);
            let Ok(amodal) = render_template(t, placement, spec.canvas) else { continue };
            if mask_area(&amodal) < MIN_INSTANCE_AREA {
                continue;
            }
            layers.push(Layer { category_id: t.category_id, amodal, fill });
            break;
        }
    }
    composite_layers(index, spec.canvas, &spec.fill, background_seed, layers)
}

/// Generates scenes for stream indices `first..first + n` in parallel; the
/// output does not depend on the thread count.
pub fn generate_scenes(spec: &SceneSpec, templates: &[ShapeTemplate], first: u64, n: usize) -> Result<Vec<Scene>> {
    (0..n as u64).into_par_iter().map(|i| composite_scene(spec, templates, first + i)).collect()
}
