//! Synthetic occluded-scene generator with exact amodal and visible ground
//! truth.

mod pairs;
mod scene;
mod templates;

pub use pairs::{make_invariance_pairs, InvariancePair};
pub use scene::{
    composite_layers, composite_scene, generate_scenes, scene_rng, Fill, FillPolicy, Layer, Scene, SceneSpec,
    DROP_OCCLUSION, MAX_RETRIES, MIN_INSTANCE_AREA, PALETTE,
};
pub use templates::{
    default_templates, render_silhouette, render_template, Placement, ShapeTemplate, Silhouette, MAX_CATEGORIES,
};
