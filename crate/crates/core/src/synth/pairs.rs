//! Occluder-swap scene pairs.
//!
//! Both scenes of a pair contain the same target at the back and one
//! occluder on top. The occluders differ in category, colour and texture,
//! but their footprint over the target's silhouette is identical, so the
//! target's visible and amodal ground truth match pixel for pixel.

use rand::Rng;

use super::scene::{composite_layers, sample_fill, sample_placement, scene_rng, Layer, Scene, SceneSpec, PALETTE};
use super::templates::{render_template, Placement, ShapeTemplate};
use crate::error::Result;
use crate::mask::{mask_area, occlusion_rate};

/// Stream offset keeping pair rngs apart from dataset scene rngs.
const PAIR_STREAM_BASE: u64 = 1 << 48;
const OCCLUSION_RANGE: (f64, f64) = (0.2, 0.6);
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct InvariancePair {
    pub first: Scene,
    pub second: Scene,
    /// Index of the target inside both scenes' instance lists.
    pub target_index: usize,
}

pub fn make_invariance_pairs(spec: &SceneSpec, templates: &[ShapeTemplate], n_pairs: usize) -> Result<Vec<InvariancePair>> {
    assert!(n_pairs >= 1, "n_pairs must be at least 1");
    assert!(!templates.is_empty());
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut stream = PAIR_STREAM_BASE;
    while pairs.len() < n_pairs {
        let mut rng = scene_rng(spec.seed, stream);
        stream += 1;
        if let Some(pair) = try_make_pair(spec, templates, pairs.len() as u64, &mut rng)? {
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

fn try_make_pair<R: Rng>(
    spec: &SceneSpec,
    templates: &[ShapeTemplate],
    id: u64,
    rng: &mut R,
) -> Result<Option<InvariancePair>> {
    let canvas = spec.canvas;
    let (h, w) = (canvas.0 as f64, canvas.1 as f64);
    let target_t = &templates[rng.gen_range(0..templates.len())];
    let mut target_p = sample_placement(target_t, canvas, rng);
    // keep the target whole and central so both scenes hold all of it
    target_p.position = (rng.gen_range(0.4 * w..=0.6 * w), rng.gen_range(0.4 * h..=0.6 * h));
    let target = render_template(target_t, target_p, canvas)?;
    let target_fill = sample_fill(&spec.fill, rng);
    let background_seed: u64 = rng.gen();

    for _ in 0..MAX_ATTEMPTS {
        let a_idx = rng.gen_range(0..templates.len());
        let b_idx = if templates.len() > 1 {
            (a_idx + rng.gen_range(1..templates.len())) % templates.len()
        } else {
            a_idx
        };
        let (ta, tb) = (&templates[a_idx], &templates[b_idx]);
        let scale = rng.gen_range(ta.scale_range.0..=ta.scale_range.1);
        let rotation = rng.gen_range(ta.rotation_range.0..=ta.rotation_range.1);
        let (cx, cy) = target_p.position;
        let reach = 0.9 * target_p.scale * target_t.silhouette.extent();
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let p = Placement { scale, rotation, position: (cx + reach * angle.cos(), cy + reach * angle.sin()) };
        let Ok(occ_a) = render_template(ta, p, canvas) else { continue };
        let Ok(raw_b) = render_template(tb, p, canvas) else { continue };

        let footprint = occ_a.intersect(&target)?;
        let visible = target.subtract(&footprint)?;
        let rate = occlusion_rate(&visible, &target)?;
        if !(OCCLUSION_RANGE.0..=OCCLUSION_RANGE.1).contains(&rate) {
            continue;
        }
        let occ_b = raw_b.subtract(&target)?.union(&footprint)?;
        if mask_area(&occ_b) < 1.0 {
            continue;
        }

        let fill_a = sample_fill(&spec.fill, rng);
        let mut fill_b = sample_fill(&spec.fill, rng);
        if fill_b.color == fill_a.color {
            let i = PALETTE.iter().position(|c| *c == fill_a.color).unwrap_or(0);
            fill_b.color = PALETTE[(i + 1) % PALETTE.len()];
        }
        let target_layer = Layer { category_id: target_t.category_id, amodal: target.clone(), fill: target_fill };
        let first = composite_layers(
            2 * id,
            canvas,
            &spec.fill,
            background_seed,
            vec![target_layer.clone(), Layer { category_id: ta.category_id, amodal: occ_a, fill: fill_a }],
        )?;
        let second = composite_layers(
            2 * id + 1,
            canvas,
            &spec.fill,
            background_seed,
            vec![target_layer, Layer { category_id: tb.category_id, amodal: occ_b, fill: fill_b }],
        )?;
        if first.instances.len() != 2 || second.instances.len() != 2 {
            continue;
        }
        return Ok(Some(InvariancePair { first, second, target_index: 0 }));
    }
    Ok(None)
}
