//! Parametric category silhouettes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::types::CategoryId;

/// Silhouette in unit template coordinates; a placement scales it by a
/// pixel size, rotates it and moves it onto the canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Silhouette {
    Ellipse { semi_major: f64, semi_minor: f64 },
    /// Segment `[-half_length, half_length]` on the x axis, swept by a disc.
    Capsule { half_length: f64, radius: f64 },
    Star { points: usize, outer: f64, inner: f64 },
    /// Vertical bar plus a foot to the right at the bottom.
    LShape { height: f64, bar_width: f64, foot_length: f64, foot_height: f64 },
    RoundedRect { half_width: f64, half_height: f64, corner: f64 },
}

impl Silhouette {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Silhouette::Ellipse { semi_major, semi_minor } => {
                (u / semi_major).powi(2) + (v / semi_minor).powi(2) <= 1.0
            }
            Silhouette::Capsule { half_length, radius } => {
                let cu = u.clamp(-half_length, half_length);
                (u - cu).powi(2) + v * v <= radius * radius
            }
            Silhouette::Star { points, outer, inner } => point_in_polygon(&star_vertices(points, outer, inner), u, v),
            Silhouette::LShape { height, bar_width, foot_length, foot_height } => {
                let x0 = -0.5 * foot_length;
                let (y0, y1) = (-0.5 * height, 0.5 * height);
                let in_bar = u >= x0 && u <= x0 + bar_width && v >= y0 && v <= y1;
                let in_foot = u >= x0 && u <= x0 + foot_length && v >= y1 - foot_height && v <= y1;
                in_bar || in_foot
            }
            Silhouette::RoundedRect { half_width, half_height, corner } => {
                let (du, dv) = (u.abs() - (half_width - corner), v.abs() - (half_height - corner));
                if u.abs() > half_width || v.abs() > half_height {
                    false
                } else if du > 0.0 && dv > 0.0 {
                    du * du + dv * dv <= corner * corner
                } else {
                    true
                }
            }
        }
    }

    /// Radius of a disc centred at the origin that contains the shape.
    pub fn extent(&self) -> f64 {
        match *self {
            Silhouette::Ellipse { semi_major, semi_minor } => semi_major.max(semi_minor),
            Silhouette::Capsule { half_length, radius } => half_length + radius,
            Silhouette::Star { outer, .. } => outer,
            Silhouette::LShape { height, foot_length, .. } => (0.5 * height).hypot(0.5 * foot_length),
            Silhouette::RoundedRect { half_width, half_height, .. } => half_width.hypot(half_height),
        }
    }

    /// Area in unit coordinates, where a closed form exists.
    pub fn analytic_area(&self) -> Option<f64> {
        match *self {
            Silhouette::Ellipse { semi_major, semi_minor } => Some(PI * semi_major * semi_minor),
            Silhouette::Capsule { half_length, radius } => Some(4.0 * half_length * radius + PI * radius * radius),
            Silhouette::LShape { height, bar_width, foot_length, foot_height } => {
                Some(height * bar_width + (foot_length - bar_width) * foot_height)
            }
            Silhouette::RoundedRect { half_width, half_height, corner } => {
                Some(4.0 * half_width * half_height - (4.0 - PI) * corner * corner)
            }
            Silhouette::Star { .. } => None,
        }
    }
}

fn star_vertices(points: usize, outer: f64, inner: f64) -> Vec<(f64, f64)> {
    (0..2 * points)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let a = -PI / 2.0 + i as f64 * PI / points as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTemplate {
    pub category_id: CategoryId,
    pub name: String,
    pub silhouette: Silhouette,
    /// Pixel size of one template unit, sampled uniformly.
    pub scale_range: (f64, f64),
    /// Rotation in radians, sampled uniformly.
    pub rotation_range: (f64, f64),
}

/// Where and how large one silhouette is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub scale: f64,
    pub rotation: f64,
    /// Centre in continuous image coordinates `(x, y)`.
    pub position: (f64, f64),
}

/// Rasterizes the full silhouette on an `canvas.0 × canvas.1` (H × W)
/// canvas by testing every pixel centre.
pub fn render_template(t: &ShapeTemplate, placement: Placement, canvas: (usize, usize)) -> Result<Mask> {
    render_silhouette(&t.silhouette, placement, canvas)
}

pub fn render_silhouette(s: &Silhouette, placement: Placement, canvas: (usize, usize)) -> Result<Mask> {
    let Placement { scale, rotation, position: (cx, cy) } = placement;
    if !(scale > 0.0) {
        return Err(Error::Placement(format!("scale {scale} must be positive")));
    }
    let (h, w) = canvas;
    let (sin, cos) = rotation.sin_cos();
    let reach = s.extent() * scale + 1.0;
    let y_lo = ((cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((cy + reach).ceil().min(h as f64)).max(0.0) as usize;
    let x_lo = ((cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((cx + reach).ceil().min(w as f64)).max(0.0) as usize;
    let mut m = Mask::zeros(h, w);
    let mut any = false;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / scale, (y as f64 + 0.5 - cy) / scale);
            // inverse rotation into template coordinates
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if s.contains(u, v) {
                m.set(y, x, 1.0);
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::Placement(format!("shape at ({cx:.1}, {cy:.1}) lies entirely off the {h}x{w} canvas")));
    }
    Ok(largest_component(&m))
}

/// The largest 4-connected component of `m` (earliest in raster order on
/// ties). Thin tips can rasterize as detached pixels at some rotations.
fn largest_component(m: &Mask) -> Mask {
    let (h, w) = m.resolution();
    let mut label = vec![0usize; h * w];
    let (mut best, mut best_size, mut next) = (0, 0, 0);
    for start in 0..h * w {
        if label[start] != 0 || m.data()[start] < 0.5 {
            continue;
        }
        next += 1;
        label[start] = next;
        let mut stack = vec![start];
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let near = [
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
            ];
            for q in near.into_iter().flatten() {
                if label[q] == 0 && m.data()[q] >= 0.5 {
                    label[q] = next;
                    stack.push(q);
                }
            }
        }
        if size > best_size {
            (best, best_size) = (next, size);
        }
    }
    Mask::from_fn(h, w, |y, x| (label[y * w + x] == best) as u8 as f64)
}

/// The built-in category set; `count` picks the first `count` entries.
pub fn default_templates(count: usize) -> Vec<ShapeTemplate> {
    let rot = |deg: f64| (-deg.to_radians(), deg.to_radians());
    let all = [
        ("ellipse", Silhouette::Ellipse { semi_major: 1.0, semi_minor: 0.55 }, rot(45.0)),
        ("star", Silhouette::Star { points: 5, outer: 1.0, inner: 0.55 }, rot(36.0)),
        (
            "l_shape",
            Silhouette::LShape { height: 1.7, bar_width: 0.55, foot_length: 1.4, foot_height: 0.55 },
            rot(30.0),
        ),
        ("capsule", Silhouette::Capsule { half_length: 0.7, radius: 0.3 }, rot(45.0)),
        ("rounded_rect", Silhouette::RoundedRect { half_width: 1.0, half_height: 0.6, corner: 0.25 }, rot(30.0)),
    ];
    assert!(count >= 1 && count <= all.len(), "between 1 and {} categories are available", all.len());
    all.into_iter()
        .take(count)
        .enumerate()
        .map(|(i, (name, silhouette, rotation_range))| ShapeTemplate {
            category_id: i as CategoryId + 1,
            name: name.to_string(),
            silhouette,
            scale_range: (10.0, 15.0),
            rotation_range,
        })
        .collect()
}

pub const MAX_CATEGORIES: usize = 5;
