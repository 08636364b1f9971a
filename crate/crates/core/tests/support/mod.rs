//! Independent reference implementations and hand-built fixtures shared by
//! the oracle, invariant and acceptance targets.
#![allow(dead_code)]

pub mod criteria;
pub mod props;

use amodal_core::mask::{BoundingBox, Mask};
use amodal_core::types::{Detection, InstanceAnnotation};

/// Plain Lloyd iterations from `init`: assign (ties to the lower index),
/// stop when the assignment repeats, move each non-empty centre to its mean.
/// Returns the objective of the final assignment.
pub fn lloyd_oracle(points: &[Vec<f64>], init: &[Vec<f64>], max_iter: usize) -> f64 {
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut centres = init.to_vec();
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..max_iter {
        let mut assign = Vec::with_capacity(points.len());
        let mut objective = 0.0;
        for p in points {
            let mut best = 0;
            for c in 1..centres.len() {
                if sq(p, &centres[c]) < sq(p, &centres[best]) {
                    best = c;
                }
            }
            objective += sq(p, &centres[best]);
            assign.push(best);
        }
        if prev.as_ref() == Some(&assign) {
            return objective;
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in centre.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
        prev = Some(assign);
    }
    // iteration cap: score the final centres
    points
        .iter()
        .map(|p| centres.iter().map(|c| sq(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

fn pixel_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Single-image, single-category COCO AP by exhaustive search: every
/// detection in score order takes the free GT of highest IoU at or above the
/// threshold; interpolated precision at recall `r` is the maximum precision
/// over all ranks with recall at least `r`, sampled at 101 points.
pub fn ap_oracle(dets: &[(Mask, f64)], gts: &[Mask], thresholds: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap());
    let mut total = 0.0;
    for &t in thresholds {
        let mut free = vec![true; gts.len()];
        let mut points = Vec::new();
        let mut tp = 0usize;
        for (rank, &d) in order.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..gts.len() {
                let iou = pixel_iou(&dets[d].0, &gts[g]);
                if free[g] && iou >= t && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                free[g] = false;
                tp += 1;
            }
            points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
        }
        let mut sum = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            sum += points.iter().filter(|(rc, _)| *rc >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max);
        }
        total += sum / 101.0;
    }
    total / thresholds.len() as f64
}

/// Greedy-NMS survivors characterised without simulating the greedy pass:
/// the unique subset `S` in which a box belongs to `S` exactly when no
/// higher-ranked member of `S` overlaps it above `thr`. Found by trying all
/// subsets.
pub fn nms_oracle(boxes: &[BoundingBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    assert!(n < 16);
    // rank: higher score first, earlier index on ties
    let above = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut found = Vec::new();
    for set in 0u32..(1 << n) {
        let member = |i: usize| set & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && member(j) && above(j, i) && boxes[i].iou(&boxes[j]) > thr);
            member(i) == !blocked
        });
        if consistent {
            found.push(set);
        }
    }
    assert_eq!(found.len(), 1, "greedy survivor set must be unique");
    (0..n).filter(|&i| found[0] & (1 << i) != 0).collect()
}

/// Axis-aligned rectangle mask on an `h × w` canvas.
pub fn rect(h: usize, w: usize, x: usize, y: usize, rw: usize, rh: usize) -> Mask {
    Mask::from_fn(h, w, |r, c| (r >= y && r < y + rh && c >= x && c < x + rw) as u8 as f64)
}

pub fn gt_of(m: &Mask) -> InstanceAnnotation {
    InstanceAnnotation::new(1, m.clone(), m.clone()).unwrap()
}

pub fn det_of(m: &Mask, score: f64) -> Detection {
    Detection {
        bbox: BoundingBox::from_mask(m).unwrap_or(BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 }),
        category_id: 1,
        class_score: score,
        amodal_mask: m.clone(),
        visible_mask: m.clone(),
    }
}

/// Four ground-truth rectangles and six scored predictions on a 32×32
/// canvas: near-exact hits, loose hits straddling several thresholds, a
/// duplicate and a background false positive.
pub fn ap_fixture() -> (Vec<Mask>, Vec<(Mask, f64)>) {
    let (h, w) = (32, 32);
    let gts = vec![
        rect(h, w, 1, 1, 8, 8),
        rect(h, w, 12, 2, 10, 6),
        rect(h, w, 3, 14, 6, 12),
        rect(h, w, 18, 18, 10, 10),
    ];
    let dets = vec![
        (rect(h, w, 1, 1, 8, 8), 0.95),     // exact on GT 0
        (rect(h, w, 12, 2, 10, 5), 0.90),   // IoU 50/60 ≈ 0.83 on GT 1
        (rect(h, w, 24, 0, 6, 6), 0.85),    // background
        (rect(h, w, 2, 2, 8, 8), 0.80),     // duplicate of GT 0 (IoU 49/79)
        (rect(h, w, 3, 15, 6, 12), 0.70),   // IoU 66/78 ≈ 0.85 on GT 2
        (rect(h, w, 19, 19, 10, 10), 0.60), // IoU 81/119 ≈ 0.68 on GT 3
    ];
    (gts, dets)
}

/// Every five-box fixture used by the NMS oracle check: hand-built chains
/// and clusters plus seeded random layouts with distinct scores.
pub fn nms_fixtures() -> Vec<(Vec<BoundingBox>, Vec<f64>)> {
    use rand::{Rng, SeedableRng};
    let b = |x: f64, y: f64, w: f64, h: f64| BoundingBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h };
    let mut out = vec![
        // chain: 0 kills 1, so 2 survives even though 1 would have killed it
        (
            vec![b(0.0, 0.0, 10.0, 10.0), b(3.0, 0.0, 10.0, 10.0), b(6.0, 0.0, 10.0, 10.0), b(9.0, 0.0, 10.0, 10.0), b(12.0, 0.0, 10.0, 10.0)],
            vec![0.9, 0.8, 0.7, 0.6, 0.5],
        ),
        // reversed scores on the same chain
        (
            vec![b(0.0, 0.0, 10.0, 10.0), b(3.0, 0.0, 10.0, 10.0), b(6.0, 0.0, 10.0, 10.0), b(9.0, 0.0, 10.0, 10.0), b(12.0, 0.0, 10.0, 10.0)],
            vec![0.5, 0.6, 0.7, 0.8, 0.9],
        ),
        // disjoint boxes all survive
        (
            vec![b(0.0, 0.0, 4.0, 4.0), b(10.0, 0.0, 4.0, 4.0), b(20.0, 0.0, 4.0, 4.0), b(0.0, 10.0, 4.0, 4.0), b(10.0, 10.0, 4.0, 4.0)],
            vec![0.1, 0.2, 0.3, 0.4, 0.5],
        ),
        // identical boxes: only the best survives
        (vec![b(5.0, 5.0, 8.0, 8.0); 5], vec![0.3, 0.9, 0.5, 0.7, 0.1]),
        // tied scores fall back to input order
        (
            vec![b(0.0, 0.0, 10.0, 10.0), b(1.0, 0.0, 10.0, 10.0), b(30.0, 0.0, 5.0, 5.0), b(31.0, 0.0, 5.0, 5.0), b(60.0, 0.0, 5.0, 5.0)],
            vec![0.5, 0.5, 0.4, 0.4, 0.4],
        ),
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let boxes = (0..5)
            .map(|_| b(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(4.0..14.0), rng.gen_range(4.0..14.0)))
            .collect();
        let mut scores: Vec<f64> = (0..5).map(|i| (i as f64 + 1.0) / 10.0).collect();
        for i in (1..5).rev() {
            scores.swap(i, rng.gen_range(0..=i));
        }
        out.push((boxes, scores));
    }
    out
}
