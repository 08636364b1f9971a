use crate::mask::BoundingBox;
use crate::types::Detection;

/// Indices kept by greedy suppression, in descending score order. Equal
/// scores keep input order; a box is dropped when its IoU with an earlier
/// survivor exceeds `iou_threshold`.
pub fn nms_indices(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Greedy NMS over detections ranked by `class_score`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<BoundingBox> = detections.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = detections.iter().map(|d| d.class_score).collect();
    nms_indices(&boxes, &scores, iou_threshold).into_iter().map(|i| detections[i].clone()).collect()
}

/// Multiplies a score by a shape similarity clamped to `[0, 1]`.
pub fn rescore(score: f64, similarity: f64) -> f64 {
    score * similarity.clamp(0.0, 1.0)
}
