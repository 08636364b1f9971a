//! Scalar losses returning their value together with the gradient w.r.t.
//! the inputs.

use super::layers::sigmoid;

/// Mean binary cross-entropy over all cells, computed from logits.
///
/// Returns `(loss, d loss / d logits)`.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - y) / n
        })
        .collect();
    (loss / n, grad)
}

/// Mean binary cross-entropy between probabilities and targets, with
/// probabilities clamped away from 0 and 1.
pub fn bce_probs(pred: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(pred.len(), targets.len());
    const EPS: f64 = 1e-12;
    let s: f64 = pred
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / pred.len() as f64
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax cross-entropy for one sample. Returns `(loss, d loss / d logits)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < logits.len(), "label out of range");
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

/// Smooth-L1 summed over coordinates, quadratic below `beta`.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < beta {
                loss += 0.5 * d * d / beta;
                d / beta
            } else {
                loss += d.abs() - 0.5 * beta;
                d.signum()
            }
        })
        .collect();
    (loss, grad)
}

/// `1 − cos(a, b)` over flattened vectors, with gradients for both sides.
///
/// If either vector has zero norm the pair contributes 0 loss and 0
/// gradient.
pub fn cosine_loss(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), b.len());
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
    let da = a.iter().zip(b).map(|(&x, &y)| -(y / (na * nb) - cos * x / (na * na))).collect();
    let db = a.iter().zip(b).map(|(&x, &y)| -(x / (na * nb) - cos * y / (nb * nb))).collect();
    (1.0 - cos, da, db)
}
