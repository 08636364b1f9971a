//! Lloyd's K-Means with k-means++ seeding.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum KMeansInit {
    PlusPlus { seed: u64 },
    Given(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Assignment steps performed.
    pub iterations: usize,
    /// Reached an assignment fixpoint before the iteration cap.
    pub converged: bool,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one assignment step")
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| squared_distance(p, &centroids[a])).sum()
}

/// k-means++: first centre uniform, then each next centre drawn with
/// probability proportional to squared distance to the nearest chosen one.
pub fn kmeans_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point coincides with a chosen centre
            Err(_) => rng.gen_range(0..points.len()),
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd iterations until the assignment repeats or `max_iter` assignment
/// steps have run. An empty cluster keeps its previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, init: KMeansInit, max_iter: usize) -> Result<KMeansResult> {
    if points.is_empty() || k == 0 || k > points.len() {
        return Err(Error::Build(format!("cannot form {k} clusters from {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Build("points differ in dimension".into()));
    }
    let mut centroids = match init {
        KMeansInit::PlusPlus { seed } => kmeans_plus_plus(points, k, &mut ChaCha8Rng::seed_from_u64(seed)),
        KMeansInit::Given(c) => {
            if c.len() != k || c.iter().any(|v| v.len() != dim) {
                return Err(Error::Build("initial centroids do not match k and dimension".into()));
            }
            c
        }
    };
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        history.push(objective(points, &centroids, &next));
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    if !converged {
        // report the objective for the final centroids
        assignments = points.iter().map(|p| nearest(p, &centroids).0).collect();
        history.push(objective(points, &centroids, &assignments));
    }
    Ok(KMeansResult { iterations: history.len(), centroids, assignments, converged, objective_history: history })
}
