//! Lloyd's k-means with farthest-point seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tolerance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k` rows, each the mean of its assigned points.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after every iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cluster `points` into `params.k` groups. `k` must not exceed the point
/// count; every returned cluster is nonempty.
pub fn kmeans(points: &[Vec<f64>], params: &KMeansParams) -> Result<KMeansResult> {
    let n = points.len();
    let k = params.k;
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("k-means with k={k} on {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points of different dimension".into()));
    }

    let mut centroids = seed_centroids(points, k, params.seed);
    let mut assignment = vec![0; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..params.max_iters.max(1) {
        iterations += 1;
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest(&centroids, p);
        }
        repair_empty(points, &mut assignment, &centroids, k);
        let updated = means(points, &assignment, k, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        inertia.push(sse(points, &assignment, &centroids));
        if shift < params.tolerance {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        inertia,
        iterations,
    })
}

/// First centre drawn from the seeded RNG, each further centre the point
/// farthest from all chosen so far (lowest index on ties).
fn seed_centroids(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let mut chosen = vec![points[first].clone()];
    let mut best: Vec<f64> = points.iter().map(|p| sq_dist(p, &chosen[0])).collect();
    while chosen.len() < k {
        let mut far = 0;
        for (i, &d) in best.iter().enumerate() {
            if d > best[far] {
                far = i;
            }
        }
        chosen.push(points[far].clone());
        let c = chosen.last().unwrap();
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(sq_dist(p, c));
        }
    }
    chosen
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Give every empty cluster the point farthest from its centroid, taken
/// from a cluster that can spare one.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        assignment.iter().for_each(|&a| sizes[a] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let mut pick = None;
        let mut pick_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a]);
            if d > pick_d {
                pick_d = d;
                pick = Some(i);
            }
        }
        // n >= k guarantees a donor exists
        assignment[pick.expect("donor cluster")] = empty;
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for (s, c) in sums.iter_mut().zip(counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    sums
}

pub fn sse(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}
