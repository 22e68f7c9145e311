use ndarray::Array2;
use rand::Rng;

use super::{check_features, sq_dist, with_canonical_rows, Algorithm, SubgroupAssignment};
use crate::error::Result;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Lloyd iterations stop once no centroid moves further than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Labels plus the objective after every Lloyd assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub assignment: SubgroupAssignment,
    pub lloyd_objectives: Vec<f64>,
}

pub fn kmeans(x: &Array2<f64>, g: usize, seed: u64) -> Result<SubgroupAssignment> {
    Ok(kmeans_with(x, g, seed, &KMeansOptions::default())?.assignment)
}

/// k-means++ seeding, Lloyd iterations, then single-point transfers until
/// no move lowers the within-cluster sum of squares.
pub fn kmeans_with(
    x: &Array2<f64>,
    g: usize,
    seed: u64,
    options: &KMeansOptions,
) -> Result<KMeansRun> {
    check_features(x, g)?;
    let mut trace = Vec::new();
    let (labels, objective) = with_canonical_rows(x, |rows| {
        let (labels, obj, t) = run(rows, g, seed, options);
        trace = t;
        Ok((labels, Some(obj)))
    })?;
    Ok(KMeansRun {
        assignment: SubgroupAssignment {
            algorithm: Algorithm::KMeans,
            g,
            labels,
            objective,
        },
        lloyd_objectives: trace,
    })
}

fn rows_of(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn plus_plus(points: &[Vec<f64>], g: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < g {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            crate::dist::categorical(&d2, &mut rng)
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn centroids(points: &[Vec<f64>], labels: &[usize], g: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; g];
    let mut sizes = vec![0; g];
    for (p, &l) in points.iter().zip(labels) {
        sizes[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for (s, &n) in sums.iter_mut().zip(&sizes) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, sizes)
}

fn objective(points: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum()
}

/// Give each empty cluster the point farthest from its centroid in the
/// currently largest cluster.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], g: usize) {
    loop {
        let (centers, sizes) = centroids(points, labels, g);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..g)
            .max_by_key(|&c| (sizes[c], std::cmp::Reverse(c)))
            .unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let far = (0..points.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                sq_dist(&points[a], &centers[largest])
                    .total_cmp(&sq_dist(&points[b], &centers[largest]))
                    .then(b.cmp(&a))
            })
            .unwrap();
        labels[far] = empty;
    }
}

fn run(
    x: &Array2<f64>,
    g: usize,
    seed: u64,
    options: &KMeansOptions,
) -> (Vec<usize>, f64, Vec<f64>) {
    let points = rows_of(x);
    let mut centers = plus_plus(&points, g, seed);
    let mut labels = vec![0; points.len()];
    let mut trace = Vec::new();
    for _ in 0..options.max_iter {
        for (l, p) in labels.iter_mut().zip(&points) {
            *l = nearest(p, &centers).0;
        }
        trace.push(objective(&points, &labels, &centers));
        repair_empty(&points, &mut labels, g);
        let (next, _) = centroids(&points, &labels, g);
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < options.tol {
            break;
        }
    }
    for (l, p) in labels.iter_mut().zip(&points) {
        *l = nearest(p, &centers).0;
    }
    repair_empty(&points, &mut labels, g);
    hartigan_refine(&points, &mut labels, g);
    let (centers, _) = centroids(&points, &labels, g);
    let obj = objective(&points, &labels, &centers);
    (labels, obj, trace)
}

/// Move single points while the exact change in the objective is negative.
fn hartigan_refine(points: &[Vec<f64>], labels: &mut [usize], g: usize) {
    let (mut centers, mut sizes) = centroids(points, labels, g);
    let mut moved = true;
    let mut passes = 0;
    while moved && passes < 1000 {
        moved = false;
        passes += 1;
        for i in 0..points.len() {
            let a = labels[i];
            if sizes[a] < 2 {
                continue;
            }
            let na = sizes[a] as f64;
            let loss = na / (na - 1.0) * sq_dist(&points[i], &centers[a]);
            let mut best = (a, 0.0);
            for b in 0..g {
                if b == a {
                    continue;
                }
                let nb = sizes[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(&points[i], &centers[b]) - loss;
                if delta < best.1 - 1e-12 {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b != a {
                let nb = sizes[b] as f64;
                for (d, &v) in points[i].iter().enumerate() {
                    centers[a][d] = (centers[a][d] * na - v) / (na - 1.0);
                    centers[b][d] = (centers[b][d] * nb + v) / (nb + 1.0);
                }
                sizes[a] -= 1;
                sizes[b] += 1;
                labels[i] = b;
                moved = true;
            }
        }
    }
}
