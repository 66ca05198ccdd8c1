use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Rng};

/// Result of 1-d k-means.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Ascending centroids.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl KMeans {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }
}

/// Nearest centroid in an ascending list; equidistant picks the lower one.
fn nearest(centroids: &[f64], x: f64) -> usize {
    let hi = centroids.partition_point(|&c| c < x);
    if hi == 0 {
        return 0;
    }
    if hi == centroids.len() {
        return hi - 1;
    }
    if x - centroids[hi - 1] <= centroids[hi] - x {
        hi - 1
    } else {
        hi
    }
}

fn assign(values: &[f64], centroids: &[f64], assignment: &mut [usize]) -> f64 {
    let mut obj = 0.0;
    for (a, &x) in assignment.iter_mut().zip(values) {
        *a = nearest(centroids, x);
        let d = x - centroids[*a];
        obj += d * d;
    }
    obj
}

/// k-means++ seeding: first centre uniform, then proportional to the squared
/// distance to the nearest chosen centre.
fn seed(values: &[f64], k: usize, rng: &mut Rng) -> Vec<f64> {
    let mut centres = vec![values[rng.below(values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|x| (x - centres[0]) * (x - centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.uniform() * total;
        let mut pick = values.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = values[pick];
        centres.push(c);
        for (d, x) in d2.iter_mut().zip(values) {
            *d = d.min((x - c) * (x - c));
        }
    }
    centres.sort_by(f64::total_cmp);
    centres
}

/// Lloyd's algorithm on scalars with `k` clusters, stopped at an
/// assignment fixpoint or after `max_iters` updates. When there are at most
/// `k` distinct values the codebook is exactly those values.
pub fn kmeans_1d(values: &[f64], k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeans> {
    if values.is_empty() {
        return Err(Error::contract("k-means needs at least one value"));
    }
    if k == 0 {
        return Err(Error::contract("k-means needs at least one cluster"));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite weight in k-means input"));
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut centroids = if distinct.len() <= k { distinct } else { seed(values, k, rng) };
    let mut assignment = vec![0; values.len()];
    let mut trace = vec![assign(values, &centroids, &mut assignment)];
    for _ in 0..max_iters {
        let mut sums = vec![0.0; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&a, &x) in assignment.iter().zip(values) {
            sums[a] += x;
            counts[a] += 1;
        }
        for ((c, s), n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if *n > 0 {
                *c = s / *n as f64;
            }
        }
        centroids.sort_by(f64::total_cmp);
        let before = assignment.clone();
        trace.push(assign(values, &centroids, &mut assignment));
        if assignment == before {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        objective_trace: trace,
    })
}
