use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{argmin, Router};
use crate::error::{Error, Result};

/// Prototype vectors; routing picks the nearest one.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub centers: Vec<Vec<f64>>,
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }
}

impl Router for Centroids {
    fn num_paths(&self) -> usize {
        self.k()
    }

    fn scores(&self, z: &[f64]) -> Vec<f64> {
        self.centers.iter().map(|c| -sq_dist(z, c)).collect()
    }

    fn route(&self, z: &[f64]) -> usize {
        kmeans_assign(z, self)
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
pub fn kmeans_assign(z: &[f64], c: &Centroids) -> usize {
    let d: Vec<f64> = c.centers.iter().map(|ci| sq_dist(z, ci)).collect();
    argmin(&d)
}

/// Sum of squared distances from each point to its nearest centroid.
pub fn kmeans_objective(points: &[Vec<f64>], c: &Centroids) -> f64 {
    points
        .iter()
        .map(|p| sq_dist(p, &c.centers[kmeans_assign(p, c)]))
        .sum()
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Centroids,
    /// Objective after each assignment step.
    pub objective_trace: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn validate(points: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::Config(format!(
            "k-means needs at least {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means points".into()));
    }
    Ok(dim)
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn assign_all(points: &[Vec<f64>], c: &Centroids) -> (Vec<usize>, f64) {
    let mut obj = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let i = kmeans_assign(p, c);
            obj += sq_dist(p, &c.centers[i]);
            i
        })
        .collect();
    (a, obj)
}

fn recompute_means(
    points: &[Vec<f64>],
    assign: &[usize],
    k: usize,
    dim: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    (sums, counts)
}

/// Lloyd's algorithm from a k-means++ start. An empty cluster is reseeded
/// at the point farthest from its current centroid, taken from a cluster
/// with at least two members.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let dim = validate(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Centroids {
        centers: plus_plus_init(points, k, &mut rng),
    };
    let (mut assign, obj) = assign_all(points, &c);
    let mut trace = vec![obj];
    let mut iterations = 0;
    for _ in 0..iters.max(1) {
        iterations += 1;
        let (means, mut counts) = recompute_means(points, &assign, k, dim);
        for (ci, (m, &n)) in c.centers.iter_mut().zip(means.into_iter().zip(&counts)) {
            if n > 0 {
                *ci = m;
            }
        }
        let mut repaired = false;
        while let Some(empty) = counts.iter().position(|&n| n == 0) {
            let far = (0..points.len())
                .filter(|&i| counts[assign[i]] > 1)
                .map(|i| (i, sq_dist(&points[i], &c.centers[assign[i]])))
                .filter(|&(_, d)| d > 0.0)
                .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            let Some((i, _)) = far else { break };
            counts[assign[i]] -= 1;
            assign[i] = empty;
            counts[empty] = 1;
            c.centers[empty] = points[i].clone();
            repaired = true;
        }
        if repaired {
            let (means, counts) = recompute_means(points, &assign, k, dim);
            for (ci, (m, &n)) in c.centers.iter_mut().zip(means.into_iter().zip(&counts)) {
                if n > 0 {
                    *ci = m;
                }
            }
        }
        let (next, obj) = assign_all(points, &c);
        trace.push(obj);
        let changed = next != assign;
        assign = next;
        if !changed && !repaired {
            break;
        }
    }
    Ok(KMeansFit {
        centroids: c,
        objective_trace: trace,
        assignments: assign,
        iterations,
    })
}
