//! Coarse document routing: prefix features, generative routers (k-means,
//! product k-means), the discriminative linear router and sharding.

mod alternate;
mod discriminative;
mod features;
mod kmeans;
mod product;
mod scoring;
mod shard;

pub use alternate::{
    alternate_discriminative, AlternationOutcome, DiscriminativeResharder, Resharder,
};
pub use discriminative::{
    argmax_labels, calibrate_bias, fit_discriminative, fit_logistic, hard_marginal,
    CalibrationConfig, CalibrationReport, DiscriminativeConfig, DiscriminativeFit, LinearRouter,
    LogRegConfig, TargetDist,
};
pub use features::{extract_prefix_feature, prefix_features};
pub use kmeans::{kmeans_assign, kmeans_fit, kmeans_objective, sq_dist, Centroids, KMeansFit};
pub use product::{
    pair_id, product_kmeans_assign, product_kmeans_fit, split_pair_id, ProductCentroids,
};
pub use scoring::{score_paths, ScoreMatrix};
pub use shard::{
    read_shard_set, shard_dataset, split_router_data, write_shard_set, Shard, ShardConfig,
    ShardSet, Split,
};

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

/// Maps a feature vector to path scores; higher is better.
pub trait Router: Send + Sync {
    fn num_paths(&self) -> usize;

    fn scores(&self, z: &[f64]) -> Vec<f64>;

    fn route(&self, z: &[f64]) -> usize {
        argmax(&self.scores(z))
    }

    /// The `n` best paths, best first; ties go to the lower index.
    fn top_n(&self, z: &[f64], n: usize) -> Vec<usize> {
        if n == 1 {
            return vec![self.route(z)];
        }
        top_n_by_score(&self.scores(z), n)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest value, lowest index on ties.
pub fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

pub fn top_n_by_score(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(n.min(scores.len()));
    idx
}

/// A serializable router of any supported kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyRouter {
    KMeans(Centroids),
    Product(ProductCentroids),
    Linear(LinearRouter),
}

impl Router for AnyRouter {
    fn num_paths(&self) -> usize {
        match self {
            AnyRouter::KMeans(c) => c.num_paths(),
            AnyRouter::Product(c) => c.num_paths(),
            AnyRouter::Linear(r) => r.num_paths(),
        }
    }

    fn scores(&self, z: &[f64]) -> Vec<f64> {
        match self {
            AnyRouter::KMeans(c) => c.scores(z),
            AnyRouter::Product(c) => c.scores(z),
            AnyRouter::Linear(r) => r.scores(z),
        }
    }

    fn route(&self, z: &[f64]) -> usize {
        match self {
            AnyRouter::KMeans(c) => c.route(z),
            AnyRouter::Product(c) => c.route(z),
            AnyRouter::Linear(r) => r.route(z),
        }
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![rows.len(), cols], rows.concat())
}

fn unmatrix(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

impl AnyRouter {
    /// Packs the router into named tensors for the checkpoint store.
    pub fn to_params(&self) -> Result<ParamTree> {
        let mut p = ParamTree::new();
        match self {
            AnyRouter::KMeans(c) => {
                p.insert("kmeans.centroids", matrix(&c.centers)?);
            }
            AnyRouter::Product(c) => {
                p.insert("product.first", matrix(&c.first.centers)?);
                p.insert("product.second", matrix(&c.second.centers)?);
            }
            AnyRouter::Linear(r) => {
                p.insert("linear.weight", r.weight.clone());
                p.insert(
                    "linear.bias",
                    Tensor::new(vec![r.bias.len()], r.bias.clone())?,
                );
            }
        }
        Ok(p)
    }

    pub fn from_params(p: &ParamTree) -> Result<Self> {
        if let Some(c) = p.get("kmeans.centroids") {
            return Ok(AnyRouter::KMeans(Centroids {
                centers: unmatrix(c),
            }));
        }
        if let (Some(a), Some(b)) = (p.get("product.first"), p.get("product.second")) {
            return Ok(AnyRouter::Product(ProductCentroids {
                first: Centroids {
                    centers: unmatrix(a),
                },
                second: Centroids {
                    centers: unmatrix(b),
                },
            }));
        }
        if let (Some(w), Some(b)) = (p.get("linear.weight"), p.get("linear.bias")) {
            return Ok(AnyRouter::Linear(LinearRouter {
                weight: w.clone(),
                bias: b.data().to_vec(),
            }));
        }
        Err(Error::Parse("checkpoint does not hold a router".into()))
    }
}
