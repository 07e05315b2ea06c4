use super::kmeans::{kmeans_assign, kmeans_fit, Centroids};
use super::Router;
use crate::error::{Error, Result};

/// Independent centroid sets for the two halves of a feature vector.
/// The pair `(i, j)` addresses a two-level path tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductCentroids {
    pub first: Centroids,
    pub second: Centroids,
}

pub fn pair_id(i: usize, j: usize, k2: usize) -> usize {
    i * k2 + j
}

pub fn split_pair_id(id: usize, k2: usize) -> (usize, usize) {
    (id / k2, id % k2)
}

fn halves(z: &[f64]) -> Result<(&[f64], &[f64])> {
    if !z.len().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "product k-means needs an even dimension, got {}",
            z.len()
        )));
    }
    Ok(z.split_at(z.len() / 2))
}

pub fn product_kmeans_fit(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<ProductCentroids> {
    let mut a = Vec::with_capacity(points.len());
    let mut b = Vec::with_capacity(points.len());
    for p in points {
        let (x, y) = halves(p)?;
        a.push(x.to_vec());
        b.push(y.to_vec());
    }
    let first = kmeans_fit(&a, k, iters, seed)?.centroids;
    let second = kmeans_fit(&b, k, iters, seed.wrapping_add(1))?.centroids;
    Ok(ProductCentroids { first, second })
}

/// Per-half nearest centroids.
pub fn product_kmeans_assign(z: &[f64], c: &ProductCentroids) -> Result<(usize, usize)> {
    let (x, y) = halves(z)?;
    Ok((kmeans_assign(x, &c.first), kmeans_assign(y, &c.second)))
}

impl Router for ProductCentroids {
    fn num_paths(&self) -> usize {
        self.first.k() * self.second.k()
    }

    /// Score of pair `(i, j)` is minus the summed half distances, so the
    /// best pair is the pair of independent per-half winners.
    fn scores(&self, z: &[f64]) -> Vec<f64> {
        let h = z.len() / 2;
        let s1 = self.first.scores(&z[..h]);
        let s2 = self.second.scores(&z[h..]);
        s1.iter()
            .flat_map(|a| s2.iter().map(move |b| a + b))
            .collect()
    }

    fn route(&self, z: &[f64]) -> usize {
        let h = z.len() / 2;
        pair_id(
            kmeans_assign(&z[..h], &self.first),
            kmeans_assign(&z[h..], &self.second),
            self.second.k(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_ids_biject() {
        let k = 4;
        let mut seen = vec![false; k * k];
        for i in 0..k {
            for j in 0..k {
                let id = pair_id(i, j, k);
                assert_eq!(split_pair_id(id, k), (i, j));
                seen[id] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn symmetric_input_gives_equal_halves() {
        let c = Centroids {
            centers: vec![vec![0.0, 1.0], vec![3.0, -1.0], vec![1.0, 1.0]],
        };
        let pc = ProductCentroids {
            first: c.clone(),
            second: c,
        };
        for z in [[0.2, 0.9], [2.0, -2.0], [1.1, 0.7]] {
            let full = [z[0], z[1], z[0], z[1]];
            let (i, j) = product_kmeans_assign(&full, &pc).unwrap();
            assert_eq!(i, j);
            assert_eq!(pc.route(&full), pair_id(i, j, 3));
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(product_kmeans_fit(&[vec![1.0, 2.0, 3.0]], 1, 3, 0).is_err());
    }
}
