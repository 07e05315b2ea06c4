//! Named parameter collections: the unit of checkpointing, slicing and averaging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Iteration order is the
/// lexicographic order of names, which is the canonical order used for
/// every reduction and serialization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamTree {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Incongruent(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_congruent(&self, other: &ParamTree) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn check_congruent(&self, other: &ParamTree, what: &str) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Incongruent(what.to_string()))
        }
    }

    pub fn zeros_like(&self) -> ParamTree {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> ParamTree {
        ParamTree {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), f(v)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// `self += alpha * other`; trees must be congruent.
    pub fn axpy(&mut self, alpha: f64, other: &ParamTree) -> Result<()> {
        self.check_congruent(other, "axpy")?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.axpy(alpha, b);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.values_mut().for_each(|t| t.scale(s));
    }

    pub fn sub(&self, other: &ParamTree) -> Result<ParamTree> {
        self.check_congruent(other, "sub")?;
        Ok(ParamTree {
            tensors: self
                .tensors
                .iter()
                .zip(other.tensors.values())
                .map(|((k, a), b)| (k.clone(), a.sub(b)))
                .collect(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .values()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamTree) -> f64 {
        self.tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Exact equality including the sign of zero.
    pub fn bit_eq(&self, other: &ParamTree) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// The sub-tree holding exactly `names`.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<ParamTree> {
        let mut out = ParamTree::new();
        for name in names {
            out.insert(name, self.require(name)?.clone());
        }
        Ok(out)
    }

    /// Union of disjoint trees.
    pub fn merge(&mut self, other: ParamTree) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::Duplicate(format!("parameter {k} in merge")));
            }
            self.tensors.insert(k, v);
        }
        Ok(())
    }

    /// Prefix every name, e.g. to pack several trees into one checkpoint.
    pub fn prefixed(&self, prefix: &str) -> ParamTree {
        ParamTree {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Inverse of [`ParamTree::prefixed`]: names starting with `prefix`, stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamTree {
        ParamTree {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamTree {
            tensors: iter.into_iter().collect(),
        }
    }
}
