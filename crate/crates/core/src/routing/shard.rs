use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Router;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Router,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Router => "router",
        }
    }
}

/// Documents routed to one shard, trained by the worker for `path`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Shard {
    pub path: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardSet {
    pub num_docs: usize,
    pub overlap: usize,
    pub shards: Vec<Shard>,
    /// Held out for scoring paths and fitting routers only.
    pub router_docs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShardConfig {
    pub overlap: usize,
    pub router_data_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for ShardConfig {
    fn default() -> Self {
        ShardConfig {
            overlap: 1,
            router_data_frac: 0.005,
            val_frac: 0.05,
            seed: 0,
        }
    }
}

fn frac_count(n: usize, frac: f64) -> usize {
    if frac <= 0.0 {
        0
    } else {
        ((n as f64 * frac).round() as usize).clamp(1, n)
    }
}

/// Seeded split of `0..n_docs` into router data and the rest, both sorted.
pub fn split_router_data(n_docs: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_router = frac_count(n_docs, frac);
    let mut router = order[..n_router].to_vec();
    let mut rest = order[n_router..].to_vec();
    router.sort_unstable();
    rest.sort_unstable();
    (router, rest)
}

/// Router split, then a seeded validation split of the remaining
/// documents. Returns (router, train, val) document lists.
fn three_way(n_docs: usize, cfg: &ShardConfig) -> Result<(Vec<usize>, Vec<usize>, Vec<bool>)> {
    if !(0.0..1.0).contains(&cfg.router_data_frac) || !(0.0..1.0).contains(&cfg.val_frac) {
        return Err(Error::Config("data fractions must lie in [0, 1)".into()));
    }
    let (router, rest) = split_router_data(n_docs, cfg.router_data_frac, cfg.seed);
    let mut order = rest.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1));
    let mut is_val = vec![false; n_docs];
    for &d in &order[..frac_count(order.len(), cfg.val_frac).min(order.len().saturating_sub(1))] {
        is_val[d] = true;
    }
    Ok((router, rest, is_val))
}

/// Routes every non-router document to its top-`overlap` paths. Shard `p`
/// feeds path `p`; `features[d]` is the prefix feature of document `d`.
pub fn shard_dataset(
    router: &(impl Router + ?Sized),
    features: &[Vec<f64>],
    cfg: &ShardConfig,
) -> Result<ShardSet> {
    let p = router.num_paths();
    if cfg.overlap == 0 || cfg.overlap > p {
        return Err(Error::Config(format!(
            "overlap {} with {p} paths",
            cfg.overlap
        )));
    }
    let (router_docs, rest, is_val) = three_way(features.len(), cfg)?;
    let mut shards: Vec<Shard> = (0..p)
        .map(|path| Shard {
            path,
            ..Shard::default()
        })
        .collect();
    for d in rest {
        for s in router.top_n(&features[d], cfg.overlap) {
            if is_val[d] {
                shards[s].val.push(d);
            } else {
                shards[s].train.push(d);
            }
        }
    }
    Ok(ShardSet {
        num_docs: features.len(),
        overlap: cfg.overlap,
        shards,
        router_docs,
    })
}

impl ShardSet {
    /// Round-robin over a seeded permutation into `k` shards, all of which
    /// feed path `path`. Used for replica data parallelism.
    pub fn iid(num_docs: usize, k: usize, path: usize, cfg: &ShardConfig) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("need at least one shard".into()));
        }
        let (router_docs, rest, is_val) = three_way(num_docs, cfg)?;
        let mut order = rest;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17)));
        let mut shards: Vec<Shard> = (0..k)
            .map(|_| Shard {
                path,
                ..Shard::default()
            })
            .collect();
        for (i, d) in order.into_iter().enumerate() {
            let s = &mut shards[i % k];
            if is_val[d] {
                s.val.push(d);
            } else {
                s.train.push(d);
            }
        }
        for s in &mut shards {
            s.train.sort_unstable();
            s.val.sort_unstable();
        }
        Ok(ShardSet {
            num_docs,
            overlap: 1,
            shards,
            router_docs,
        })
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    /// Split and shard memberships of one document.
    pub fn membership(&self, doc: usize) -> (Split, Vec<usize>) {
        if self.router_docs.binary_search(&doc).is_ok() {
            return (Split::Router, Vec::new());
        }
        let mut split = Split::Train;
        let mut ids = Vec::new();
        for (i, s) in self.shards.iter().enumerate() {
            if s.train.binary_search(&doc).is_ok() {
                ids.push(i);
            } else if s.val.binary_search(&doc).is_ok() {
                ids.push(i);
                split = Split::Val;
            }
        }
        (split, ids)
    }

    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# shardset docs={} overlap={}",
            self.num_docs, self.overlap
        );
        for (i, s) in self.shards.iter().enumerate() {
            let _ = writeln!(out, "shard\t{i}\t{}", s.path);
        }
        for d in 0..self.num_docs {
            let (split, ids) = self.membership(d);
            if split != Split::Router && ids.is_empty() {
                continue;
            }
            let list = if ids.is_empty() {
                "-".to_string()
            } else {
                ids.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let _ = writeln!(out, "{d}\t{list}\t{}", split.tag());
        }
        out
    }

    pub fn from_records(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Parse(format!("shard record: {line:?}"));
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty shard file".into()))?;
        let field = |key: &str| -> Result<usize> {
            header
                .split_whitespace()
                .find_map(|w| w.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(header))
        };
        let num_docs = field("docs=")?;
        let overlap = field("overlap=")?;
        let mut set = ShardSet {
            num_docs,
            overlap,
            shards: Vec::new(),
            router_docs: Vec::new(),
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.first() == Some(&"shard") {
                let (Some(i), Some(path)) = (
                    cols.get(1).and_then(|v| v.parse::<usize>().ok()),
                    cols.get(2).and_then(|v| v.parse().ok()),
                ) else {
                    return Err(bad(line));
                };
                if i != set.shards.len() {
                    return Err(bad(line));
                }
                set.shards.push(Shard {
                    path,
                    ..Shard::default()
                });
                continue;
            }
            if cols.len() != 3 {
                return Err(bad(line));
            }
            let doc: usize = cols[0].parse().map_err(|_| bad(line))?;
            if doc >= num_docs {
                return Err(bad(line));
            }
            match cols[2] {
                "router" => set.router_docs.push(doc),
                tag @ ("train" | "val") => {
                    for id in cols[1].split(',') {
                        let i: usize = id.parse().map_err(|_| bad(line))?;
                        let s = set.shards.get_mut(i).ok_or_else(|| bad(line))?;
                        if tag == "train" {
                            s.train.push(doc)
                        } else {
                            s.val.push(doc)
                        }
                    }
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(set)
    }
}

pub fn write_shard_set(path: &Path, set: &ShardSet) -> Result<()> {
    std::fs::write(path, set.to_records())?;
    Ok(())
}

pub fn read_shard_set(path: &Path) -> Result<ShardSet> {
    ShardSet::from_records(&std::fs::read_to_string(path)?)
}
