use super::{
    fit_discriminative, score_paths, DiscriminativeConfig, DiscriminativeFit, LinearRouter, Router,
    Shard, ShardSet,
};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{LmConfig, Token};
use crate::modular::PathSource;
use crate::params::ParamTree;

/// Rebuilds the shard set from the current path parameters.
pub trait Resharder {
    fn reshard(
        &mut self,
        round: usize,
        paths: &dyn PathSource,
        current: &ShardSet,
    ) -> Result<ShardSet>;
}

/// Scores the router documents under every path, refits the linear router
/// to the argmax labels and reroutes all other documents with it. Router
/// and validation membership are preserved.
pub struct DiscriminativeResharder<'a> {
    pub corpus: &'a Corpus,
    /// Prefix feature of every corpus document.
    pub features: &'a [Vec<f64>],
    pub lm: &'a LmConfig,
    pub prefix_len: usize,
    pub cfg: DiscriminativeConfig,
    pub fits: Vec<DiscriminativeFit>,
}

impl<'a> DiscriminativeResharder<'a> {
    pub fn new(
        corpus: &'a Corpus,
        features: &'a [Vec<f64>],
        lm: &'a LmConfig,
        prefix_len: usize,
        cfg: DiscriminativeConfig,
    ) -> Self {
        DiscriminativeResharder {
            corpus,
            features,
            lm,
            prefix_len,
            cfg,
            fits: Vec::new(),
        }
    }

    pub fn latest_router(&self) -> Option<&LinearRouter> {
        self.fits.last().map(|f| &f.router)
    }
}

impl Resharder for DiscriminativeResharder<'_> {
    fn reshard(
        &mut self,
        _round: usize,
        paths: &dyn PathSource,
        current: &ShardSet,
    ) -> Result<ShardSet> {
        if current.router_docs.is_empty() {
            return Err(Error::Routing(
                "discriminative routing needs router data".into(),
            ));
        }
        let docs: Vec<&[Token]> = current
            .router_docs
            .iter()
            .map(|&d| self.corpus.seq(d))
            .collect();
        let scores = score_paths(&docs, paths, self.lm, self.prefix_len)?;
        let feats: Vec<Vec<f64>> = current
            .router_docs
            .iter()
            .map(|&d| self.features[d].clone())
            .collect();
        let fit = fit_discriminative(&feats, &scores, &self.cfg)?;
        let router = &fit.router;
        let mut shards: Vec<Shard> = (0..router.num_paths())
            .map(|path| Shard {
                path,
                ..Shard::default()
            })
            .collect();
        let mut val = vec![false; current.num_docs];
        let mut member = vec![false; current.num_docs];
        for s in &current.shards {
            s.val.iter().for_each(|&d| val[d] = true);
            s.train.iter().chain(&s.val).for_each(|&d| member[d] = true);
        }
        for d in (0..current.num_docs).filter(|&d| member[d]) {
            for p in router.top_n(&self.features[d], current.overlap) {
                if val[d] {
                    shards[p].val.push(d);
                } else {
                    shards[p].train.push(d);
                }
            }
        }
        self.fits.push(fit);
        Ok(ShardSet {
            num_docs: current.num_docs,
            overlap: current.overlap,
            shards,
            router_docs: current.router_docs.clone(),
        })
    }
}

#[derive(Debug)]
pub struct AlternationOutcome {
    /// The initial shard set followed by one per round.
    pub shard_sets: Vec<ShardSet>,
    pub routers: Vec<LinearRouter>,
    /// Argmax labels each refit used.
    pub labels: Vec<Vec<usize>>,
}

impl AlternationOutcome {
    pub fn final_shards(&self) -> &ShardSet {
        self.shard_sets
            .last()
            .expect("initial shard set is always present")
    }
}

/// Alternates path training on the current shards with router refits for
/// `rounds` rounds. `train_paths(round, shards)` returns trained per-path
/// parameters.
pub fn alternate_discriminative(
    rounds: usize,
    initial: ShardSet,
    train_paths: &mut dyn FnMut(usize, &ShardSet) -> Result<Vec<ParamTree>>,
    resharder: &mut DiscriminativeResharder<'_>,
) -> Result<AlternationOutcome> {
    let mut shard_sets = vec![initial];
    for round in 0..rounds {
        let current = shard_sets.last().expect("nonempty");
        let paths = train_paths(round, current)?;
        let next = resharder.reshard(round, &paths, current)?;
        shard_sets.push(next);
    }
    let fits = &resharder.fits[resharder.fits.len() - rounds..];
    Ok(AlternationOutcome {
        shard_sets,
        routers: fits.iter().map(|f| f.router.clone()).collect(),
        labels: fits.iter().map(|f| f.labels.clone()).collect(),
    })
}
