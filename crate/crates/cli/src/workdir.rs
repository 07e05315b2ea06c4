use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dipaco_core::data::{read_corpus, write_labels, write_tokens, Corpus};
use dipaco_core::experiment::{
    corpus_features, make_dataset, make_shards, pretrain, Dataset, ExperimentConfig, TrainMode,
};
use dipaco_core::io::{read_params, write_params};
use dipaco_core::routing::{read_shard_set, write_shard_set, AnyRouter, ShardSet};
use dipaco_core::ParamTree;

use crate::config::{self, config_error, sections};

const DATA_SECTIONS: &[&str] = &["data", "test"];
const BASE_SECTIONS: &[&str] = &["data", "model", "pretrain"];
const SHARD_SECTIONS: &[&str] = &["data", "model", "pretrain", "modular", "routing"];

/// A run directory and its cached artifacts.
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)
            .with_context(|| format!("creating run directory {}", root.display()))?;
        Ok(Workdir {
            root: root.to_path_buf(),
        })
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    /// `explicit` if given, else the captured config, with overrides.
    pub fn config(
        &self,
        explicit: Option<&Path>,
        overrides: &[String],
    ) -> Result<ExperimentConfig> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None if self.config_path().exists() => self.config_path(),
            None => {
                return Err(config_error(format!(
                    "no config: pass --config or run make-data in {}",
                    self.root.display()
                )))
            }
        };
        config::load(&path, overrides)
    }

    pub fn capture(&self, cfg: &ExperimentConfig) -> Result<()> {
        capture(&self.config_path(), cfg)
    }

    fn fresh(&self, stamp: &Path, want: &str, files: &[PathBuf]) -> bool {
        std::fs::read_to_string(stamp).is_ok_and(|s| s == want) && files.iter().all(|f| f.exists())
    }

    pub fn dataset(&self, cfg: &ExperimentConfig) -> Result<Dataset> {
        let dir = self.root.join("data");
        let stamp = dir.join("stamp.toml");
        let want = sections(cfg, DATA_SECTIONS)?;
        let names = ["train", "test", "chunk_router"];
        let files: Vec<PathBuf> = names
            .iter()
            .flat_map(|n| {
                [
                    dir.join(format!("{n}.tokens")),
                    dir.join(format!("{n}.labels")),
                ]
            })
            .collect();
        if self.fresh(&stamp, &want, &files) {
            let read = |n: &str| -> Result<Corpus> {
                Ok(read_corpus(
                    &dir.join(format!("{n}.tokens")),
                    Some(&dir.join(format!("{n}.labels"))),
                )?)
            };
            return Ok(Dataset {
                train: read("train")?,
                test: read("test")?,
                chunk_router: read("chunk_router")?,
            });
        }
        log::info!("generating corpora in {}", dir.display());
        let ds = make_dataset(&cfg.data, &cfg.test)?;
        std::fs::create_dir_all(&dir)?;
        for (n, c) in names.iter().zip([&ds.train, &ds.test, &ds.chunk_router]) {
            write_tokens(&dir.join(format!("{n}.tokens")), c)?;
            write_labels(&dir.join(format!("{n}.labels")), c)?;
        }
        std::fs::write(stamp, want)?;
        Ok(ds)
    }

    pub fn base(&self, cfg: &ExperimentConfig, ds: &Dataset) -> Result<ParamTree> {
        let path = self.root.join("base.bin");
        let stamp = self.root.join("base.stamp.toml");
        let want = sections(cfg, BASE_SECTIONS)?;
        if self.fresh(&stamp, &want, std::slice::from_ref(&path)) {
            return Ok(read_params(&path)?);
        }
        log::info!("pretraining the base model ({} steps)", cfg.pretrain.steps);
        let (base, losses) = pretrain(
            &cfg.model,
            &ds.train,
            &[],
            &cfg.pretrain,
            cfg.data.prefix_len,
        )?;
        write_params(&path, &base)?;
        let mut rows = String::from("step\tloss\n");
        for (i, l) in losses.iter().enumerate() {
            rows.push_str(&format!("{i}\t{l:.17e}\n"));
        }
        std::fs::write(self.root.join("pretrain_losses.tsv"), rows)?;
        std::fs::write(stamp, want)?;
        Ok(base)
    }

    pub fn features(
        &self,
        cfg: &ExperimentConfig,
        ds: &Dataset,
        base: &ParamTree,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(corpus_features(
            &ds.train,
            base,
            &cfg.model,
            cfg.data.prefix_len,
        )?)
    }

    /// Routed shards and the generative router that produced them.
    pub fn shards(
        &self,
        cfg: &ExperimentConfig,
        features: &[Vec<f64>],
    ) -> Result<(ShardSet, AnyRouter)> {
        let shards_path = self.root.join("shards.tsv");
        let router_path = self.root.join("router.bin");
        let stamp = self.root.join("shards.stamp.toml");
        let want = sections(cfg, SHARD_SECTIONS)?;
        if self.fresh(&stamp, &want, &[shards_path.clone(), router_path.clone()]) {
            let shards = read_shard_set(&shards_path)?;
            let router = AnyRouter::from_params(&read_params(&router_path)?)?;
            return Ok((shards, router));
        }
        log::info!("fitting the {:?} router", cfg.routing.router);
        let (shards, router) = make_shards(cfg, TrainMode::Dipaco, features)?;
        write_shard_set(&shards_path, &shards)?;
        write_params(&router_path, &router.to_params()?)?;
        std::fs::write(stamp, want)?;
        Ok((shards, router))
    }
}

pub fn capture(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

pub fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Dipaco => "dipaco",
        TrainMode::Diloco => "diloco",
        TrainMode::Flat => "flat",
        TrainMode::Dense => "dense",
    }
}
