//! Levels, modules and paths over a partitioned parameter set.
//!
//! Levels and experts are zero-based. A path index `j` in `0..P` decodes
//! mixed-radix into one expert per shared level, with the first level as
//! the most significant digit. Path-specific levels carry one module per
//! path and do not contribute a digit: their component is `j` itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block_prefix, LmConfig};
use crate::optim::{NesterovState, OuterConfig};
use crate::params::ParamTree;

/// Config-file form of one level. `params` entries are exact parameter
/// names, or prefixes when they end in `.` or `*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub modules: usize,
    #[serde(default)]
    pub path_specific: bool,
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub modules: usize,
    pub path_specific: bool,
    pub names: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModuleKey {
    pub level: usize,
    pub expert: usize,
}

impl ModuleKey {
    pub fn new(level: usize, expert: usize) -> Self {
        Self { level, expert }
    }
}

impl fmt::Display for ModuleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}e{}", self.level, self.expert)
    }
}

impl std::str::FromStr for ModuleKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("module key {s:?}"));
        let rest = s.strip_prefix('l').ok_or_else(bad)?;
        let (l, e) = rest.split_once('e').ok_or_else(bad)?;
        Ok(ModuleKey {
            level: l.parse().map_err(|_| bad())?,
            expert: e.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathId {
    pub index: usize,
    pub tuple: Vec<usize>,
}

impl PathId {
    pub fn new(cfg: &ModularConfig, index: usize) -> Result<Self> {
        Ok(Self {
            index,
            tuple: cfg.decode_path(index)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModularConfig {
    levels: Vec<Level>,
}

fn selector_matches(sel: &str, name: &str) -> bool {
    if let Some(prefix) = sel.strip_suffix('*') {
        name.starts_with(prefix)
    } else if sel.ends_with('.') {
        name.starts_with(sel)
    } else {
        name == sel
    }
}

impl ModularConfig {
    /// Resolves selectors against the model's parameter names and checks
    /// that the levels partition them.
    pub fn new<'a>(specs: &[LevelSpec], names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("at least one level is required".into()));
        }
        let mut levels: Vec<Level> = specs
            .iter()
            .map(|s| Level {
                modules: s.modules,
                path_specific: s.path_specific,
                names: BTreeSet::new(),
            })
            .collect();
        for name in names {
            let owners: Vec<usize> = specs
                .iter()
                .enumerate()
                .filter(|(_, s)| s.params.iter().any(|sel| selector_matches(sel, name)))
                .map(|(i, _)| i)
                .collect();
            match owners.as_slice() {
                [l] => {
                    levels[*l].names.insert(name.to_string());
                }
                [] => {
                    return Err(Error::Config(format!(
                        "parameter {name} belongs to no level"
                    )))
                }
                many => {
                    return Err(Error::Config(format!(
                        "parameter {name} belongs to levels {many:?}"
                    )))
                }
            }
        }
        let cfg = Self { levels };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let p = self.path_count();
        for (l, level) in self.levels.iter().enumerate() {
            if level.modules == 0 {
                return Err(Error::Config(format!("level {l} has no modules")));
            }
            if level.path_specific && level.modules != p {
                return Err(Error::Config(format!(
                    "path-specific level {l} has {} modules but there are {p} paths",
                    level.modules
                )));
            }
        }
        Ok(())
    }

    /// Level specs for an LM split into `sizes.len()` levels. Blocks are
    /// split into contiguous groups; embeddings, the final norm and the
    /// head go to level 0.
    pub fn block_specs(lm: &LmConfig, sizes: &[usize]) -> Vec<LevelSpec> {
        let levels = sizes.len().max(1);
        let mut specs: Vec<LevelSpec> = sizes
            .iter()
            .map(|&k| LevelSpec {
                modules: k,
                path_specific: false,
                params: vec![],
            })
            .collect();
        for b in 0..lm.n_blocks {
            let l = (b * levels / lm.n_blocks).min(levels - 1);
            specs[l].params.push(block_prefix(b));
        }
        specs[0].params.extend([
            "emb.".to_string(),
            "final_ln.".to_string(),
            "head.".to_string(),
        ]);
        specs
    }

    pub fn for_lm(lm: &LmConfig, sizes: &[usize]) -> Result<Self> {
        let shapes = lm.param_shapes();
        Self::new(
            &Self::block_specs(lm, sizes),
            shapes.iter().map(|(n, _)| n.as_str()),
        )
    }

    /// One level holding the whole network with `k` independent modules.
    pub fn flat(lm: &LmConfig, k: usize) -> Result<Self> {
        Self::for_lm(lm, &[k])
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn modules_at(&self, level: usize) -> usize {
        self.levels[level].modules
    }

    pub fn level_names(&self, level: usize) -> impl Iterator<Item = &str> {
        self.levels[level].names.iter().map(String::as_str)
    }

    /// Product of module counts over shared levels.
    pub fn path_count(&self) -> usize {
        self.levels
            .iter()
            .filter(|l| !l.path_specific)
            .map(|l| l.modules)
            .product()
    }

    pub fn decode_path(&self, j: usize) -> Result<Vec<usize>> {
        let p = self.path_count();
        if j >= p {
            return Err(Error::Config(format!(
                "path {j} out of range for {p} paths"
            )));
        }
        let mut tuple = vec![0; self.levels.len()];
        let mut rest = j;
        for (l, level) in self.levels.iter().enumerate().rev() {
            if level.path_specific {
                tuple[l] = j;
            } else {
                tuple[l] = rest % level.modules;
                rest /= level.modules;
            }
        }
        Ok(tuple)
    }

    pub fn encode_path(&self, tuple: &[usize]) -> Result<usize> {
        if tuple.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "path tuple has {} entries for {} levels",
                tuple.len(),
                self.levels.len()
            )));
        }
        let mut j = 0;
        for (level, &e) in self.levels.iter().zip(tuple) {
            if e >= level.modules {
                return Err(Error::Config(format!("expert {e} out of range")));
            }
            if !level.path_specific {
                j = j * level.modules + e;
            }
        }
        for (level, &e) in self.levels.iter().zip(tuple) {
            if level.path_specific && e != j {
                return Err(Error::Config(format!(
                    "path-specific component {e} does not match path {j}"
                )));
            }
        }
        Ok(j)
    }

    pub fn path_modules(&self, path: usize) -> Result<Vec<ModuleKey>> {
        Ok(self
            .decode_path(path)?
            .into_iter()
            .enumerate()
            .map(|(l, e)| ModuleKey::new(l, e))
            .collect())
    }

    pub fn module_keys(&self) -> Vec<ModuleKey> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(l, level)| (0..level.modules).map(move |e| ModuleKey::new(l, e)))
            .collect()
    }

    /// Paths whose tuple selects `key`, ascending.
    pub fn paths_through_module(&self, key: ModuleKey) -> Result<Vec<usize>> {
        if key.level >= self.levels.len() || key.expert >= self.levels[key.level].modules {
            return Err(Error::MissingModule(key.to_string()));
        }
        let mut out = Vec::new();
        for j in 0..self.path_count() {
            if self.decode_path(j)?[key.level] == key.expert {
                out.push(j);
            }
        }
        Ok(out)
    }
}

pub fn path_count(cfg: &ModularConfig) -> usize {
    cfg.path_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleEntry {
    pub params: ParamTree,
    pub outer: NesterovState,
}

/// Global module parameters with their outer optimizer state. The only
/// structure that ever holds every module at once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModuleStore {
    modules: BTreeMap<ModuleKey, ModuleEntry>,
}

impl ModuleStore {
    /// Every module initialized to its slice of `init`, zero velocity.
    pub fn from_init(cfg: &ModularConfig, init: &ParamTree, outer: OuterConfig) -> Result<Self> {
        let mut modules = BTreeMap::new();
        for key in cfg.module_keys() {
            let params = init.subset(cfg.level_names(key.level))?;
            let state = NesterovState::new(&params, outer);
            modules.insert(
                key,
                ModuleEntry {
                    params,
                    outer: state,
                },
            );
        }
        Ok(Self { modules })
    }

    pub fn get(&self, key: ModuleKey) -> Option<&ModuleEntry> {
        self.modules.get(&key)
    }

    pub fn get_mut(&mut self, key: ModuleKey) -> Option<&mut ModuleEntry> {
        self.modules.get_mut(&key)
    }

    pub fn insert(&mut self, key: ModuleKey, entry: ModuleEntry) {
        self.modules.insert(key, entry);
    }

    pub fn keys(&self) -> impl Iterator<Item = ModuleKey> + '_ {
        self.modules.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModuleKey, &ModuleEntry)> {
        self.modules.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn bit_eq(&self, other: &ModuleStore) -> bool {
        self.modules.len() == other.modules.len()
            && self
                .modules
                .iter()
                .zip(&other.modules)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.params.bit_eq(&b.params)
                        && a.outer.velocity.bit_eq(&b.outer.velocity)
                })
    }
}

/// One module's parameters under `param.` and outer velocity under
/// `velocity.`.
pub fn module_blob(params: &ParamTree, velocity: &ParamTree) -> Result<ParamTree> {
    let mut b = params.prefixed("param.");
    b.merge(velocity.prefixed("velocity."))?;
    Ok(b)
}

impl ModuleStore {
    /// Every module's blob under a `{key}.` prefix.
    pub fn to_blob(&self) -> Result<ParamTree> {
        let mut out = ParamTree::new();
        for (key, e) in self.iter() {
            out.merge(module_blob(&e.params, &e.outer.velocity)?.prefixed(&format!("{key}.")))?;
        }
        Ok(out)
    }

    pub fn from_blob(cfg: &ModularConfig, blob: &ParamTree, outer: OuterConfig) -> Result<Self> {
        let mut store = ModuleStore::default();
        for key in cfg.module_keys() {
            let m = blob.strip_prefix(&format!("{key}."));
            let params = m.strip_prefix("param.");
            let velocity = m.strip_prefix("velocity.");
            if params.num_params() == 0 {
                return Err(Error::MissingModule(key.to_string()));
            }
            params.check_congruent(&velocity, "module velocity")?;
            store.insert(
                key,
                ModuleEntry {
                    params,
                    outer: NesterovState {
                        velocity,
                        cfg: outer,
                    },
                },
            );
        }
        Ok(store)
    }
}

/// Assembles the full parameter tree of one path.
pub fn materialize_path(
    store: &ModuleStore,
    cfg: &ModularConfig,
    path: usize,
) -> Result<ParamTree> {
    let mut out = ParamTree::new();
    for key in cfg.path_modules(path)? {
        let entry = store
            .get(key)
            .ok_or_else(|| Error::MissingModule(key.to_string()))?;
        out.merge(entry.params.clone())?;
    }
    Ok(out)
}

/// Anything that can produce full per-path parameter trees.
pub trait PathSource {
    fn num_paths(&self) -> usize;
    fn path_params(&self, path: usize) -> Result<ParamTree>;
}

/// A module store viewed through its modular layout.
pub struct StoreView<'a> {
    pub store: &'a ModuleStore,
    pub cfg: &'a ModularConfig,
}

impl PathSource for StoreView<'_> {
    fn num_paths(&self) -> usize {
        self.cfg.path_count()
    }

    fn path_params(&self, path: usize) -> Result<ParamTree> {
        materialize_path(self.store, self.cfg, path)
    }
}

impl PathSource for [ParamTree] {
    fn num_paths(&self) -> usize {
        self.len()
    }

    fn path_params(&self, path: usize) -> Result<ParamTree> {
        self.get(path)
            .cloned()
            .ok_or_else(|| Error::MissingModule(format!("path {path}")))
    }
}

impl PathSource for Vec<ParamTree> {
    fn num_paths(&self) -> usize {
        self.len()
    }

    fn path_params(&self, path: usize) -> Result<ParamTree> {
        self.as_slice().path_params(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn lm() -> LmConfig {
        LmConfig {
            vocab_size: 8,
            seq_len: 8,
            hidden_dim: 8,
            n_heads: 2,
            mlp_dim: 8,
            n_blocks: 2,
            ..Default::default()
        }
    }

    #[test]
    fn path_counts() {
        assert_eq!(
            ModularConfig::for_lm(&lm(), &[2, 4]).unwrap().path_count(),
            8
        );
        assert_eq!(
            ModularConfig::for_lm(&lm(), &[16, 16])
                .unwrap()
                .path_count(),
            256
        );
        assert_eq!(ModularConfig::for_lm(&lm(), &[1]).unwrap().path_count(), 1);
    }

    #[test]
    fn decode_first_and_last() {
        let cfg = ModularConfig::for_lm(&lm(), &[2, 4]).unwrap();
        assert_eq!(cfg.decode_path(0).unwrap(), [0, 0]);
        assert_eq!(cfg.decode_path(7).unwrap(), [1, 3]);
        assert!(cfg.decode_path(8).is_err());
        for j in 0..8 {
            assert_eq!(cfg.encode_path(&cfg.decode_path(j).unwrap()).unwrap(), j);
        }
    }

    #[test]
    fn paths_per_module() {
        let cfg = ModularConfig::for_lm(&lm(), &[2, 4]).unwrap();
        assert_eq!(
            cfg.paths_through_module(ModuleKey::new(0, 1)).unwrap(),
            [4, 5, 6, 7]
        );
        for l in 0..2 {
            let total: usize = (0..cfg.modules_at(l))
                .map(|e| {
                    cfg.paths_through_module(ModuleKey::new(l, e))
                        .unwrap()
                        .len()
                })
                .sum();
            assert_eq!(total, 8);
        }
    }

    #[test]
    fn path_specific_level_has_one_path_per_module() {
        let lm = lm();
        let specs = vec![
            LevelSpec {
                modules: 2,
                path_specific: false,
                params: vec!["emb.".into(), "head.".into(), "final_ln.".into()],
            },
            LevelSpec {
                modules: 2,
                path_specific: false,
                params: vec!["block0.".into()],
            },
            LevelSpec {
                modules: 4,
                path_specific: true,
                params: vec!["block1.".into()],
            },
        ];
        let shapes = lm.param_shapes();
        let cfg = ModularConfig::new(&specs, shapes.iter().map(|(n, _)| n.as_str())).unwrap();
        assert_eq!(cfg.path_count(), 4);
        assert_eq!(cfg.decode_path(3).unwrap(), [1, 1, 3]);
        for e in 0..4 {
            assert_eq!(cfg.paths_through_module(ModuleKey::new(2, e)).unwrap(), [e]);
        }
        assert!(cfg.encode_path(&[1, 1, 2]).is_err());

        let mut wrong = specs.clone();
        wrong[2].modules = 3;
        assert!(ModularConfig::new(&wrong, shapes.iter().map(|(n, _)| n.as_str())).is_err());
    }

    #[test]
    fn levels_must_partition_names() {
        let lm = lm();
        let shapes = lm.param_shapes();
        let names = || shapes.iter().map(|(n, _)| n.as_str());
        let missing = vec![LevelSpec {
            modules: 1,
            path_specific: false,
            params: vec!["block0.".into()],
        }];
        assert!(ModularConfig::new(&missing, names()).is_err());
        let overlap = vec![
            LevelSpec {
                modules: 1,
                path_specific: false,
                params: vec!["*".into()],
            },
            LevelSpec {
                modules: 2,
                path_specific: false,
                params: vec!["head.w".into()],
            },
        ];
        assert!(ModularConfig::new(&overlap, names()).is_err());
    }

    #[test]
    fn noncontiguous_blocks_allowed() {
        // All 1-d tensors (biases and gains) on one level, matrices on the other.
        let lm = lm();
        let shapes = lm.param_shapes();
        let vecs: Vec<String> = shapes
            .iter()
            .filter(|(_, s)| s.len() == 1)
            .map(|(n, _)| n.clone())
            .collect();
        let mats: Vec<String> = shapes
            .iter()
            .filter(|(_, s)| s.len() == 2)
            .map(|(n, _)| n.clone())
            .collect();
        let specs = vec![
            LevelSpec {
                modules: 2,
                path_specific: false,
                params: vecs,
            },
            LevelSpec {
                modules: 3,
                path_specific: false,
                params: mats,
            },
        ];
        let cfg = ModularConfig::new(&specs, shapes.iter().map(|(n, _)| n.as_str())).unwrap();
        let init = init_params(&lm).unwrap();
        let store = ModuleStore::from_init(&cfg, &init, OuterConfig::default()).unwrap();
        for j in 0..cfg.path_count() {
            assert!(materialize_path(&store, &cfg, j).unwrap().bit_eq(&init));
        }
    }

    #[test]
    fn single_module_materializes_to_itself() {
        let lm = lm();
        let cfg = ModularConfig::flat(&lm, 1).unwrap();
        let init = init_params(&lm).unwrap();
        let store = ModuleStore::from_init(&cfg, &init, OuterConfig::default()).unwrap();
        assert!(materialize_path(&store, &cfg, 0)
            .unwrap()
            .bit_eq(&store.get(ModuleKey::new(0, 0)).unwrap().params));
    }

    #[test]
    fn missing_module_is_an_error() {
        let lm = lm();
        let cfg = ModularConfig::for_lm(&lm, &[2, 2]).unwrap();
        let small = ModularConfig::for_lm(&lm, &[1, 1]).unwrap();
        let store =
            ModuleStore::from_init(&small, &init_params(&lm).unwrap(), OuterConfig::default())
                .unwrap();
        assert!(matches!(
            materialize_path(&store, &cfg, 3),
            Err(Error::MissingModule(_))
        ));
    }

    #[test]
    fn module_key_text_roundtrip() {
        let k = ModuleKey::new(2, 13);
        assert_eq!(k.to_string().parse::<ModuleKey>().unwrap(), k);
        assert!("x1e2".parse::<ModuleKey>().is_err());
    }
}
