use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::store::CheckpointRef;
use crate::error::{Error, Result};
use crate::modular::ModuleKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RowKind {
    /// Module parameters and outer state entering `phase`.
    Module,
    /// A worker's update slice for one module in `phase`.
    Contribution,
    /// Inner optimizer state of a shard entering `phase`.
    InnerState,
    /// Validation loss of a path after `phase`.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryRow {
    pub kind: RowKind,
    pub phase: usize,
    pub path: Option<usize>,
    pub shard: Option<usize>,
    pub module: Option<ModuleKey>,
    pub checkpoint: Option<CheckpointRef>,
    /// Mean train loss for inner-state rows, validation loss for eval rows.
    pub value: Option<f64>,
}

type RowKey = (
    RowKind,
    usize,
    Option<usize>,
    Option<usize>,
    Option<ModuleKey>,
);

impl RegistryRow {
    fn key(&self) -> RowKey {
        let path = if self.kind == RowKind::Eval {
            self.path
        } else {
            None
        };
        (self.kind, self.phase, path, self.shard, self.module)
    }
}

/// Append-only metadata table. Rows are unique per
/// (kind, phase, shard or path, module).
#[derive(Clone, Debug, Default)]
pub struct Registry {
    rows: Vec<RegistryRow>,
    keys: BTreeSet<RowKey>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends all rows or none; any duplicate rejects the batch.
    pub fn append(&mut self, rows: Vec<RegistryRow>) -> Result<()> {
        let mut fresh = BTreeSet::new();
        for r in &rows {
            let k = r.key();
            if self.keys.contains(&k) || !fresh.insert(k) {
                return Err(Error::Duplicate(format!(
                    "{:?} phase {} shard {:?} path {:?} module {:?}",
                    r.kind, r.phase, r.shard, r.path, r.module
                )));
            }
        }
        self.keys.extend(fresh);
        self.rows.extend(rows);
        Ok(())
    }

    pub fn rows(&self) -> &[RegistryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn module(&self, phase: usize, key: ModuleKey) -> Option<&RegistryRow> {
        self.rows
            .iter()
            .find(|r| r.kind == RowKind::Module && r.phase == phase && r.module == Some(key))
    }

    pub fn contributions(
        &self,
        phase: usize,
        key: ModuleKey,
    ) -> impl Iterator<Item = &RegistryRow> {
        self.rows.iter().filter(move |r| {
            r.kind == RowKind::Contribution && r.phase == phase && r.module == Some(key)
        })
    }

    pub fn inner_state(&self, phase: usize, shard: usize) -> Option<&RegistryRow> {
        self.rows
            .iter()
            .find(|r| r.kind == RowKind::InnerState && r.phase == phase && r.shard == Some(shard))
    }

    pub fn eval(&self, phase: usize, path: usize) -> Option<&RegistryRow> {
        self.rows
            .iter()
            .find(|r| r.kind == RowKind::Eval && r.phase == phase && r.path == Some(path))
    }

    pub fn has(
        &self,
        kind: RowKind,
        phase: usize,
        path: Option<usize>,
        shard: Option<usize>,
        module: Option<ModuleKey>,
    ) -> bool {
        let path = if kind == RowKind::Eval { path } else { None };
        self.keys.contains(&(kind, phase, path, shard, module))
    }

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        let mut out = String::from("kind\tphase\tpath\tshard\tmodule\tcheckpoint\tvalue\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:?}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.kind,
                r.phase,
                opt(r.path.map(|v| v.to_string())),
                opt(r.shard.map(|v| v.to_string())),
                opt(r.module.map(|v| v.to_string())),
                opt(r.checkpoint.as_ref().map(|v| v.to_string())),
                opt(r.value.map(|v| format!("{v:e}"))),
            );
        }
        out
    }
}
