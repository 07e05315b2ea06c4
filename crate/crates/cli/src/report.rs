use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dipaco_core::trainer::{metrics_from_tsv, MetricRecord, MetricSplit};

use crate::config::config_error;
use crate::{ReportArgs, ReportFormat};

struct Row {
    run: String,
    record: MetricRecord,
}

/// `metrics.tsv` files under `dir`, skipping saved training state.
fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let here = dir.join("metrics.tsv");
    if here.is_file() {
        out.push(here);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "state"))
        .collect();
    subdirs.sort();
    for d in subdirs {
        find_metrics(&d, out)?;
    }
    Ok(())
}

fn collect(root: &Path) -> Result<Vec<Row>> {
    if !root.is_dir() {
        return Err(config_error(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut files = Vec::new();
    find_metrics(root, &mut files)?;
    if files.is_empty() {
        return Err(config_error(format!(
            "no metrics.tsv under {}",
            root.display()
        )));
    }
    let mut rows = Vec::new();
    for f in files {
        let parent = f.parent().expect("file has a parent");
        let run = parent
            .strip_prefix(root)
            .ok()
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        let text = std::fs::read_to_string(&f)?;
        for record in metrics_from_tsv(&text).with_context(|| format!("{}", f.display()))? {
            rows.push(Row {
                run: run.clone(),
                record,
            });
        }
    }
    // Step-major so the table reads as one curve per (run, path, split).
    rows.sort_by(|a, b| {
        (
            a.record.step,
            &a.run,
            a.record.path,
            split_name(a.record.split),
        )
            .cmp(&(
                b.record.step,
                &b.run,
                b.record.path,
                split_name(b.record.split),
            ))
    });
    Ok(rows)
}

fn split_name(s: MetricSplit) -> &'static str {
    match s {
        MetricSplit::Train => "train",
        MetricSplit::Val => "val",
    }
}

fn to_csv(rows: &[Row]) -> String {
    let mut out = String::from("run,step,path,split,loss,ppl\n");
    for r in rows {
        let quoted = if r.run.contains([',', '"']) {
            format!("\"{}\"", r.run.replace('"', "\"\""))
        } else {
            r.run.clone()
        };
        out.push_str(&format!(
            "{quoted},{},{},{},{},{}\n",
            r.record.step,
            r.record.path,
            split_name(r.record.split),
            r.record.loss,
            r.record.ppl()
        ));
    }
    out
}

fn to_json(rows: &[Row]) -> Result<String> {
    let items: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "run": r.run,
                "step": r.record.step,
                "path": r.record.path,
                "split": split_name(r.record.split),
                "loss": r.record.loss,
                "ppl": r.record.ppl(),
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&items)?)
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let rows = collect(&args.metrics)?;
    match args.out {
        ReportFormat::Csv => print!("{}", to_csv(&rows)),
        ReportFormat::Json => println!("{}", to_json(&rows)?),
    }
    Ok(())
}
