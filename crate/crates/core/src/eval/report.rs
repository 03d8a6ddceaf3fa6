use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalError, MetricsReport, TableContext};
use crate::sim::{ItemId, ItemSpec, Shape, Simulator, TaskFamily};

/// One line of the per-target results table. Rates are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub target: String,
    pub demos: Option<usize>,
    pub positions: usize,
    pub strategy: String,
    pub model: String,
    pub episodes: u64,
    pub seeds: usize,
    /// Mean over training seeds.
    pub tsr: f64,
    /// Population standard deviation over training seeds.
    pub tsr_std: f64,
    /// Mean over seeds with at least one grasp attempt.
    pub gsr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Plot,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "text" | "table" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "plot" | "plot-data" => Ok(Self::Plot),
            other => Err(EvalError::UnknownFormat(other.to_string())),
        }
    }
}

/// Short label for where an item is gripped.
pub fn grasp_strategy(item: &ItemSpec) -> &'static str {
    let [ox, oy, ..] = item.grasp_region;
    match (item.shape, item.handle.is_some()) {
        (_, true) => "handle",
        (Shape::Disc, false) if ox != 0.0 || oy != 0.0 => "rim",
        (Shape::Disc, false) => "diameter",
        (Shape::Rect, false) => "body",
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Seed-mean TSR and seed-mean GSR (over seeds where it is defined).
pub(super) fn mean_rates(per_seed: &[MetricsReport]) -> (f64, Option<f64>) {
    let tsr: Vec<f64> = per_seed.iter().map(|m| m.tsr()).collect();
    let gsr: Vec<f64> = per_seed.iter().filter_map(|m| m.gsr()).collect();
    (mean(&tsr), (!gsr.is_empty()).then(|| mean(&gsr)))
}

pub(super) fn arm_rows(sim: &Simulator, model: &str, per_seed: &[MetricsReport], ctx: &TableContext) -> Vec<ReportRow> {
    let mut targets: BTreeMap<(TaskFamily, ItemId), BTreeSet<u32>> = BTreeMap::new();
    for m in per_seed {
        for (k, _) in &m.per_condition {
            targets.entry((k.family, k.target_item)).or_default().insert(k.placement_id);
        }
    }
    targets
        .into_iter()
        .map(|((family, item), placements)| {
            let counts: Vec<_> = per_seed.iter().map(|m| m.for_target(item)).collect();
            let tsr: Vec<f64> = counts.iter().map(|c| c.tsr()).collect();
            let gsr: Vec<f64> = counts.iter().filter_map(|c| c.gsr()).collect();
            let mu = mean(&tsr);
            let var = tsr.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / tsr.len().max(1) as f64;
            let spec = sim.catalog().item(item);
            ReportRow {
                task: family.name().to_string(),
                target: spec.map_or_else(|| item.to_string(), |s| s.name.clone()),
                demos: ctx.demos.get(&item).copied(),
                positions: placements.len(),
                strategy: spec.map_or("unknown", grasp_strategy).to_string(),
                model: model.to_string(),
                episodes: counts.iter().map(|c| c.episodes).sum(),
                seeds: per_seed.len(),
                tsr: mu,
                tsr_std: var.sqrt(),
                gsr: (!gsr.is_empty()).then(|| mean(&gsr)),
            }
        })
        .collect()
}

const HEADER: [&str; 8] = ["Task", "Target", "Demos", "Positions", "Strategy", "Model", "TSR", "GSR"];

fn text_table(rows: &[ReportRow]) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.task.clone(),
                r.target.clone(),
                r.demos.map_or("-".into(), |d| d.to_string()),
                r.positions.to_string(),
                r.strategy.clone(),
                r.model.clone(),
                format!("{} ± {}", pct(r.tsr), pct(r.tsr_std)),
                r.gsr.map_or("n/a".into(), pct),
            ]
        })
        .collect();
    let mut width: Vec<usize> = HEADER.iter().map(|h| h.chars().count()).collect();
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let line = |fields: &[String]| {
        let mut s = String::new();
        for (i, (f, w)) in fields.iter().zip(&width).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = w - f.chars().count();
            s.push_str(f);
            s.extend(std::iter::repeat_n(' ', pad));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&HEADER.map(String::from));
    out.push_str(&line(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    for c in &cells {
        out.push_str(&line(c));
    }
    out
}

fn csv_table(rows: &[ReportRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["task", "target", "demos", "positions", "strategy", "model", "episodes", "seeds", "tsr", "tsr_std", "gsr"])
        .expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn plot_data(rows: &[ReportRow]) -> String {
    let mut out = String::from("series\tlabel\tmodel\tvalue\n");
    for metric in ["TSR", "GSR"] {
        for r in rows {
            let v = if metric == "TSR" { Some(r.tsr) } else { r.gsr };
            if let Some(v) = v {
                let _ = writeln!(out, "{metric}\t{}/{}\t{}\t{}", r.task, r.target, r.model, v);
            }
        }
    }
    out
}

/// Renders rows in `format`. Output depends only on the rows, and an empty
/// table still has its header.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => text_table(rows),
        ReportFormat::Csv => csv_table(rows),
        ReportFormat::Plot => plot_data(rows),
    }
}

pub fn write_report(rows: &[ReportRow], format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, emit_report(rows, format))?;
    Ok(())
}

/// Reads rows back from the CSV form.
pub fn parse_delimited(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| EvalError::Format(e.to_string())))
        .collect()
}
