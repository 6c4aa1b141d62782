//! Reshapes stored EvalRecords into comparison tables. Nothing here reruns a
//! ranker; every number comes from the records' per-row NDCG values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use dualrec::eval::{activity_group_report, best_of_n_from_records, summarize, ActivityDataset, EvalRecord};

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportShape {
    MetricsTable,
    ActivityGroups,
    BestOfN,
}

impl ReportShape {
    pub fn stem(self) -> &'static str {
        match self {
            ReportShape::MetricsTable => "metrics_table",
            ReportShape::ActivityGroups => "activity_groups",
            ReportShape::BestOfN => "best_of_n",
        }
    }
}

/// What every report needs besides the records.
#[derive(Clone, Debug)]
pub struct ReportContext {
    pub config_digest: String,
    pub seeds: Vec<(String, u64)>,
    pub k_values: Vec<usize>,
    pub activity: ActivityDataset,
    pub best_of_n: Vec<usize>,
}

/// A rectangular table; `None` cells are missing metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

fn by_ranker(records: &[EvalRecord]) -> BTreeMap<&str, Vec<EvalRecord>> {
    let mut out: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.ranker.as_str()).or_default().push(r.clone());
    }
    out
}

fn ndcg_header(k_values: &[usize]) -> impl Iterator<Item = String> + '_ {
    k_values.iter().map(|k| format!("NDCG@{k}"))
}

pub fn build_table(records: &[EvalRecord], shape: ReportShape, ctx: &ReportContext) -> Table {
    match shape {
        ReportShape::MetricsTable => {
            let header = ["ranker", "users", "failures"]
                .into_iter()
                .map(String::from)
                .chain(ndcg_header(&ctx.k_values))
                .collect();
            let rows = by_ranker(records)
                .into_iter()
                .map(|(name, rs)| {
                    let m = summarize(name, &rs, &ctx.k_values);
                    let mut row =
                        vec![Some(m.ranker.clone()), Some(m.n_users.to_string()), Some(m.failures.to_string())];
                    row.extend(ctx.k_values.iter().map(|k| m.ndcg_percent.get(k).map(|&v| pct(v))));
                    row
                })
                .collect();
            Table { header, rows }
        }
        ReportShape::ActivityGroups => {
            let header = ["ranker", "group", "min", "max", "users"]
                .into_iter()
                .map(String::from)
                .chain(ndcg_header(&ctx.k_values))
                .collect();
            let mut rows = Vec::new();
            for (name, rs) in by_ranker(records) {
                let rep = activity_group_report(&rs, ctx.activity, &ctx.k_values);
                for g in rep.groups {
                    let mut row = vec![
                        Some(name.to_owned()),
                        Some(g.name.clone()),
                        Some(g.min.to_string()),
                        g.max.map(|m| m.to_string()),
                        Some(g.n_users.to_string()),
                    ];
                    row.extend(
                        ctx.k_values.iter().map(|k| g.ndcg_percent.as_ref().and_then(|m| m.get(k)).map(|&v| pct(v))),
                    );
                    rows.push(row);
                }
            }
            Table { header, rows }
        }
        ReportShape::BestOfN => {
            let header = vec!["ranker".into(), "n".into(), "NDCG@10".into()];
            let mut rows = Vec::new();
            for (name, rs) in by_ranker(records) {
                let curve = best_of_n_from_records(&rs, &ctx.best_of_n);
                if curve.truncated {
                    log::info!("{name}: best-of-n truncated to the attempts available");
                }
                for p in curve.points {
                    rows.push(vec![Some(name.to_owned()), Some(p.n.to_string()), Some(pct(p.mean))]);
                }
            }
            Table { header, rows }
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn footer(ctx: &ReportContext) -> String {
    let seeds: Vec<String> = ctx.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# config_digest: {}\n# seeds: {}\n", ctx.config_digest, seeds.join(" "))
}

pub fn render_csv(table: &Table, ctx: &ReportContext) -> String {
    let mut out = String::new();
    let line = |cells: Vec<String>| cells.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",") + "\n";
    out.push_str(&line(table.header.clone()));
    for r in &table.rows {
        out.push_str(&line(r.iter().map(|c| c.clone().unwrap_or_default()).collect()));
    }
    out.push_str(&footer(ctx));
    out
}

/// Column-aligned text: first column left-aligned, the rest right-aligned,
/// missing cells shown as `-`.
pub fn render_text(table: &Table, ctx: &ReportContext) -> String {
    let cells: Vec<Vec<String>> = std::iter::once(table.header.clone())
        .chain(table.rows.iter().map(|r| r.iter().map(|c| c.clone().unwrap_or_else(|| "-".into())).collect()))
        .collect();
    let cols = table.header.len();
    let widths: Vec<usize> =
        (0..cols).map(|j| cells.iter().map(|r| r.get(j).map_or(0, |c| c.chars().count())).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, r) in cells.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out.push_str(&footer(ctx));
    out
}

/// Writes `<stem>.csv` and `<stem>.txt` into `dir`. With no records both
/// files hold only the header and footer, and an INCOMPLETE marker is left
/// beside them.
pub fn emit_report(
    records: &[EvalRecord],
    shape: ReportShape,
    ctx: &ReportContext,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let table = build_table(records, shape, ctx);
    let csv = dir.join(format!("{}.csv", shape.stem()));
    let txt = dir.join(format!("{}.txt", shape.stem()));
    fs::write(&csv, render_csv(&table, ctx)).with_context(|| format!("writing {}", csv.display()))?;
    fs::write(&txt, render_text(&table, ctx)).with_context(|| format!("writing {}", txt.display()))?;
    if records.is_empty() {
        let marker = dir.join(INCOMPLETE_MARKER);
        fs::write(&marker, format!("{}: no records\n", shape.stem()))?;
    }
    Ok(vec![csv, txt])
}
