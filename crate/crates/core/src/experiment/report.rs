//! Rendering of aggregated results as Markdown or CSV tables.
//!
//! Cells read `mean±std` with three decimals and the leading zero dropped
//! (".637±.014"). Markdown bolds the best mean of every column; CSV carries
//! raw numbers with separate mean and std columns.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{AggregateStats, ResultTable, Summary};
use crate::sampling::{Stage, StrategySpec};
use crate::subregion::RegionSet;

/// Table shapes. `Table1` crosses region selections with prompt counts,
/// `Table2` crosses cumulative regions with (initial + cumulative) counts,
/// `Table3` crosses initial-varied stages with the fixed-point region, and
/// `Summary` lists every strategy by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Summary,
    Table1,
    Table2,
    Table3,
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "summary" => Ok(Layout::Summary),
            "table1" => Ok(Layout::Table1),
            "table2" => Ok(Layout::Table2),
            "table3" => Ok(Layout::Table3),
            other => Err(format!(
                "unknown layout {other:?} (expected summary, table1, table2 or table3)"
            )),
        }
    }
}

impl Layout {
    /// Whether any aggregate fits this layout.
    pub fn has_cells(self, results: &ResultTable) -> bool {
        results.aggregates.iter().any(|a| self.position(&a.spec).is_some())
    }

    /// (row, column) key of a spec under this layout.
    fn position(self, spec: &StrategySpec) -> Option<(RowKey, ColKey)> {
        match (self, *spec) {
            (Layout::Summary, _) => None,
            (Layout::Table1, StrategySpec::RandomWhole { count }) => {
                Some((RowKey::Region(RegionSet::WHOLE), ColKey::Count(count)))
            }
            (Layout::Table1, StrategySpec::RegionConstrained { region, count }) => {
                Some((RowKey::Region(region), ColKey::Count(count)))
            }
            (
                Layout::Table2,
                StrategySpec::Cumulative {
                    initial,
                    cumulative,
                },
            ) => Some((
                RowKey::Pair(initial.region, cumulative.region),
                ColKey::Split(initial.count, cumulative.count),
            )),
            (
                Layout::Table3,
                StrategySpec::InitialVaried {
                    initial,
                    cumulative,
                },
            ) => Some((
                RowKey::Initial(initial, cumulative.count),
                ColKey::Region(cumulative.region),
            )),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            other => Err(format!("unknown format {other:?} (expected markdown or csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTable {
    pub text: String,
    /// Missing or all-failed cells, one message each.
    pub warnings: Vec<String>,
}

const MISSING: &str = "—";

fn strip_leading_zero(s: String) -> String {
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

/// `mean±std` with three decimals and no leading zero: ".637±.014".
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!(
        "{}±{}",
        strip_leading_zero(format!("{mean:.3}")),
        strip_leading_zero(format!("{std:.3}"))
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKey {
    Region(RegionSet),
    Pair(RegionSet, RegionSet),
    Initial(Stage, usize),
    Name(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ColKey {
    Count(usize),
    Split(usize, usize),
    Region(RegionSet),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Dice,
    Nsd,
}

impl Metric {
    fn summary(self, a: &AggregateStats) -> &Summary {
        match self {
            Metric::Dice => &a.dice,
            Metric::Nsd => &a.nsd,
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Nsd => "NSD",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Nsd => "nsd",
        }
    }
}

fn region_rank(r: RegionSet) -> usize {
    RegionSet::table_rows()
        .iter()
        .position(|&x| x == r)
        .unwrap_or(usize::MAX)
}

fn col_label(c: ColKey) -> String {
    match c {
        ColKey::Count(n) => format!("{n}P"),
        ColKey::Split(i, c) => format!("({i}+{c})P"),
        ColKey::Region(r) if r.is_whole() => "W".into(),
        ColKey::Region(r) => r.to_string(),
    }
}

fn col_order(c: &ColKey) -> (usize, usize, usize) {
    match *c {
        ColKey::Count(n) => (n, 0, 0),
        ColKey::Split(i, c) => (i + c, i, 0),
        ColKey::Region(r) => (region_rank(r), 0, 0),
    }
}

fn row_order(r: &RowKey) -> (usize, usize, usize, usize) {
    match *r {
        RowKey::Region(x) => (region_rank(x), 0, 0, 0),
        RowKey::Pair(i, c) => (region_rank(i), region_rank(c), 0, 0),
        // Whole-mask initial points first, as in the published layout.
        RowKey::Initial(stage, cumulative) => (
            usize::from(!stage.region.is_whole()),
            region_rank(stage.region),
            stage.count,
            cumulative,
        ),
        RowKey::Name(i) => (i, 0, 0, 0),
    }
}

fn tick(present: bool) -> &'static str {
    if present {
        "✓"
    } else {
        "✗"
    }
}

/// Leading label cells of a row, one per label column.
fn row_labels(layout: Layout, row: RowKey, names: &[String]) -> Vec<String> {
    match row {
        RowKey::Region(r) => vec![
            tick(r.boundary).into(),
            tick(r.margin).into(),
            tick(r.center).into(),
        ],
        RowKey::Pair(i, c) => vec![
            if i.is_whole() { "W".into() } else { i.to_string() },
            tick(c.boundary).into(),
            tick(c.margin).into(),
            tick(c.center).into(),
        ],
        RowKey::Initial(stage, cumulative) => {
            let region = if stage.region.is_whole() {
                "W".to_string()
            } else {
                stage.region.to_string()
            };
            vec![format!("{}({region})", stage.count), format!("{cumulative}P")]
        }
        RowKey::Name(i) => {
            let _ = layout;
            vec![names[i].clone()]
        }
    }
}

fn label_headers(layout: Layout) -> Vec<&'static str> {
    match layout {
        Layout::Table1 => vec!["B", "M", "C"],
        Layout::Table2 => vec!["Init.", "B", "M", "C"],
        Layout::Table3 => vec!["Init.", "Cumu."],
        Layout::Summary => vec!["Strategy"],
    }
}

fn metrics_for(layout: Layout) -> &'static [Metric] {
    match layout {
        Layout::Table3 => &[Metric::Dice],
        _ => &[Metric::Dice, Metric::Nsd],
    }
}

struct Grid<'a> {
    rows: Vec<RowKey>,
    cols: Vec<ColKey>,
    /// `cells[row][col]`
    cells: Vec<Vec<Option<&'a AggregateStats>>>,
    names: Vec<String>,
}

fn build_grid(results: &ResultTable, layout: Layout) -> Grid<'_> {
    if layout == Layout::Summary {
        let mut names: Vec<String> = Vec::new();
        let mut counts: BTreeSet<usize> = BTreeSet::new();
        for a in &results.aggregates {
            if !names.contains(&a.strategy) {
                names.push(a.strategy.clone());
            }
            counts.insert(a.count);
        }
        let cols: Vec<ColKey> = counts.into_iter().map(ColKey::Count).collect();
        let rows: Vec<RowKey> = (0..names.len()).map(RowKey::Name).collect();
        let cells = names
            .iter()
            .map(|n| {
                cols.iter()
                    .map(|c| {
                        let ColKey::Count(k) = *c else { unreachable!() };
                        results.get(n, k)
                    })
                    .collect()
            })
            .collect();
        return Grid {
            rows,
            cols,
            cells,
            names,
        };
    }

    let placed: Vec<(RowKey, ColKey, &AggregateStats)> = results
        .aggregates
        .iter()
        .filter_map(|a| layout.position(&a.spec).map(|(r, c)| (r, c, a)))
        .collect();
    let mut rows: Vec<RowKey> = Vec::new();
    let mut cols: Vec<ColKey> = Vec::new();
    for (r, c, _) in &placed {
        if !rows.contains(r) {
            rows.push(*r);
        }
        if !cols.contains(c) {
            cols.push(*c);
        }
    }
    if layout == Layout::Table3 {
        // The fixed-point region columns always span B, M, C and W.
        cols = [
            RegionSet::BOUNDARY,
            RegionSet::MARGIN,
            RegionSet::CENTER,
            RegionSet::WHOLE,
        ]
        .into_iter()
        .map(ColKey::Region)
        .collect();
    }
    rows.sort_by_key(row_order);
    cols.sort_by_key(col_order);
    // Aggregates are sorted by strategy name, so the first match wins
    // deterministically when two strategies share a position.
    let cells = rows
        .iter()
        .map(|r| {
            cols.iter()
                .map(|c| {
                    placed
                        .iter()
                        .find(|(pr, pc, _)| pr == r && pc == c)
                        .map(|(_, _, a)| *a)
                })
                .collect()
        })
        .collect();
    Grid {
        rows,
        cols,
        cells,
        names: Vec::new(),
    }
}

fn escape_csv(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders `results` in `layout`. Cells the layout expects but the results
/// lack render as "—" and produce a warning.
pub fn render_table(results: &ResultTable, layout: Layout, format: TableFormat) -> RenderedTable {
    let grid = build_grid(results, layout);
    let metrics = metrics_for(layout);
    let mut warnings = Vec::new();
    let labels: Vec<Vec<String>> = grid
        .rows
        .iter()
        .map(|&r| row_labels(layout, r, &grid.names))
        .collect();

    for (ri, row) in grid.cells.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            let where_ = format!("row {} column {}", labels[ri].join(" "), col_label(grid.cols[ci]));
            match cell {
                None => warnings.push(format!("missing cell at {where_}")),
                Some(a) if a.dice.run_means.is_empty() => {
                    warnings.push(format!("all runs failed at {where_}"))
                }
                _ => {}
            }
        }
    }

    let value = |cell: Option<&AggregateStats>, m: Metric| -> Option<(f64, f64)> {
        let s = m.summary(cell?);
        (!s.run_means.is_empty()).then_some((s.mean, s.std))
    };

    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            let mut header: Vec<String> = label_headers(layout).into_iter().map(String::from).collect();
            for m in metrics {
                for &c in &grid.cols {
                    header.push(format!("{} {}", m.title(), col_label(c)));
                }
            }
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let align: Vec<&str> = header
                .iter()
                .enumerate()
                .map(|(i, _)| if i < label_headers(layout).len() { ":-:" } else { "--:" })
                .collect();
            let _ = writeln!(out, "|{}|", align.join("|"));

            // Best mean per (metric, column).
            let best: Vec<Vec<Option<f64>>> = metrics
                .iter()
                .map(|&m| {
                    (0..grid.cols.len())
                        .map(|ci| {
                            grid.cells
                                .iter()
                                .filter_map(|row| value(row[ci], m).map(|v| v.0))
                                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
                        })
                        .collect()
                })
                .collect();

            for (ri, row) in grid.cells.iter().enumerate() {
                let mut line = labels[ri].clone();
                for (mi, &m) in metrics.iter().enumerate() {
                    for (ci, cell) in row.iter().enumerate() {
                        line.push(match value(*cell, m) {
                            None => MISSING.to_string(),
                            Some((mean, std)) => {
                                let text = format_mean_std(mean, std);
                                if best[mi][ci] == Some(mean) && grid.rows.len() > 1 {
                                    format!("**{text}**")
                                } else {
                                    text
                                }
                            }
                        });
                    }
                }
                let _ = writeln!(out, "| {} |", line.join(" | "));
            }
        }
        TableFormat::Csv => {
            let mut header: Vec<String> = label_headers(layout)
                .into_iter()
                .map(|h| h.trim_end_matches('.').to_lowercase())
                .collect();
            for m in metrics {
                for &c in &grid.cols {
                    let label = col_label(c).to_lowercase();
                    header.push(format!("{}_{label}_mean", m.slug()));
                    header.push(format!("{}_{label}_std", m.slug()));
                }
            }
            let _ = writeln!(out, "{}", header.iter().map(|h| escape_csv(h)).collect::<Vec<_>>().join(","));
            for (ri, row) in grid.cells.iter().enumerate() {
                let mut line: Vec<String> = labels[ri]
                    .iter()
                    .map(|l| match l.as_str() {
                        "✓" => "1".to_string(),
                        "✗" => "0".to_string(),
                        other => escape_csv(other),
                    })
                    .collect();
                for &m in metrics {
                    for cell in row {
                        match value(*cell, m) {
                            Some((mean, std)) => {
                                line.push(mean.to_string());
                                line.push(std.to_string());
                            }
                            None => {
                                line.push(String::new());
                                line.push(String::new());
                            }
                        }
                    }
                }
                let _ = writeln!(out, "{}", line.join(","));
            }
        }
    }
    RenderedTable {
        text: out,
        warnings,
    }
}
