//! Sweep results and the files they are written to.
//!
//! Everything derived (aggregates, frontiers, charts) is computed from the
//! [`Row`]s alone, so re-running `report` over a `rows.csv` reproduces it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, Aggregate, MetricReport, Stat};
use crate::pareto::{pareto_frontier, ParetoPoint};

pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATES_FILE: &str = "aggregates.json";
pub const PARETO_FILE: &str = "pareto.csv";
pub const GENERATIONS_FILE: &str = "generations.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    /// The provider failed mid-generation; metrics cover the tokens produced.
    Partial,
    Failed,
}

/// One line of `rows.csv`. Metric columns are empty for failed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub corpus: String,
    pub lambda: f64,
    pub prompt_id: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub style_ppl: Option<f64>,
    pub base_ppl: Option<f64>,
    pub mean_jsd_bits: Option<f64>,
    pub unigram_overlap: Option<f64>,
    pub bigram_seen: Option<f64>,
    pub seed: u64,
    pub status: CellStatus,
}

impl Row {
    pub fn new(
        corpus: String,
        lambda: f64,
        prompt_id: usize,
        seed: u64,
        status: CellStatus,
        metrics: Option<&MetricReport>,
    ) -> Self {
        Self {
            corpus,
            lambda,
            prompt_id,
            t: metrics.map_or(0, |m| m.token_count),
            style_ppl: metrics.map(|m| m.style_ppl),
            base_ppl: metrics.map(|m| m.base_ppl),
            mean_jsd_bits: metrics.map(|m| m.mean_jsd_bits),
            unigram_overlap: metrics.map(|m| m.unigram_overlap),
            bigram_seen: metrics.and_then(|m| m.bigram_seen),
            seed,
            status,
        }
    }

    pub fn metrics(&self) -> Option<MetricReport> {
        Some(MetricReport {
            token_count: self.t,
            style_ppl: self.style_ppl?,
            base_ppl: self.base_ppl?,
            mean_jsd_bits: self.mean_jsd_bits?,
            unigram_overlap: self.unigram_overlap?,
            bigram_seen: self.bigram_seen,
        })
    }

    pub fn cell_id(&self) -> String {
        cell_id(&self.corpus, self.lambda, self.prompt_id)
    }
}

pub fn cell_id(corpus: &str, lambda: f64, prompt_id: usize) -> String {
    format!("{corpus}/lambda={lambda:.3}/p{prompt_id:02}")
}

/// Full text of one cell, for `generations.txt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellText {
    pub cell_id: String,
    pub prompt: String,
    pub text: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub corpus: String,
    pub lambda: f64,
    pub ok: usize,
    pub not_ok: usize,
    /// Over `ok` rows; absent when there are none.
    pub aggregate: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub cells: usize,
    pub resumed_cells: usize,
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<Row>,
    pub texts: Vec<CellText>,
    pub aggregates: Vec<AggregateRow>,
    pub frontiers: BTreeMap<String, Vec<ParetoPoint>>,
    pub metadata: Option<RunMetadata>,
}

impl SweepReport {
    pub fn from_rows(rows: Vec<Row>, texts: Vec<CellText>, metadata: Option<RunMetadata>) -> Result<Self> {
        let aggregates = aggregates_from_rows(&rows)?;
        let frontiers = frontiers(&aggregates);
        Ok(Self { rows, texts, aggregates, frontiers, metadata })
    }
}

/// Groups rows by `(corpus, λ)` in order of first appearance.
pub fn aggregates_from_rows(rows: &[Row]) -> Result<Vec<AggregateRow>> {
    let mut order: Vec<(String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, u64), Vec<&Row>> = BTreeMap::new();
    for row in rows {
        let key = (row.corpus.clone(), row.lambda.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let reports: Vec<MetricReport> =
                members.iter().filter(|r| r.status == CellStatus::Ok).filter_map(|r| r.metrics()).collect();
            Ok(AggregateRow {
                corpus: key.0,
                lambda: f64::from_bits(key.1),
                ok: reports.len(),
                not_ok: members.len() - reports.len(),
                aggregate: if reports.is_empty() { None } else { Some(aggregate(&reports)?) },
            })
        })
        .collect()
}

/// Per-corpus frontier over the mean (base, style) perplexities.
pub fn frontiers(aggregates: &[AggregateRow]) -> BTreeMap<String, Vec<ParetoPoint>> {
    let mut points: BTreeMap<String, Vec<ParetoPoint>> = BTreeMap::new();
    for a in aggregates {
        if let Some(agg) = &a.aggregate {
            points.entry(a.corpus.clone()).or_default().push(ParetoPoint::new(
                a.lambda,
                agg.base_ppl.mean,
                agg.style_ppl.mean,
            ));
        }
    }
    points.into_iter().map(|(c, p)| (c, pareto_frontier(&p))).collect()
}

pub fn write_rows(rows: &[Row], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record([
        "corpus",
        "lambda",
        "prompt_id",
        "T",
        "style_ppl",
        "base_ppl",
        "mean_jsd_bits",
        "unigram_overlap",
        "bigram_seen",
        "seed",
        "status",
    ])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Serialize)]
struct AggregatesFile<'a> {
    metadata: Option<&'a RunMetadata>,
    aggregates: &'a [AggregateRow],
    frontiers: &'a BTreeMap<String, Vec<ParetoPoint>>,
}

/// Writes every artifact of `report` into `dir`, creating it if needed.
pub fn emit_reports(report: &SweepReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_rows(&report.rows, &dir.join(ROWS_FILE))?;
    emit_derived(report, dir)?;
    let mut gen = String::new();
    for t in &report.texts {
        let _ = writeln!(gen, "### {}", t.cell_id);
        let _ = writeln!(gen, "prompt: {}", t.prompt);
        if let Some(e) = &t.error {
            let _ = writeln!(gen, "error: {e}");
        }
        let _ = writeln!(gen, "{}\n", t.text);
    }
    fs::write(dir.join(GENERATIONS_FILE), gen)?;
    Ok(())
}

/// Aggregates, frontier and charts: everything recomputable from rows.
pub fn emit_derived(report: &SweepReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = AggregatesFile {
        metadata: report.metadata.as_ref(),
        aggregates: &report.aggregates,
        frontiers: &report.frontiers,
    };
    fs::write(dir.join(AGGREGATES_FILE), serde_json::to_string_pretty(&file)?)?;

    let mut w = csv::Writer::from_path(dir.join(PARETO_FILE))?;
    w.write_record(["corpus", "lambda", "base_ppl", "style_ppl"])?;
    for (corpus, points) in &report.frontiers {
        for p in points {
            w.write_record([corpus.clone(), p.lambda.to_string(), p.base_ppl.to_string(), p.style_ppl.to_string()])?;
        }
    }
    w.flush()?;

    for (name, svg) in charts(&report.aggregates) {
        fs::write(dir.join(name), svg)?;
    }
    Ok(())
}

type MetricGetter = fn(&Aggregate) -> Option<Stat>;

const METRICS: [(&str, MetricGetter); 5] = [
    ("style_ppl", |a| Some(a.style_ppl)),
    ("base_ppl", |a| Some(a.base_ppl)),
    ("mean_jsd_bits", |a| Some(a.mean_jsd_bits)),
    ("unigram_overlap", |a| Some(a.unigram_overlap)),
    ("bigram_seen", |a| a.bigram_seen),
];

/// One `(file name, svg)` per metric per corpus with at least one point.
pub fn charts(aggregates: &[AggregateRow]) -> Vec<(String, String)> {
    let mut by_corpus: BTreeMap<&str, Vec<&AggregateRow>> = BTreeMap::new();
    for a in aggregates {
        by_corpus.entry(&a.corpus).or_default().push(a);
    }
    let mut out = Vec::new();
    for (corpus, rows) in by_corpus {
        for (metric, get) in METRICS {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| Some((r.lambda, get(r.aggregate.as_ref()?)?.mean)))
                .filter(|(_, y)| y.is_finite())
                .collect();
            if pts.is_empty() {
                continue;
            }
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let file = format!("chart_{}_{metric}.svg", sanitize(corpus));
            out.push((file, line_chart(&format!("{corpus}: {metric} vs lambda"), metric, &pts)));
        }
    }
    out
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn line_chart(title: &str, y_label: &str, pts: &[(f64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let (mut y0, mut y1) =
        pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let x = |v: f64| L + v.clamp(0.0, 1.0) * (W - L - R);
    let y = |v: f64| H - B - (v - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<g stroke="black" stroke-width="1"><line x1="{L}" y1="{}" x2="{}" y2="{}"/><line x1="{L}" y1="{T}" x2="{L}" y2="{}"/></g>"#,
        H - B,
        W - R,
        H - B,
        H - B
    );
    for i in 0..=5 {
        let lx = i as f64 / 5.0;
        let ly = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{lx:.1}</text>"#,
            x(lx),
            H - B + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            L - 6.0,
            y(ly) + 4.0,
            fmt_tick(ly)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">lambda</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let path: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", x(a), y(b))).collect();
    let _ = writeln!(s, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##, path.join(" "));
    for &(a, b) in pts {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, x(a), y(b));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}
