//! Campaign reports and their plain, CSV and JSON renderings.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use civfuzz_core::crash::{Arbitrariness, CivClass, CrashRecord, Verdict};
use civfuzz_core::iface::Direction;
use civfuzz_core::wire::AccessKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub reached: u64,
    pub total: u64,
}

impl Coverage {
    /// Whole percent, rounded down.
    pub fn percent(&self) -> u64 {
        (self.reached * 100).checked_div(self.total).unwrap_or(0)
    }
}

impl std::fmt::Display for Coverage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}% ({}/{})", self.percent(), self.reached, self.total)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpactCell {
    pub count: u64,
    /// Crashes whose faulty address follows the altered value.
    pub arbitrary: u64,
}

impl ImpactCell {
    fn add(&mut self, other: ImpactCell) {
        self.count += other.count;
        self.arbitrary += other.arbitrary;
    }
}

impl std::fmt::Display for ImpactCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.count, self.arbitrary)
    }
}

/// Unique valid crashes by access kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impact {
    pub read: ImpactCell,
    pub write: ImpactCell,
    pub exec: ImpactCell,
    pub alloc: ImpactCell,
    pub null: ImpactCell,
    pub deadlock: ImpactCell,
}

impl Impact {
    /// Histogram over `crashes`; anything but valid crashes is skipped.
    pub fn of<'a>(crashes: impl IntoIterator<Item = &'a CrashRecord>) -> Impact {
        let mut impact = Impact::default();
        for c in crashes.into_iter().filter(|c| c.is_valid()) {
            let cell = impact.cell_mut(c.access);
            cell.count += 1;
            if c.arbitrary == Some(Arbitrariness::Arbitrary) {
                cell.arbitrary += 1;
            }
        }
        impact
    }

    pub fn cell_mut(&mut self, access: AccessKind) -> &mut ImpactCell {
        match access {
            AccessKind::Read => &mut self.read,
            AccessKind::Write => &mut self.write,
            AccessKind::Exec => &mut self.exec,
            AccessKind::AllocMisuse => &mut self.alloc,
            AccessKind::NullDeref => &mut self.null,
            AccessKind::DeadlockTimeout => &mut self.deadlock,
        }
    }

    pub fn cells(&self) -> [(&'static str, ImpactCell); 6] {
        [
            ("read", self.read),
            ("write", self.write),
            ("exec", self.exec),
            ("alloc", self.alloc),
            ("null", self.null),
            ("deadlock", self.deadlock),
        ]
    }

    fn add(&mut self, other: &Impact) {
        self.read.add(other.read);
        self.write.add(other.write);
        self.exec.add(other.exec);
        self.alloc.add(other.alloc);
        self.null.add(other.null);
        self.deadlock.add(other.deadlock);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub scenario: String,
    /// Component exposing the fuzzed API.
    pub api: String,
    pub trust_model: Direction,
    pub runs: u64,
    /// Runs whose session broke down; their coverage is not counted.
    pub discarded_runs: u64,
    pub capped_runs: u64,
    pub replays: u64,
    /// Valid crash reports before deduplication.
    pub raw: u64,
    /// Unique valid crash keys.
    pub dedup: u64,
    pub raw_false_positives: u64,
    pub false_positives: u64,
    pub raw_unattributable: u64,
    pub unattributable: u64,
    pub non_reproducible: u64,
    pub victims: u64,
    pub victim_components: Vec<String>,
    pub callers: u64,
    pub caller_components: Vec<String>,
    pub coverage: Coverage,
    pub reached_functions: Vec<String>,
    pub impact: Impact,
    pub threshold: u64,
    pub saturated: bool,
    pub crashes: Vec<CrashRecord>,
    pub wall_clock_ms: u64,
}

impl CampaignReport {
    /// The report as JSON with timing zeroed, for comparing campaigns.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_ms = 0;
        serde_json::to_string(&r).expect("report serializes")
    }

    pub fn row(&self) -> Row {
        Row {
            trust_model: Some(self.trust_model),
            scenario: self.scenario.clone(),
            api: self.api.clone(),
            raw: self.raw,
            dedup: self.dedup,
            victims: self.victims,
            callers: self.callers,
            coverage: self.coverage,
            impact: self.impact,
        }
    }
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub trust_model: Option<Direction>,
    pub scenario: String,
    pub api: String,
    pub raw: u64,
    pub dedup: u64,
    pub victims: u64,
    pub callers: u64,
    pub coverage: Coverage,
    pub impact: Impact,
}

impl Row {
    /// Column sums over `rows`, coverage included.
    pub fn totals<'a>(rows: impl IntoIterator<Item = &'a Row>) -> Row {
        let mut t = Row {
            trust_model: None,
            scenario: "Total".into(),
            api: String::new(),
            raw: 0,
            dedup: 0,
            victims: 0,
            callers: 0,
            coverage: Coverage::default(),
            impact: Impact::default(),
        };
        for r in rows {
            t.raw += r.raw;
            t.dedup += r.dedup;
            t.victims += r.victims;
            t.callers += r.callers;
            t.coverage.reached += r.coverage.reached;
            t.coverage.total += r.coverage.total;
            t.impact.add(&r.impact);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    /// Columns separated by ` & `, one line per scenario.
    #[value(name = "table", alias = "plain")]
    Plain,
    Csv,
    Json,
}

const HEADER: [&str; 14] = [
    "TM", "Scenario", "API", "Raw", "Dedup", "Victims", "Callers", "Coverage", "Read", "Write", "Exec", "Alloc",
    "Null", "Deadlock",
];

fn tm(d: Option<Direction>) -> &'static str {
    match d {
        Some(Direction::Sandbox) => "sandbox",
        Some(Direction::Safebox) => "safebox",
        None => "",
    }
}

fn plain_line(r: &Row) -> String {
    let mut cells = vec![
        tm(r.trust_model).to_string(),
        r.scenario.clone(),
        r.api.clone(),
        r.raw.to_string(),
        r.dedup.to_string(),
        r.victims.to_string(),
        r.callers.to_string(),
        r.coverage.to_string(),
    ];
    cells.extend(r.impact.cells().iter().map(|(_, c)| c.to_string()));
    cells.join(" & ")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(r: &Row) -> String {
    let mut cells = vec![
        csv_field(tm(r.trust_model)),
        csv_field(&r.scenario),
        csv_field(&r.api),
        r.raw.to_string(),
        r.dedup.to_string(),
        r.victims.to_string(),
        r.callers.to_string(),
        r.coverage.reached.to_string(),
        r.coverage.total.to_string(),
        r.coverage.percent().to_string(),
    ];
    for (_, c) in r.impact.cells() {
        cells.push(c.count.to_string());
        cells.push(c.arbitrary.to_string());
    }
    cells.join(",")
}

fn csv_header() -> String {
    let mut cols: Vec<String> = [
        "trust_model",
        "scenario",
        "api",
        "raw",
        "dedup",
        "victims",
        "callers",
        "coverage_reached",
        "coverage_total",
        "coverage_percent",
    ]
    .map(String::from)
    .to_vec();
    for (name, _) in Impact::default().cells() {
        cols.push(name.to_string());
        cols.push(format!("{name}_arbitrary"));
    }
    cols.join(",")
}

#[derive(Serialize)]
struct JsonTable<'a> {
    rows: &'a [Row],
    totals: &'a Row,
}

/// Renders the summary table for `reports`, followed by a totals row.
pub fn emit_table(reports: &[CampaignReport], format: Format) -> String {
    let rows: Vec<Row> = reports.iter().map(CampaignReport::row).collect();
    let totals = Row::totals(&rows);
    let mut out = String::new();
    match format {
        Format::Plain => {
            let _ = writeln!(out, "{}", HEADER.join(" & "));
            for r in rows.iter().chain([&totals]) {
                let _ = writeln!(out, "{}", plain_line(r));
            }
        }
        Format::Csv => {
            let _ = writeln!(out, "{}", csv_header());
            for r in rows.iter().chain([&totals]) {
                let _ = writeln!(out, "{}", csv_line(r));
            }
        }
        Format::Json => {
            out = serde_json::to_string_pretty(&JsonTable {
                rows: &rows,
                totals: &totals,
            })
            .expect("table serializes");
            out.push('\n');
        }
    }
    out
}

/// One entry of `crashes/index.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: String,
    pub file: String,
    pub verdict: Verdict,
    pub classes: BTreeSet<CivClass>,
    pub access: AccessKind,
    pub arbitrary: Option<Arbitrariness>,
    pub minimized_size: Option<usize>,
    pub reproduced: bool,
    pub occurrences: u64,
}

pub fn index_entry(c: &CrashRecord) -> IndexEntry {
    IndexEntry {
        key: c.key.clone(),
        file: format!("{}.json", c.key),
        verdict: c.verdict.clone(),
        classes: c.civ_classes.clone(),
        access: c.access,
        arbitrary: c.arbitrary,
        minimized_size: c.minimized.as_ref().map(|m| m.len()),
        reproduced: c.reproduced,
        occurrences: c.occurrences,
    }
}

/// Writes `crashes/<key>.json` for every crash of `report` and
/// `crashes/index.json` listing them.
pub fn write_crash_bundle(dir: &Path, report: &CampaignReport) -> std::io::Result<()> {
    let crashes = dir.join("crashes");
    std::fs::create_dir_all(&crashes)?;
    let mut index = Vec::with_capacity(report.crashes.len());
    for c in &report.crashes {
        let entry = index_entry(c);
        std::fs::write(crashes.join(&entry.file), serde_json::to_string_pretty(c)?)?;
        index.push(entry);
    }
    std::fs::write(crashes.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Reads `DIR/report.json`, or the `report.json` of every immediate
/// subdirectory of `DIR` in name order.
pub fn load_reports(dir: &Path) -> anyhow::Result<Vec<CampaignReport>> {
    use anyhow::Context;

    let read = |p: &Path| -> anyhow::Result<CampaignReport> {
        let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed report {}", p.display()))
    };
    let single = dir.join("report.json");
    if single.is_file() {
        return Ok(vec![read(&single)?]);
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("report.json"))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| read(p)).collect()
}
