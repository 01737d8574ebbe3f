//! Leaderboard rows, ranking and the markdown/csv/json emitters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Raw rows written next to the run artifacts; `bench report` reads this.
pub const ROWS_FILE: &str = "rows.json";

/// Columns of every leaderboard table, in order.
pub const COLUMNS: [&str; 9] = [
    "Importance",
    "Regularizer",
    "Rank",
    "Base",
    "Pruned",
    "ΔAcc",
    "Parameters",
    "Step Time",
    "Reg Time",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub speedup: f64,
    pub importance: String,
    /// `None` for criterion-only rows.
    pub regularizer: Option<String>,
    pub stochastic: bool,
    pub rank: Option<usize>,
    /// Accuracies in percent.
    pub base: f64,
    pub pruned: f64,
    pub delta: f64,
    pub params: u64,
    pub params_pct: f64,
    /// Seconds per pruning step.
    pub step_time: f64,
    /// Seconds per sparse-learning epoch.
    pub reg_time: Option<f64>,
    pub flops_pct: f64,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LeaderboardRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn importance_label(&self) -> String {
        if self.stochastic {
            format!("{}*", self.importance)
        } else {
            self.importance.clone()
        }
    }

    pub fn regularizer_label(&self) -> &str {
        self.regularizer.as_deref().unwrap_or("N/A")
    }

    /// The row with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> LeaderboardRow {
        LeaderboardRow {
            step_time: 0.0,
            reg_time: self.reg_time.map(|_| 0.0),
            ..self.clone()
        }
    }
}

pub fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Assigns ranks within each (speedup, section) by ΔAcc descending; ties go to
/// the smaller parameter count, then the name. Failed rows stay unranked and
/// sort last.
pub fn rank_rows(rows: &mut [LeaderboardRow]) {
    rows.sort_by(|a, b| {
        a.speedup
            .total_cmp(&b.speedup)
            .then(a.regularizer.is_some().cmp(&b.regularizer.is_some()))
            .then(a.failed().cmp(&b.failed()))
            .then(b.delta.total_cmp(&a.delta))
            .then(a.params.cmp(&b.params))
            .then(a.importance.cmp(&b.importance))
            .then(a.regularizer.cmp(&b.regularizer))
    });
    let mut prev: Option<(u64, bool)> = None;
    let mut next = 0;
    for r in rows.iter_mut() {
        let key = (r.speedup.to_bits(), r.regularizer.is_some());
        if prev != Some(key) {
            prev = Some(key);
            next = 0;
        }
        if r.failed() {
            r.rank = None;
        } else {
            next += 1;
            r.rank = Some(next);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Markdown => "md",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown report format `{s}` (md, csv, json)"))),
        }
    }
}

fn fmt2(x: f64) -> String {
    format!("{:.2}", round_to(x, 2))
}

fn fmt_time(x: f64) -> String {
    format!("{:.4}", round_to(x, 4))
}

fn signed2(x: f64) -> String {
    let r = round_to(x, 2);
    if r > 0.0 {
        format!("+{r:.2}")
    } else {
        format!("{:.2}", r + 0.0)
    }
}

fn speedup_label(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{}x", s as u64)
    } else {
        format!("{s}x")
    }
}

fn sections(rows: &[LeaderboardRow]) -> Vec<(f64, Vec<&LeaderboardRow>, Vec<&LeaderboardRow>)> {
    let mut speedups: Vec<f64> = rows.iter().map(|r| r.speedup).collect();
    speedups.sort_by(f64::total_cmp);
    speedups.dedup();
    speedups
        .into_iter()
        .map(|s| {
            let (reg, crit): (Vec<_>, Vec<_>) = rows.iter().filter(|r| r.speedup == s).partition(|r| r.regularizer.is_some());
            (s, crit, reg)
        })
        .collect()
}

fn md_cells(r: &LeaderboardRow) -> Vec<String> {
    let rank = r.rank.map_or("-".to_string(), |k| k.to_string());
    if r.failed() {
        let mut v = vec![r.importance_label(), r.regularizer_label().to_string(), rank, fmt2(r.base)];
        v.extend(std::iter::repeat_n("failed".to_string(), 5));
        return v;
    }
    vec![
        r.importance_label(),
        r.regularizer_label().to_string(),
        rank,
        fmt2(r.base),
        fmt2(r.pruned),
        signed2(r.delta),
        format!("{} ({}%)", r.params, fmt2(r.params_pct)),
        format!("{}s", fmt_time(r.step_time)),
        r.reg_time.map_or("N/A".to_string(), |t| format!("{}s", fmt_time(t))),
    ]
}

fn md_table(out: &mut String, title: &str, rows: &[&LeaderboardRow]) {
    if rows.is_empty() {
        return;
    }
    let _ = writeln!(out, "### {title}\n");
    let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(COLUMNS.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", md_cells(r).join(" | "));
    }
    out.push('\n');
}

fn markdown(rows: &[LeaderboardRow]) -> String {
    let mut out = String::from("# Leaderboard\n\n");
    for (s, crit, reg) in sections(rows) {
        let flops: Vec<String> = crit.iter().chain(&reg).filter(|r| !r.failed()).map(|r| fmt2(r.flops_pct)).collect();
        let _ = writeln!(out, "## {} speedup\n", speedup_label(s));
        if !flops.is_empty() {
            let lo = flops.iter().min_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse().unwrap())).unwrap();
            let hi = flops.iter().max_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse().unwrap())).unwrap();
            let _ = writeln!(out, "Retained FLOPs: {lo}% to {hi}% of the original.\n");
        }
        md_table(&mut out, "Importance criteria", &crit);
        md_table(&mut out, "Sparsity regularizers", &reg);
        let failed: Vec<_> = crit.iter().chain(&reg).filter(|r| r.failed()).collect();
        if !failed.is_empty() {
            out.push_str("Failed cells:\n\n");
            for r in failed {
                let _ = writeln!(
                    out,
                    "- {} / {}: {}",
                    r.importance,
                    r.regularizer_label(),
                    r.error.as_deref().unwrap_or_default()
                );
            }
            out.push('\n');
        }
    }
    out.push_str("`*` marks methods with stochastic behaviour; their numbers are means over seeds.\n");
    out
}

fn json_record(r: &LeaderboardRow) -> Map<String, Value> {
    let num = |x: f64, d: i32| -> Value { if r.failed() { Value::Null } else { json!(round_to(x, d)) } };
    let mut m = Map::new();
    m.insert("Speedup".into(), json!(r.speedup));
    m.insert("Importance".into(), json!(r.importance_label()));
    m.insert("Regularizer".into(), json!(r.regularizer_label()));
    m.insert("Rank".into(), r.rank.map_or(Value::Null, |k| json!(k)));
    m.insert("Base".into(), json!(round_to(r.base, 2)));
    m.insert("Pruned".into(), num(r.pruned, 2));
    m.insert("ΔAcc".into(), num(r.delta, 2));
    m.insert("Parameters".into(), if r.failed() { Value::Null } else { json!(r.params) });
    m.insert("Parameters %".into(), num(r.params_pct, 2));
    m.insert("Step Time".into(), num(r.step_time, 4));
    m.insert(
        "Reg Time".into(),
        match r.reg_time {
            Some(t) if !r.failed() => json!(round_to(t, 4)),
            _ => json!("N/A"),
        },
    );
    m.insert("FLOPs %".into(), num(r.flops_pct, 2));
    m.insert("Stochastic".into(), json!(r.stochastic));
    m.insert("Status".into(), json!(r.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {e}"))));
    m
}

/// Field order shared by the csv header and the json records.
pub const RECORD_FIELDS: [&str; 14] = [
    "Speedup",
    "Importance",
    "Regularizer",
    "Rank",
    "Base",
    "Pruned",
    "ΔAcc",
    "Parameters",
    "Parameters %",
    "Step Time",
    "Reg Time",
    "FLOPs %",
    "Stochastic",
    "Status",
];

fn ordered(rows: &[LeaderboardRow]) -> Vec<&LeaderboardRow> {
    sections(rows)
        .into_iter()
        .flat_map(|(_, c, r)| c.into_iter().chain(r))
        .collect()
}

fn csv_text(rows: &[LeaderboardRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(RECORD_FIELDS).map_err(csv_err)?;
    for r in ordered(rows) {
        let rec = json_record(r);
        let cells: Vec<String> = RECORD_FIELDS
            .iter()
            .map(|k| match &rec[*k] {
                Value::Null => String::new(),
                Value::String(s) => s.clone(),
                v => v.to_string(),
            })
            .collect();
        w.write_record(&cells).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Renders the leaderboard. Rows should already be ranked.
pub fn render(rows: &[LeaderboardRow], format: Format) -> Result<String> {
    match format {
        Format::Markdown => Ok(markdown(rows)),
        Format::Csv => csv_text(rows),
        Format::Json => {
            let recs: Vec<Value> = ordered(rows).into_iter().map(|r| Value::Object(json_record(r))).collect();
            Ok(serde_json::to_string_pretty(&recs)? + "\n")
        }
    }
}

pub fn emit_leaderboard(rows: &[LeaderboardRow], format: Format, path: &Path) -> Result<()> {
    let text = render(rows, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_rows(rows: &[LeaderboardRow], dir: &Path) -> Result<()> {
    let path = dir.join(ROWS_FILE);
    fs::write(&path, serde_json::to_string_pretty(rows)?).map_err(|e| Error::io(&path, e))
}

/// Reads the rows of a finished run directory, re-ranked.
pub fn read_rows(dir: &Path) -> Result<Vec<LeaderboardRow>> {
    let path = dir.join(ROWS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows: Vec<LeaderboardRow> = serde_json::from_str(&text)?;
    rank_rows(&mut rows);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(name: &str, reg: Option<&str>, delta: f64, params: u64) -> LeaderboardRow {
        LeaderboardRow {
            speedup: 2.0,
            importance: name.into(),
            regularizer: reg.map(String::from),
            stochastic: name == "random",
            rank: None,
            base: 90.0,
            pruned: 90.0 + delta,
            delta,
            params,
            params_pct: 50.0,
            step_time: 0.01,
            reg_time: reg.map(|_| 0.5),
            flops_pct: 49.5,
            seeds: vec![0],
            error: None,
        }
    }

    #[test]
    fn ranks_by_delta_descending() {
        let mut rows = vec![row("b", None, -0.03, 10), row("a", None, 0.33, 10)];
        rank_rows(&mut rows);
        assert_eq!(rows[0].importance, "a");
        assert_eq!((rows[0].rank, rows[1].rank), (Some(1), Some(2)));
    }

    #[test]
    fn ties_prefer_fewer_params_then_name() {
        let mut rows = vec![row("c", None, 1.0, 20), row("b", None, 1.0, 10), row("a", None, 1.0, 20)];
        rank_rows(&mut rows);
        let names: Vec<_> = rows.iter().map(|r| r.importance.as_str()).collect();
        assert_eq!(names, ["b", "a", "c"]);
    }

    #[test]
    fn sections_rank_independently() {
        let mut rows = vec![
            row("a", None, 1.0, 1),
            row("a", Some("group_lasso"), 0.5, 1),
            row("b", Some("bnscale"), 2.0, 1),
        ];
        rows[2].speedup = 2.0;
        rank_rows(&mut rows);
        let ranks: Vec<_> = rows.iter().map(|r| (r.regularizer.clone(), r.rank)).collect();
        assert_eq!(
            ranks,
            vec![
                (None, Some(1)),
                (Some("bnscale".into()), Some(1)),
                (Some("group_lasso".into()), Some(2))
            ]
        );
    }

    #[test]
    fn failed_rows_are_unranked() {
        let mut bad = row("z", None, 5.0, 1);
        bad.error = Some("boom".into());
        let mut rows = vec![bad, row("a", None, -1.0, 1)];
        rank_rows(&mut rows);
        assert_eq!(rows[0].rank, Some(1));
        assert_eq!(rows[1].rank, None);
        let md = render(&rows, Format::Markdown).unwrap();
        assert!(md.contains("boom"));
    }

    #[test]
    fn empty_regularizer_section_is_omitted() {
        let mut rows = vec![row("a", None, 0.0, 1)];
        rank_rows(&mut rows);
        let md = render(&rows, Format::Markdown).unwrap();
        assert!(md.contains("Importance criteria"));
        assert!(!md.contains("Sparsity regularizers"));
    }

    #[test]
    fn stochastic_rows_carry_an_asterisk() {
        let mut rows = vec![row("random", None, 0.0, 1)];
        rank_rows(&mut rows);
        assert!(render(&rows, Format::Markdown).unwrap().contains("| random* |"));
        assert!(render(&rows, Format::Csv).unwrap().contains("random*"));
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(signed2(0.333), "+0.33");
        assert_eq!(signed2(-0.031), "-0.03");
        assert_eq!(signed2(-0.001), "0.00");
    }
}
