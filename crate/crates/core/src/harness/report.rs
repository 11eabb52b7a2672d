//! Aggregation of per-seed result rows into tables, plot data and rank
//! correlations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::spearman;

/// One (objective, transform, task, seed) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub objective: String,
    pub transform: String,
    pub task: String,
    #[serde(rename = "B_S")]
    pub b_s: f64,
    #[serde(rename = "B_Z")]
    pub b_z: f64,
    /// B_S − B_Z, or a supplied value that differs from it only by the
    /// rounding of the two scores.
    pub delta: f64,
    pub alignment: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ReportRow {
    pub fn new(objective: &str, transform: &str, task: &str, seed: u64, b_s: f64, b_z: f64, alignment: f64) -> Self {
        ReportRow {
            objective: objective.into(),
            transform: transform.into(),
            task: task.into(),
            b_s,
            b_z,
            delta: b_s - b_z,
            alignment,
            seed,
        }
    }

    fn cell(&self) -> (String, String) {
        (self.objective.clone(), self.transform.clone())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!("is_io_error implies an Io kind");
    }
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        reason: e.to_string(),
    }
}

#[derive(Deserialize)]
struct RawRow {
    objective: String,
    transform: String,
    task: String,
    #[serde(rename = "B_S")]
    b_s: f64,
    #[serde(rename = "B_Z")]
    b_z: f64,
    delta: Option<f64>,
    alignment: f64,
    #[serde(default)]
    seed: u64,
}

/// Largest accepted gap between a supplied Δ and B_S − B_Z: both scores
/// rounded to one decimal.
pub const DELTA_ROUNDING: f64 = 0.1;

/// Reads rows with header `objective,transform,task,B_S,B_Z[,delta],alignment[,seed]`.
/// A missing or empty `delta` is computed as B_S − B_Z. A supplied one is
/// kept, since published Δ values come from unrounded scores, but must lie
/// within [`DELTA_ROUNDING`] of B_S − B_Z.
pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<RawRow>().enumerate() {
        let raw = rec.map_err(|e| csv_err(path, e))?;
        let computed = raw.b_s - raw.b_z;
        let delta = match raw.delta {
            Some(d) if (d - computed).abs() > DELTA_ROUNDING + 1e-9 => {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line: i + 2,
                    reason: format!("delta {d} is inconsistent with B_S - B_Z = {computed:.4}"),
                })
            }
            Some(d) => d,
            None => computed,
        };
        rows.push(ReportRow {
            objective: raw.objective,
            transform: raw.transform,
            task: raw.task,
            b_s: raw.b_s,
            b_z: raw.b_z,
            delta,
            alignment: raw.alignment,
            seed: raw.seed,
        });
    }
    Ok(rows)
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.4}")
    }
}

fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Config(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

pub fn rows_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    to_csv(
        &["objective", "transform", "task", "B_S", "B_Z", "delta", "alignment", "seed"],
        rows.iter().map(|r| {
            vec![
                r.objective.clone(),
                r.transform.clone(),
                r.task.clone(),
                num(r.b_s),
                num(r.b_z),
                num(r.delta),
                num(r.alignment),
                r.seed.to_string(),
            ]
        }),
    )
}

/// Mean over seeds of one (objective, transform, task) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMean {
    pub objective: String,
    pub transform: String,
    pub task: String,
    pub b_s: f64,
    pub b_z: f64,
    /// Mean of the per-seed Δ.
    pub delta: f64,
    pub alignment: f64,
    /// Sample standard deviation of the per-seed Δ; 0 for one seed.
    pub delta_std: f64,
    pub n_seeds: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn first_seen<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    it.filter(|s| seen.insert(s.to_string())).map(str::to_string).collect()
}

/// Seed means, in order of first appearance of each cell. Duplicate
/// (cell, seed) rows are rejected.
pub fn cell_means(rows: &[ReportRow]) -> Result<Vec<CellMean>> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.objective.clone(), r.transform.clone(), r.task.clone());
        let g = groups.entry(key.clone()).or_default();
        if g.is_empty() {
            order.push(key.clone());
        }
        if g.iter().any(|x| x.seed == r.seed) {
            return Err(Error::Schema {
                index: 0,
                reason: format!("duplicate row for {} / {} / {} seed {}", r.objective, r.transform, r.task, r.seed),
            });
        }
        g.push(r);
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let mut g = groups[&key].clone();
            g.sort_by_key(|r| r.seed);
            let col = |f: fn(&ReportRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (b_s, b_z) = (mean(&col(|r| r.b_s)), mean(&col(|r| r.b_z)));
            CellMean {
                objective: key.0,
                transform: key.1,
                task: key.2,
                b_s,
                b_z,
                delta: mean(&col(|r| r.delta)),
                alignment: mean(&col(|r| r.alignment)),
                delta_std: std(&col(|r| r.delta)),
                n_seeds: g.len(),
            }
        })
        .collect())
}

pub fn tables_csv(means: &[CellMean]) -> Result<Vec<u8>> {
    to_csv(
        &["objective", "transform", "task", "B_S", "B_Z", "delta", "alignment"],
        means.iter().map(|m| {
            vec![
                m.objective.clone(),
                m.transform.clone(),
                m.task.clone(),
                num(m.b_s),
                num(m.b_z),
                num(m.delta),
                num(m.alignment),
            ]
        }),
    )
}

/// Figure 2 data: Δ per (task, transform, objective). Every objective ×
/// transform cell of a task must be present or listed in `absent`.
pub fn figure2_csv(means: &[CellMean], absent: &BTreeSet<(String, String)>) -> Result<Vec<u8>> {
    let objectives = first_seen(means.iter().map(|m| m.objective.as_str()).chain(absent.iter().map(|(o, _)| o.as_str())));
    let transforms = first_seen(means.iter().map(|m| m.transform.as_str()).chain(absent.iter().map(|(_, t)| t.as_str())));
    let tasks = first_seen(means.iter().map(|m| m.task.as_str()));
    let mut out = Vec::new();
    for task in &tasks {
        for t in &transforms {
            for o in &objectives {
                match means.iter().find(|m| &m.task == task && &m.transform == t && &m.objective == o) {
                    Some(m) => out.push(vec![task.clone(), t.clone(), o.clone(), num(m.delta), num(m.delta_std), m.n_seeds.to_string(), "present".into()]),
                    None if absent.contains(&(o.clone(), t.clone())) => {
                        out.push(vec![task.clone(), t.clone(), o.clone(), String::new(), String::new(), "0".into(), "absent".into()])
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "grid incomplete: no {o} / {t} result for {task} (mark it absent to omit it)"
                        )))
                    }
                }
            }
        }
    }
    to_csv(&["task", "transform", "objective", "delta", "delta_std", "n_seeds", "status"], out)
}

pub fn scatter_csv(means: &[CellMean]) -> Result<Vec<u8>> {
    to_csv(
        &["task", "objective", "transform", "alignment", "delta", "neg_delta"],
        means.iter().map(|m| vec![m.task.clone(), m.objective.clone(), m.transform.clone(), num(m.alignment), num(m.delta), num(-m.delta)]),
    )
}

/// Spearman ρ between alignment and −Δ over one task's cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlation {
    pub n: usize,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Per-task correlations. A task whose ρ cannot be computed (fewer than
/// three cells, constant values) carries the reason instead of failing.
pub fn correlations(means: &[CellMean]) -> BTreeMap<String, Correlation> {
    let mut out = BTreeMap::new();
    for task in first_seen(means.iter().map(|m| m.task.as_str())) {
        let cells: Vec<&CellMean> = means.iter().filter(|m| m.task == task).collect();
        let align: Vec<f64> = cells.iter().map(|m| m.alignment).collect();
        let transfer: Vec<f64> = cells.iter().map(|m| -m.delta).collect();
        let c = match spearman(&align, &transfer) {
            Ok((rho, p)) => Correlation { n: cells.len(), rho: Some(rho), p_value: Some(p), error: None },
            Err(e) => Correlation { n: cells.len(), rho: None, p_value: None, error: Some(e.to_string()) },
        };
        out.insert(task, c);
    }
    out
}

fn correlations_json(c: &BTreeMap<String, Correlation>) -> Result<Vec<u8>> {
    let rounded: BTreeMap<&String, Correlation> = c
        .iter()
        .map(|(k, v)| {
            (
                k,
                Correlation {
                    rho: v.rho.map(round6),
                    p_value: v.p_value.map(round6),
                    ..v.clone()
                },
            )
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&rounded)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Files written by [`write_report`].
pub const REPORT_FILES: [&str; 5] = ["rows.csv", "tables.csv", "figure2_data.csv", "scatter_data.csv", "correlations.json"];

#[derive(Debug, Clone)]
pub struct Report {
    pub means: Vec<CellMean>,
    pub correlations: BTreeMap<String, Correlation>,
    pub files: Vec<PathBuf>,
}

/// Writes the per-seed rows, seed-mean table, Figure 2 and scatter data, and
/// correlations into `dir`. Fails before writing anything if the grid is
/// incomplete.
pub fn write_report(rows: &[ReportRow], absent: &BTreeSet<(String, String)>, dir: &Path) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::Config("no result rows to report".into()));
    }
    if let Some(r) = rows.iter().find(|r| !(r.b_s.is_finite() && r.b_z.is_finite() && r.delta.is_finite())) {
        return Err(Error::NonFinite(format!("scores of {} / {} / {}", r.objective, r.transform, r.task)));
    }
    for r in rows {
        if absent.contains(&r.cell()) {
            return Err(Error::Config(format!("{} / {} is marked absent but has results", r.objective, r.transform)));
        }
    }
    let means = cell_means(rows)?;
    let contents = [
        rows_csv(rows)?,
        tables_csv(&means)?,
        figure2_csv(&means, absent)?,
        scatter_csv(&means)?,
        correlations_json(&correlations(&means))?,
    ];
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, bytes) in REPORT_FILES.iter().zip(contents) {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        files.push(path);
    }
    Ok(Report { correlations: correlations(&means), means, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(o: &str, t: &str, task: &str, seed: u64, bs: f64, bz: f64, a: f64) -> ReportRow {
        ReportRow::new(o, t, task, seed, bs, bz, a)
    }

    #[test]
    fn means_average_over_seeds() {
        let rows = vec![row("MLM", "Trans", "NER", 0, 80.0, 60.0, 10.0), row("MLM", "Trans", "NER", 1, 70.0, 40.0, 20.0)];
        let m = cell_means(&rows).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].b_s, m[0].b_z, m[0].delta, m[0].alignment), (75.0, 50.0, 25.0, 15.0));
        assert!((m[0].delta_std - 50f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn duplicate_seed_is_rejected() {
        let rows = vec![row("MLM", "Trans", "NER", 0, 1.0, 0.0, 0.0), row("MLM", "Trans", "NER", 0, 2.0, 0.0, 0.0)];
        assert!(cell_means(&rows).is_err());
    }

    #[test]
    fn incomplete_grid_needs_absent_marks() {
        let rows = vec![
            row("MLM", "Trans", "NER", 0, 1.0, 0.0, 0.0),
            row("XLM", "Inv", "NER", 0, 1.0, 0.0, 0.0),
        ];
        let means = cell_means(&rows).unwrap();
        assert!(figure2_csv(&means, &BTreeSet::new()).is_err());
        let absent: BTreeSet<_> = [("MLM".to_string(), "Inv".to_string()), ("XLM".to_string(), "Trans".to_string())].into();
        let text = String::from_utf8(figure2_csv(&means, &absent).unwrap()).unwrap();
        assert_eq!(text.lines().filter(|l| l.ends_with("absent")).count(), 2);
    }

    #[test]
    fn single_row_reports_a_correlation_error() {
        let dir = tempfile::tempdir().unwrap();
        let rep = write_report(&[row("MLM", "Trans", "NER", 0, 90.0, 50.0, 1.0)], &BTreeSet::new(), dir.path()).unwrap();
        let c = &rep.correlations["NER"];
        assert!(c.rho.is_none() && c.error.is_some());
        let json = std::fs::read_to_string(dir.path().join("correlations.json")).unwrap();
        assert!(json.contains("error"));
    }

    #[test]
    fn read_rows_keeps_a_supplied_delta_within_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.csv");
        let head = "objective,transform,task,B_S,B_Z,delta,alignment\n";
        std::fs::write(&p, format!("{head}XLM,Trans+Inv,NER,80.0,60.7,19.4,85.6\nMLM,Trans,NER,80.0,60.7,,1\n")).unwrap();
        let rows = read_rows(&p).unwrap();
        assert_eq!(rows[0].delta, 19.4);
        assert_eq!(rows[1].delta, 80.0 - 60.7);
        assert_eq!(rows[0].seed, 0);
        let t = String::from_utf8(tables_csv(&cell_means(&rows).unwrap()).unwrap()).unwrap();
        assert_eq!(t.lines().nth(1).unwrap(), "XLM,Trans+Inv,NER,80.0000,60.7000,19.4000,85.6000");

        std::fs::write(&p, format!("{head}XLM,Trans+Inv,NER,80.0,60.7,19.5,85.6\n")).unwrap();
        assert!(matches!(read_rows(&p), Err(Error::Malformed { line: 2, .. })));
        std::fs::write(&p, "objective,transform,task,B_S,B_Z,alignment\nXLM,Trans,NER,80.0,60.7,1\n").unwrap();
        assert_eq!(read_rows(&p).unwrap()[0].delta, 80.0 - 60.7);
    }

    #[test]
    fn malformed_rows_are_reported_with_a_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.csv");
        std::fs::write(&p, "objective,transform,task,B_S,B_Z,alignment\nMLM,Trans,NER,x,1,2\n").unwrap();
        assert!(matches!(read_rows(&p), Err(Error::Malformed { line: 2, .. })));
    }
}
