//! Per-run summaries and the cross-seed comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cotrain_seg::metrics::{render_rows, MetricsTable};
use cotrain_seg::trainer::Mode;
use cotrain_seg::{Error, FormatError, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
const SUMMARY_HEADER: &str = "mode,seed,organ,dsc,hd";

/// Test metrics of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub table: MetricsTable,
}

impl RunSummary {
    /// One row per organ; DSC as a fraction at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for c in 0..self.table.organs() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.mode,
                self.seed,
                c + 1,
                self.table.dsc[c],
                self.table.hd[c]
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(FormatError::Invalid(m));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(SUMMARY_HEADER) {
            return Err(bad(format!("summary must start with {SUMMARY_HEADER:?}")));
        }
        let mut mode = None;
        let mut seed = None;
        let mut dsc = Vec::new();
        let mut hd = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            let row_err = || bad(format!("summary row {} is malformed: {line:?}", n + 1));
            if f.len() != 5 {
                return Err(row_err());
            }
            let m: Mode = f[0].parse().map_err(|_| row_err())?;
            let s: u64 = f[1].parse().map_err(|_| row_err())?;
            if mode.is_some_and(|x| x != m) || seed.is_some_and(|x| x != s) {
                return Err(bad("summary mixes several runs".into()));
            }
            mode = Some(m);
            seed = Some(s);
            let organ: usize = f[2].parse().map_err(|_| row_err())?;
            if organ != dsc.len() + 1 {
                return Err(row_err());
            }
            dsc.push(f[3].parse().map_err(|_| row_err())?);
            hd.push(f[4].parse().map_err(|_| row_err())?);
        }
        match (mode, seed) {
            (Some(mode), Some(seed)) => Ok(Self {
                mode,
                seed,
                table: MetricsTable { dsc, hd },
            }),
            _ => Err(bad("summary has no rows".into())),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(SUMMARY_FILE), self.to_csv())?;
        Ok(())
    }
}

/// Every `summary.csv` at or below `root`, in sorted path order.
pub fn find_summaries(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if root.is_file() {
        found.push(root.to_path_buf());
    } else if root.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(root)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() {
                found.extend(find_summaries(&e)?);
            } else if e.file_name().is_some_and(|n| n == SUMMARY_FILE) {
                found.push(e);
            }
        }
    } else {
        return Err(Error::Config(format!(
            "run path {} does not exist",
            root.display()
        )));
    }
    Ok(found)
}

pub fn load_summaries(paths: &[PathBuf]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for p in paths {
        for file in find_summaries(p)? {
            out.push(RunSummary::parse(&fs::read_to_string(&file)?)?);
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cross-seed statistics of one mode, in DSC percentage points.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeRow {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Per organ `(mean, std)`.
    pub organs: Vec<(f64, f64)>,
    pub avg: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub organs: usize,
    /// One entry per mode in report order; `None` marks an absent mode.
    pub rows: Vec<(Mode, Option<ModeRow>)>,
}

impl AblationReport {
    pub fn row(&self, mode: Mode) -> Option<&ModeRow> {
        self.rows
            .iter()
            .find(|(m, _)| *m == mode)
            .and_then(|(_, r)| r.as_ref())
    }

    /// Mean Avg-DSC of a mode in percentage points.
    pub fn avg_dsc(&self, mode: Mode) -> Option<f64> {
        self.row(mode).map(|r| r.avg.0)
    }

    pub fn to_text(&self) -> String {
        let mut rows = vec![{
            let mut h = vec!["mode".to_string(), "seeds".into()];
            h.extend((1..=self.organs).map(|c| format!("organ {c} DSC")));
            h.push("Avg DSC".into());
            h
        }];
        let pm = |(m, s): (f64, f64)| format!("{m:.2} ± {s:.2}");
        for (mode, row) in &self.rows {
            let mut r = vec![mode.to_string()];
            match row {
                Some(row) => {
                    r.push(row.seeds.len().to_string());
                    r.extend(row.organs.iter().map(|&v| pm(v)));
                    r.push(pm(row.avg));
                }
                None => {
                    r.push("0".into());
                    r.extend((0..=self.organs).map(|_| "absent".to_string()));
                }
            }
            rows.push(r);
        }
        render_rows(&rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seeds");
        for c in 1..=self.organs {
            let _ = write!(out, ",organ_{c}_mean,organ_{c}_std");
        }
        out.push_str(",avg_mean,avg_std\n");
        for (mode, row) in &self.rows {
            out.push_str(mode.as_str());
            match row {
                Some(row) => {
                    let _ = write!(out, ",{}", row.seeds.len());
                    for (m, s) in row.organs.iter().chain([&row.avg]) {
                        let _ = write!(out, ",{m:.2},{s:.2}");
                    }
                }
                None => {
                    out.push_str(",0");
                    for _ in 0..=self.organs {
                        out.push_str(",absent,absent");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Groups runs by mode (fixed report order) and aggregates across seeds.
pub fn emit_ablation_report(runs: &[RunSummary]) -> Result<AblationReport> {
    let organs = runs.first().map_or(0, |r| r.table.organs());
    if let Some(r) = runs.iter().find(|r| r.table.organs() != organs) {
        return Err(Error::Data(format!(
            "run {} (seed {}) has {} organs, others have {organs}",
            r.mode,
            r.seed,
            r.table.organs()
        )));
    }
    let mut by_mode: BTreeMap<Mode, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_mode.entry(r.mode).or_default().push(r);
    }
    let rows = Mode::ALL
        .into_iter()
        .map(|mode| {
            let row = by_mode.get(&mode).map(|group| {
                let mut group = group.clone();
                group.sort_by_key(|r| r.seed);
                let organ_stats = (0..organs)
                    .map(|c| {
                        let v: Vec<f64> = group.iter().map(|r| 100.0 * r.table.dsc[c]).collect();
                        mean_std(&v)
                    })
                    .collect();
                let avgs: Vec<f64> = group.iter().map(|r| 100.0 * r.table.avg_dsc()).collect();
                ModeRow {
                    mode,
                    seeds: group.iter().map(|r| r.seed).collect(),
                    organs: organ_stats,
                    avg: mean_std(&avgs),
                }
            });
            (mode, row)
        })
        .collect();
    Ok(AblationReport { organs, rows })
}
