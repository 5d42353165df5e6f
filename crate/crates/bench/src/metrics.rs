//! Per-pair records and their aggregation into `results.csv` / `results.md`.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::config::Method;

pub const CSV_HEADER: [&str; 10] = [
    "method",
    "angle_deg",
    "rot_rmse_deg",
    "rot_median_deg",
    "trans_rmse",
    "trans_median",
    "cd_mean",
    "hd_mean",
    "n_pairs",
    "mean_ms",
];

/// Extra columns appended with `--extended`.
pub const EXTENDED_HEADER: [&str; 2] = ["rot_mean_deg", "trans_mean"];

/// Outcome of one registration call, one line of `pairs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub method: Method,
    pub angle_deg: f64,
    pub pair: String,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    /// Chamfer and Hausdorff distance between the registered source and the
    /// target.
    pub cd: f64,
    pub hd: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Zero when timing is disabled.
    pub wall_ms: f64,
    /// Set when the solver failed; the error metrics then describe the
    /// identity estimate.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub angle_deg: f64,
    pub rot_rmse_deg: f64,
    pub rot_median_deg: f64,
    pub trans_rmse: f64,
    pub trans_median: f64,
    pub cd_mean: f64,
    pub hd_mean: f64,
    pub n_pairs: usize,
    pub mean_ms: f64,
    pub rot_mean_deg: f64,
    pub trans_mean: f64,
}

pub fn rmse(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// One row per `(method, angle)` in the given order, built from the records
/// in their stored order.
pub fn aggregate(records: &[PairRecord], methods: &[Method], angles: &[f64]) -> Vec<MetricsRow> {
    let mut rows = Vec::with_capacity(methods.len() * angles.len());
    for &method in methods {
        for &angle in angles {
            let group: Vec<&PairRecord> = records
                .iter()
                .filter(|r| r.method == method && r.angle_deg.to_bits() == angle.to_bits())
                .collect();
            let col = |f: fn(&PairRecord) -> f64| group.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let rot = col(|r| r.rot_err_deg);
            let trans = col(|r| r.trans_err);
            rows.push(MetricsRow {
                method,
                angle_deg: angle,
                rot_rmse_deg: rmse(&rot),
                rot_median_deg: median(&rot),
                trans_rmse: rmse(&trans),
                trans_median: median(&trans),
                cd_mean: mean(&col(|r| r.cd)),
                hd_mean: mean(&col(|r| r.hd)),
                n_pairs: group.len(),
                mean_ms: mean(&col(|r| r.wall_ms)),
                rot_mean_deg: mean(&rot),
                trans_mean: mean(&trans),
            });
        }
    }
    rows
}

pub fn write_jsonl(path: &Path, records: &[PairRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PairRecord>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// CSV text with the fixed header; `extended` appends the mean columns.
pub fn csv_string(rows: &[MetricsRow], extended: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    if extended {
        header.extend(EXTENDED_HEADER);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.method.name().to_string(),
            r.angle_deg.to_string(),
            r.rot_rmse_deg.to_string(),
            r.rot_median_deg.to_string(),
            r.trans_rmse.to_string(),
            r.trans_median.to_string(),
            r.cd_mean.to_string(),
            r.hd_mean.to_string(),
            r.n_pairs.to_string(),
            r.mean_ms.to_string(),
        ];
        if extended {
            rec.push(r.rot_mean_deg.to_string());
            rec.push(r.trans_mean.to_string());
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Markdown summary: CD/HD per method at 20/40/60/80 degrees (those present
/// in the grid), then every row in full.
pub fn markdown(rows: &[MetricsRow], methods: &[Method]) -> String {
    let mut s = String::new();
    let headline: Vec<f64> = [20.0, 40.0, 60.0, 80.0]
        .into_iter()
        .filter(|a| rows.iter().any(|r| r.angle_deg == *a))
        .collect();
    let find = |m: Method, a: f64| rows.iter().find(|r| r.method == m && r.angle_deg == a);
    if !headline.is_empty() {
        let _ = writeln!(s, "## Chamfer / Hausdorff distance by perturbation angle\n");
        let _ = write!(s, "| Method |");
        for a in &headline {
            let _ = write!(s, " CD {a}° | HD {a}° |");
        }
        let _ = write!(s, "\n|---|");
        for _ in &headline {
            let _ = write!(s, "---:|---:|");
        }
        s.push('\n');
        for &m in methods {
            let _ = write!(s, "| {m} |");
            for &a in &headline {
                match find(m, a) {
                    Some(r) => {
                        let _ = write!(s, " {:.4} | {:.4} |", r.cd_mean, r.hd_mean);
                    }
                    None => s.push_str(" - | - |"),
                }
            }
            s.push('\n');
        }
        s.push('\n');
    }
    let _ = writeln!(s, "## All results\n");
    let _ = writeln!(
        s,
        "| Method | Angle | Rot RMSE (°) | Rot median (°) | Trans RMSE | Trans median | CD | HD | Pairs | ms |"
    );
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {:.2} |",
            r.method,
            r.angle_deg,
            r.rot_rmse_deg,
            r.rot_median_deg,
            r.trans_rmse,
            r.trans_median,
            r.cd_mean,
            r.hd_mean,
            r.n_pairs,
            r.mean_ms
        );
    }
    s
}
