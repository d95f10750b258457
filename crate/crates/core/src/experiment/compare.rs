use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::config::sha256_hex;
use super::output::{num, CsvTable};

pub const COMPARE_HEADER: [&str; 8] = [
    "report",
    "method",
    "AUC_mAP",
    "AUC_CMC",
    "max_neg_flip",
    "delta_AUC_mAP",
    "delta_AUC_CMC",
    "delta_max_neg_flip",
];

/// Accepts a run directory or its `aggregate.csv`.
fn aggregate_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("aggregate.csv")
    } else {
        p.to_path_buf()
    }
}

/// Method × metric table over several runs of the same scenario.
///
/// Each row's deltas are taken against the same method in the first report,
/// or against the first report's first row when that method is absent there.
pub fn compare(reports: &[PathBuf]) -> Result<CsvTable> {
    if reports.is_empty() {
        return Err(Error::invalid("compare needs at least one report"));
    }
    let tables = reports
        .iter()
        .map(|p| CsvTable::read(&aggregate_path(p)).map_err(|e| e.at_stage(format!("read {}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    let scenario = |t: &CsvTable, p: &Path| {
        t.meta("scenario_hash")
            .map(str::to_string)
            .ok_or_else(|| Error::invalid(format!("{} has no scenario_hash", p.display())))
    };
    let base_hash = scenario(&tables[0], &reports[0])?;
    let mut config_hashes = Vec::new();
    for (t, p) in tables.iter().zip(reports) {
        let h = scenario(t, p)?;
        if h != base_hash {
            return Err(Error::Config(format!(
                "scenario hash mismatch: {} has {h}, {} has {base_hash}",
                p.display(),
                reports[0].display()
            )));
        }
        config_hashes.push(t.meta("config_hash").unwrap_or("").to_string());
        if t.rows.is_empty() {
            return Err(Error::invalid(format!("{} has no rows", p.display())));
        }
    }

    let metrics = ["AUC_mAP_mean", "AUC_CMC_mean", "max_neg_flip"];
    let row_values = |t: &CsvTable, r: usize| -> Result<[f64; 3]> {
        Ok([t.float(r, metrics[0])?, t.float(r, metrics[1])?, t.float(r, metrics[2])?])
    };
    let first = &tables[0];
    let method_col = first.column("method")?;

    let combined = sha256_hex(config_hashes.join(",").as_bytes());
    let mut out = CsvTable::new(&[("config_hash", &combined), ("scenario_hash", &base_hash)], &COMPARE_HEADER);
    for (i, t) in tables.iter().enumerate() {
        let mcol = t.column("method")?;
        for r in 0..t.rows.len() {
            let method = &t.rows[r][mcol];
            let base_row = first.rows.iter().position(|row| &row[method_col] == method).unwrap_or(0);
            let base = row_values(first, base_row)?;
            let vals = row_values(t, r)?;
            let mut row = vec![i.to_string(), method.clone()];
            row.extend(vals.iter().map(|&v| num(v)));
            row.extend(vals.iter().zip(base).map(|(v, b)| num(v - b)));
            out.push(row);
        }
    }
    Ok(out)
}
