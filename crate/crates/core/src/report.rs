//! Evaluation report: one row per case and region, then one mean row per
//! region, as CSV and as JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{summarize, RegionReport};

/// Case id used for the per-region mean rows.
pub const SUMMARY_ID: &str = "mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case_id: String,
    pub region: String,
    pub dice: f64,
    pub hd95: f64,
}

pub fn report_rows(reports: &[RegionReport]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = reports
        .iter()
        .flat_map(|r| {
            r.scores.iter().map(|s| ReportRow {
                case_id: r.case_id.clone(),
                region: s.region.name().to_string(),
                dice: s.dice,
                hd95: s.hd95,
            })
        })
        .collect();
    rows.extend(summarize(reports).into_iter().map(|s| ReportRow {
        case_id: SUMMARY_ID.to_string(),
        region: s.region.name().to_string(),
        dice: s.dice,
        hd95: s.hd95,
    }));
    rows
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("case_id,region,dice,hd95\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.case_id, r.region, r.dice, r.hd95);
    }
    out
}

/// Writes `report.csv` and `report.json` into `dir`; returns the rows.
pub fn write_report(dir: &Path, reports: &[RegionReport]) -> Result<Vec<ReportRow>> {
    fs::create_dir_all(dir)?;
    let rows = report_rows(reports);
    fs::write(dir.join("report.csv"), to_csv(&rows))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}
