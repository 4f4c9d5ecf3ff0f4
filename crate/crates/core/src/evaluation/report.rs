//! Per-vehicle metrics table: plain-text rendering and CSV import/export.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::world::VehicleId;

pub const REPORT_HEADER: [&str; 9] = [
    "id",
    "attc",
    "hf",
    "hf_steps",
    "atg",
    "tg_std",
    "acc_std",
    "tcm",
    "maneuver_acc_std",
];

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleMetrics {
    pub id: VehicleId,
    /// Average time to collision, s.
    pub attc: Option<f64>,
    /// Hazard episodes (TTC below threshold).
    pub hazard_frequency: u32,
    pub hazard_steps: u32,
    /// Average time gap while keeping a gap, s.
    pub avg_time_gap: Option<f64>,
    pub time_gap_std: Option<f64>,
    /// Acceleration std over the whole run, m/s^2.
    pub accel_std: f64,
    /// Time to complete the join maneuver (joiner only), s.
    pub tcm: Option<f64>,
    /// Acceleration std between join approval and completion.
    pub maneuver_accel_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<VehicleMetrics>,
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn na_fixed(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.digits$}"))
}

fn parse_opt(field: &str, row: usize, col: &str) -> Result<Option<f64>> {
    if field == "NA" {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| {
        Error::Evaluation(format!(
            "report row {row}, column {col}: '{field}' is not a number"
        ))
    })
}

impl MetricsReport {
    pub fn row(&self, id: VehicleId) -> Option<&VehicleMetrics> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Fixed-width table for terminals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>9} {:>4} {:>8} {:>7} {:>7} {:>8} {:>7} {:>9}",
            "id", "attc", "hf", "hf_steps", "atg", "tg_std", "acc_std", "tcm", "man_acc"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>5} {:>9} {:>4} {:>8} {:>7} {:>7} {:>8.3} {:>7} {:>9}",
                r.id.0,
                na_fixed(r.attc, 2),
                r.hazard_frequency,
                r.hazard_steps,
                na_fixed(r.avg_time_gap, 3),
                na_fixed(r.time_gap_std, 3),
                r.accel_std,
                na_fixed(r.tcm, 2),
                na_fixed(r.maneuver_accel_std, 3),
            );
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.id.0.to_string(),
                na(r.attc),
                r.hazard_frequency.to_string(),
                r.hazard_steps.to_string(),
                na(r.avg_time_gap),
                na(r.time_gap_std),
                r.accel_std.to_string(),
                na(r.tcm),
                na(r.maneuver_accel_std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        if rdr.headers()?.iter().ne(REPORT_HEADER) {
            return Err(Error::Evaluation(format!(
                "report header must be {}",
                REPORT_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let int = |col: usize| -> Result<u32> {
                rec[col].parse().map_err(|_| {
                    Error::Evaluation(format!(
                        "report row {row}, column {}: '{}' is not an integer",
                        REPORT_HEADER[col], &rec[col]
                    ))
                })
            };
            let opt = |col: usize| parse_opt(&rec[col], row, REPORT_HEADER[col]);
            rows.push(VehicleMetrics {
                id: VehicleId(int(0)?),
                attc: opt(1)?,
                hazard_frequency: int(2)?,
                hazard_steps: int(3)?,
                avg_time_gap: opt(4)?,
                time_gap_std: opt(5)?,
                accel_std: opt(6)?.ok_or_else(|| {
                    Error::Evaluation(format!("report row {row}: acc_std cannot be NA"))
                })?,
                tcm: opt(7)?,
                maneuver_accel_std: opt(8)?,
            });
        }
        Ok(Self { rows })
    }
}
