//! Recorded speed profiles replayed by human-driven vehicles.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time/speed samples with linear interpolation between them. Queries past
/// the last sample hold the last speed; queries before the first hold the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct SpeedProfile {
    samples: Vec<(f64, f64)>,
}

impl SpeedProfile {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Config(
                "speed profile needs at least 2 samples".into(),
            ));
        }
        for (i, &(t, v)) in samples.iter().enumerate() {
            if !t.is_finite() || !v.is_finite() {
                return Err(Error::Config(format!(
                    "speed profile sample {i} is not finite"
                )));
            }
            if v < 0.0 {
                return Err(Error::Config(format!(
                    "speed profile sample {i} has negative speed {v}"
                )));
            }
            if i > 0 && t <= samples[i - 1].0 {
                return Err(Error::Config(format!(
                    "speed profile times must strictly increase (sample {i}: {t} after {})",
                    samples[i - 1].0
                )));
            }
        }
        Ok(Self { samples })
    }

    /// Reads a two-column `time_s,speed_mps` CSV with a header row.
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut samples = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            if row.len() != 2 {
                return Err(Error::Config(format!(
                    "speed profile row {} must have 2 columns",
                    i + 1
                )));
            }
            let num = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "speed profile row {}: '{s}' is not a number",
                        i + 1
                    ))
                })
            };
            samples.push((num(&row[0])?, num(&row[1])?));
        }
        Self::new(samples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Config(format!("cannot open speed profile {}: {e}", path.display()))
        })?;
        Self::from_csv(file).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].0 - self.samples[0].0
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        let s = &self.samples;
        if t <= s[0].0 {
            return s[0].1;
        }
        let last = s[s.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        let i = s.partition_point(|&(ts, _)| ts <= t);
        let (t0, v0) = s[i - 1];
        let (t1, v1) = s[i];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}

impl TryFrom<Vec<(f64, f64)>> for SpeedProfile {
    type Error = Error;

    fn try_from(samples: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(samples)
    }
}

impl From<SpeedProfile> for Vec<(f64, f64)> {
    fn from(p: SpeedProfile) -> Self {
        p.samples
    }
}

const STOP_AND_GO_CSV: &str = include_str!("../../scenarios/profiles/stop_and_go.csv");

/// The stop-and-go profile shipped with the cycle-2 scenario.
pub fn shipped_stop_and_go() -> SpeedProfile {
    SpeedProfile::from_csv(STOP_AND_GO_CSV.as_bytes()).expect("shipped profile parses")
}
