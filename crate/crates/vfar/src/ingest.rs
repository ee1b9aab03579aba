//! Parsing of cycle-indexed current-voltage measurements, switch-point
//! detection, truncation, and registration of each curve onto [0, 1].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which half of a switching cycle a curve belongs to. A set curve ends in a
/// sudden current rise, a reset curve in a sudden current drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Process {
    Set,
    Reset,
}

impl fmt::Display for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Process::Set => write!(f, "set"),
            Process::Reset => write!(f, "reset"),
        }
    }
}

impl FromStr for Process {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "set" => Ok(Process::Set),
            "reset" => Ok(Process::Reset),
            other => Err(format!("unknown process `{other}` (expected set or reset)")),
        }
    }
}

/// One measured (voltage, current) point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvSample {
    pub voltage: f64,
    pub current: f64,
}

/// One measured sweep: ordered (voltage, current) samples for a single
/// (cycle, process) pair. Voltages are strictly increasing and currents
/// strictly positive so the log transform is defined everywhere.
#[derive(Debug, Clone)]
pub struct RawCycle {
    pub cycle_index: u64,
    pub process: Process,
    pub samples: Vec<IvSample>,
}

/// A truncated curve registered onto [0, 1]: the switch point maps to t = 1
/// and values hold the natural log of the current.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisteredCurve {
    pub cycle_index: u64,
    pub process: Process,
    pub switch_voltage: f64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("non-positive current {current} at row {line}")]
    NonPositiveCurrent { line: usize, current: f64 },
    #[error("duplicate voltage {voltage} in cycle {cycle} {process}")]
    DuplicateVoltage {
        cycle: u64,
        process: Process,
        voltage: f64,
    },
    #[error("no switch point found in cycle {cycle} {process}")]
    NoSwitchPoint { cycle: u64, process: Process },
    #[error("switch voltage is zero in cycle {cycle}")]
    ZeroSwitchVoltage { cycle: u64 },
    #[error("switch index {index} out of range for cycle with {len} samples")]
    SwitchIndexOutOfRange { index: usize, len: usize },
    #[error("jump fraction {0} must lie in (0, 1)")]
    InvalidJumpFraction(f64),
    #[error("empty cycle")]
    EmptyCycle,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Parses the cycle CSV format (`cycle,process,voltage,current`) into one
/// [`RawCycle`] per (cycle, process) group. Rows need not be pre-sorted;
/// samples are sorted by voltage and groups by (cycle, process).
pub fn parse_cycles<R: Read>(reader: R) -> Result<Vec<RawCycle>, IngestError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut groups: std::collections::BTreeMap<(u64, Process), Vec<IvSample>> =
        std::collections::BTreeMap::new();
    for (record_idx, record) in csv_reader.records().enumerate() {
        let line = record_idx + 2; // 1-based, after the header
        let record = record?;
        if record.len() != 4 {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let cycle: u64 = record[0].parse().map_err(|e| IngestError::MalformedRow {
            line,
            reason: format!("bad cycle index `{}`: {e}", &record[0]),
        })?;
        let process: Process = record[1].parse().map_err(|e| IngestError::MalformedRow {
            line,
            reason: e,
        })?;
        let voltage: f64 = record[2].parse().map_err(|e| IngestError::MalformedRow {
            line,
            reason: format!("bad voltage `{}`: {e}", &record[2]),
        })?;
        let current: f64 = record[3].parse().map_err(|e| IngestError::MalformedRow {
            line,
            reason: format!("bad current `{}`: {e}", &record[3]),
        })?;
        if !voltage.is_finite() || voltage < 0.0 {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("voltage {voltage} must be finite and non-negative"),
            });
        }
        if !current.is_finite() || current <= 0.0 {
            return Err(IngestError::NonPositiveCurrent { line, current });
        }
        groups
            .entry((cycle, process))
            .or_default()
            .push(IvSample { voltage, current });
    }
    let mut cycles = Vec::with_capacity(groups.len());
    for ((cycle_index, process), mut samples) in groups {
        samples.sort_by(|a, b| a.voltage.total_cmp(&b.voltage));
        for pair in samples.windows(2) {
            if pair[0].voltage == pair[1].voltage {
                return Err(IngestError::DuplicateVoltage {
                    cycle: cycle_index,
                    process,
                    voltage: pair[0].voltage,
                });
            }
        }
        cycles.push(RawCycle {
            cycle_index,
            process,
            samples,
        });
    }
    Ok(cycles)
}

/// Writes cycles in the same CSV format that [`parse_cycles`] reads.
pub fn write_cycles_csv<W: Write>(cycles: &[RawCycle], writer: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cycle", "process", "voltage", "current"])?;
    for cycle in cycles {
        for sample in &cycle.samples {
            w.write_record([
                cycle.cycle_index.to_string(),
                cycle.process.to_string(),
                sample.voltage.to_string(),
                sample.current.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Finds the first index `k >= 1` where the relative current change between
/// consecutive samples exceeds `jump_fraction` in the direction of the
/// process event: a drop for reset, a rise for set. The switch point itself
/// is sample `k - 1`, the last sample before the jump.
pub fn detect_switch_point(cycle: &RawCycle, jump_fraction: f64) -> Result<usize, IngestError> {
    if !(0.0..1.0).contains(&jump_fraction) || jump_fraction == 0.0 {
        return Err(IngestError::InvalidJumpFraction(jump_fraction));
    }
    if cycle.samples.is_empty() {
        return Err(IngestError::EmptyCycle);
    }
    for k in 1..cycle.samples.len() {
        let prev = cycle.samples[k - 1].current;
        let curr = cycle.samples[k].current;
        let relative = match cycle.process {
            Process::Reset => (prev - curr) / prev,
            Process::Set => (curr - prev) / prev,
        };
        if relative > jump_fraction {
            return Ok(k);
        }
    }
    Err(IngestError::NoSwitchPoint {
        cycle: cycle.cycle_index,
        process: cycle.process,
    })
}

/// Truncates the cycle at `switch_index` (the last retained sample) and
/// registers it: the grid is voltage divided by the switch voltage and the
/// values are the natural log of the current.
pub fn register_curve(cycle: &RawCycle, switch_index: usize) -> Result<RegisteredCurve, IngestError> {
    if switch_index >= cycle.samples.len() {
        return Err(IngestError::SwitchIndexOutOfRange {
            index: switch_index,
            len: cycle.samples.len(),
        });
    }
    let switch_voltage = cycle.samples[switch_index].voltage;
    if switch_voltage <= 0.0 {
        return Err(IngestError::ZeroSwitchVoltage {
            cycle: cycle.cycle_index,
        });
    }
    let kept = &cycle.samples[..=switch_index];
    let grid = kept.iter().map(|s| s.voltage / switch_voltage).collect();
    let values = kept.iter().map(|s| s.current.ln()).collect();
    Ok(RegisteredCurve {
        cycle_index: cycle.cycle_index,
        process: cycle.process,
        switch_voltage,
        grid,
        values,
    })
}

/// Detects the switch point of each cycle and registers the truncated curve.
pub fn register_cycles(
    cycles: &[RawCycle],
    jump_fraction: f64,
) -> Result<Vec<RegisteredCurve>, IngestError> {
    cycles
        .iter()
        .map(|cycle| {
            let jump = detect_switch_point(cycle, jump_fraction)?;
            register_curve(cycle, jump - 1)
        })
        .collect()
}
