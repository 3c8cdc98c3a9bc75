//! EEG trial: seven frontal sensors over 256 time steps.
//!
//! Accepted inputs:
//! - a CSV with a header naming at least `F1..F6` and `FZ` (case-insensitive,
//!   one row per time step, extra columns ignored);
//! - a raw trial file with whitespace-separated `trial sensor sample value`
//!   records and `#` comment lines, as distributed for the original study.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Dataset, NodeData, StandardizationRecord};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const LENGTH: usize = 256;
pub const OBSERVED_PREFIX: usize = 156;
pub const TIME: &str = "time";
pub const SOURCE: &str = "F3456";
pub const TARGET: &str = "F12Z";
pub const SOURCE_COLUMNS: [&str; 4] = ["F3", "F4", "F5", "F6"];
pub const TARGET_COLUMNS: [&str; 3] = ["F1", "F2", "FZ"];

#[derive(Debug, Clone)]
pub struct EegData {
    /// Time scaled to `[0, 1]`; targets masked after [`OBSERVED_PREFIX`].
    pub data: Dataset,
    /// Held-out targets of rows `OBSERVED_PREFIX..LENGTH`, original units,
    /// `100 x 3`.
    pub test_targets: Tensor,
}

impl EegData {
    pub fn test_indices(&self) -> Vec<usize> {
        (OBSERVED_PREFIX..LENGTH).collect()
    }
}

fn read_series(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if first.contains(',') {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_uppercase()).collect();
        for rec in rdr.records() {
            let rec = rec?;
            for (h, v) in headers.iter().zip(rec.iter()) {
                if let Ok(x) = v.parse::<f64>() {
                    out.entry(h.clone()).or_default().push(x);
                }
            }
        }
    } else {
        let mut indexed: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Data(format!("{} line {}: expected `trial sensor sample value`", path.display(), ln + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let sample: usize = f[2].parse().map_err(|_| bad())?;
            let value: f64 = f[3].parse().map_err(|_| bad())?;
            indexed.entry(f[1].to_ascii_uppercase()).or_default().push((sample, value));
        }
        for (k, mut v) in indexed {
            v.sort_by_key(|p| p.0);
            out.insert(k, v.into_iter().map(|p| p.1).collect());
        }
    }
    Ok(out)
}

/// Loads the seven sensors and z-scores each with its training rows: all
/// 256 steps for F3-F6, the first 156 for F1, F2 and FZ.
pub fn load(path: &Path) -> Result<EegData> {
    let series = read_series(path)?;
    let get = |name: &str| -> Result<&Vec<f64>> {
        let s = series
            .get(name)
            .ok_or_else(|| Error::Data(format!("{}: missing sensor {name}", path.display())))?;
        if s.len() != LENGTH {
            return Err(Error::Data(format!("sensor {name}: series length {}, expected {LENGTH}", s.len())));
        }
        Ok(s)
    };
    // time index t enters the model as t / 255
    let mut records = vec![StandardizationRecord {
        column: format!("x:{TIME}"),
        log: false,
        mean: 0.0,
        std: (LENGTH - 1) as f64,
    }];
    let mut src = vec![0.0; LENGTH * 4];
    for (k, name) in SOURCE_COLUMNS.iter().enumerate() {
        let s = get(name)?;
        let rec = StandardizationRecord::fit(format!("{SOURCE}:{name}"), s, false)?;
        for t in 0..LENGTH {
            src[t * 4 + k] = rec.apply(s[t]);
        }
        records.push(rec);
    }
    let mut tgt = vec![0.0; LENGTH * 3];
    let mut mask = vec![0.0; LENGTH * 3];
    let mut test = vec![0.0; (LENGTH - OBSERVED_PREFIX) * 3];
    for (k, name) in TARGET_COLUMNS.iter().enumerate() {
        let s = get(name)?;
        let rec = StandardizationRecord::fit(format!("{TARGET}:{name}"), &s[..OBSERVED_PREFIX], false)?;
        for t in 0..LENGTH {
            if t < OBSERVED_PREFIX {
                tgt[t * 3 + k] = rec.apply(s[t]);
                mask[t * 3 + k] = 1.0;
            } else {
                test[(t - OBSERVED_PREFIX) * 3 + k] = s[t];
            }
        }
        records.push(rec);
    }
    let x = Tensor::matrix(LENGTH, 1, (0..LENGTH).map(|t| t as f64 / (LENGTH - 1) as f64).collect())?;
    let nodes = BTreeMap::from([
        (SOURCE.to_string(), NodeData::observed(Tensor::matrix(LENGTH, 4, src)?)?),
        (
            TARGET.to_string(),
            NodeData::new(Tensor::matrix(LENGTH, 3, tgt)?, Tensor::matrix(LENGTH, 3, mask)?)?,
        ),
    ]);
    let mut data = Dataset::new(x, nodes)?;
    data.standardization = records;
    Ok(EegData {
        data,
        test_targets: Tensor::matrix(LENGTH - OBSERVED_PREFIX, 3, test)?,
    })
}
