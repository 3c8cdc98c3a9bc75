//! Jura heavy-metal survey.
//!
//! Two CSV files with a header row. Required columns (case-insensitive, any
//! order, extra columns ignored): `Xloc`, `Yloc`, `Landuse`, `Rock`, `Cd`,
//! `Ni`, `Zn`. `Landuse` is 1-4 or one of Forest, Pasture, Meadow, Tillage;
//! `Rock` is 1-5 or one of Argovian, Kimmeridgian, Sequanian, Portlandian,
//! Quaternary. The training file holds the fully observed locations, the
//! validation file the locations whose Cd is to be predicted.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Dataset, NodeData, StandardizationRecord};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ROCK: &str = "Rock";
pub const LAND: &str = "Land";
pub const MINERALS: &str = "Minerals";
/// Column order of the mineral node.
pub const MINERAL_COLUMNS: [&str; 3] = ["Ni", "Zn", "Cd"];
pub const CD: usize = 2;
pub const ROCK_CLASSES: usize = 5;
pub const LAND_CLASSES: usize = 4;
pub const TRAIN_FILE: &str = "jura_train.csv";
pub const VAL_FILE: &str = "jura_val.csv";

const ROCK_NAMES: [&str; 5] = ["argovian", "kimmeridgian", "sequanian", "portlandian", "quaternary"];
const LAND_NAMES: [&str; 4] = ["forest", "pasture", "meadow", "tillage"];

#[derive(Debug, Clone)]
struct Row {
    loc: [f64; 2],
    land: usize,
    rock: usize,
    minerals: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct JuraData {
    /// Training rows first, then validation rows. Cd is masked out on the
    /// validation rows.
    pub data: Dataset,
    pub train_rows: usize,
    pub val_rows: usize,
    /// Held-out Cd of the validation rows, original units.
    pub val_cd: Vec<f64>,
}

impl JuraData {
    pub fn val_indices(&self) -> Vec<usize> {
        (self.train_rows..self.train_rows + self.val_rows).collect()
    }
}

fn category(raw: &str, names: &[&str], column: &str) -> Result<usize> {
    let t = raw.trim();
    if let Ok(v) = t.parse::<f64>() {
        if v.fract() == 0.0 && v >= 1.0 && v <= names.len() as f64 {
            return Ok(v as usize - 1);
        }
        return Err(Error::Data(format!("{column}: class {t} outside 1..={}", names.len())));
    }
    names
        .iter()
        .position(|n| n.eq_ignore_ascii_case(t))
        .ok_or_else(|| Error::Data(format!("{column}: unknown class `{t}`")))
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (ix, iy, il, ir) = (col("Xloc")?, col("Yloc")?, col("Landuse")?, col("Rock")?);
    let im = [col("Ni")?, col("Zn")?, col("Cd")?];
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>().map_err(|_| {
                Error::Data(format!("{} row {}: `{s}` in column {} is not a number", path.display(), line + 1, headers[i].to_string()))
            })
        };
        rows.push(Row {
            loc: [num(ix)?, num(iy)?],
            land: category(rec.get(il).unwrap_or(""), &LAND_NAMES, "Landuse")?,
            rock: category(rec.get(ir).unwrap_or(""), &ROCK_NAMES, "Rock")?,
            minerals: [num(im[0])?, num(im[1])?, num(im[2])?],
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

/// Reads [`TRAIN_FILE`] and [`VAL_FILE`] from `dir`.
pub fn load_dir(dir: &Path) -> Result<JuraData> {
    load(&dir.join(TRAIN_FILE), &dir.join(VAL_FILE))
}

/// Coordinates are z-scored and minerals log-transformed then z-scored,
/// all with statistics of the training rows.
pub fn load(train: &Path, val: &Path) -> Result<JuraData> {
    let tr = read_rows(train)?;
    let va = read_rows(val)?;
    for (r, which) in tr.iter().map(|r| (r, "training")).chain(va.iter().map(|r| (r, "validation"))) {
        if let Some(v) = r.minerals.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Data(format!("{which} file: non-positive mineral value {v} before log")));
        }
    }
    let mut records = Vec::new();
    for (k, name) in ["Xloc", "Yloc"].iter().enumerate() {
        let v: Vec<f64> = tr.iter().map(|r| r.loc[k]).collect();
        records.push(StandardizationRecord::fit(format!("x:{name}"), &v, false)?);
    }
    for (k, name) in MINERAL_COLUMNS.iter().enumerate() {
        let v: Vec<f64> = tr.iter().map(|r| r.minerals[k]).collect();
        records.push(StandardizationRecord::fit(format!("{MINERALS}:{name}"), &v, true)?);
    }
    let all: Vec<&Row> = tr.iter().chain(va.iter()).collect();
    let n = all.len();
    let x = Tensor::matrix(
        n,
        2,
        all.iter().flat_map(|r| [records[0].apply(r.loc[0]), records[1].apply(r.loc[1])]).collect(),
    )?;
    let label = |f: fn(&Row) -> usize| Tensor::matrix(n, 1, all.iter().map(|r| f(r) as f64).collect());
    let mut y = Vec::with_capacity(n * 3);
    let mut mask = Vec::with_capacity(n * 3);
    for (i, r) in all.iter().enumerate() {
        for k in 0..3 {
            y.push(records[2 + k].apply(r.minerals[k]));
            mask.push(if i >= tr.len() && k == CD { 0.0 } else { 1.0 });
        }
    }
    let nodes = BTreeMap::from([
        (ROCK.to_string(), NodeData::observed(label(|r| r.rock)?)?),
        (LAND.to_string(), NodeData::observed(label(|r| r.land)?)?),
        (MINERALS.to_string(), NodeData::new(Tensor::matrix(n, 3, y)?, Tensor::matrix(n, 3, mask)?)?),
    ]);
    let mut data = Dataset::new(x, nodes)?;
    data.standardization = records;
    Ok(JuraData {
        data,
        train_rows: tr.len(),
        val_rows: va.len(),
        val_cd: va.iter().map(|r| r.minerals[CD]).collect(),
    })
}
