use std::collections::BTreeMap;
use std::path::Path;

use super::config::{DataBinding, ExperimentConfig};
use crate::autodiff::Tensor;
use crate::data::{eeg, jura, Dataset, NodeData, StandardizationRecord};
use crate::error::{Error, Result};
use crate::likelihoods::LikelihoodConfig;

/// Held-out targets an experiment is scored on.
#[derive(Debug, Clone)]
pub enum EvalSet {
    None,
    /// A second table in the layout of the training table, standardized with
    /// the training records.
    Table(Dataset),
    /// Rows of the training dataset whose Cd was hidden, with the true Cd.
    Jura { rows: Vec<usize>, cd: Vec<f64> },
    /// Rows of the training dataset whose targets were hidden, with the true
    /// values (`rows x 3`, original units).
    Eeg { rows: Vec<usize>, targets: Tensor },
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub train: Dataset,
    pub eval: EvalSet,
}

/// Input column names and per-node output column names for a binding.
pub fn column_names(cfg: &ExperimentConfig) -> (Vec<String>, BTreeMap<String, Vec<String>>) {
    let s = |v: &[&str]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    match &cfg.data {
        DataBinding::Csv { inputs, nodes, .. } => (inputs.clone(), nodes.clone()),
        DataBinding::Jura { .. } => (
            s(&["Xloc", "Yloc"]),
            BTreeMap::from([
                (jura::ROCK.to_string(), s(&["Rock"])),
                (jura::LAND.to_string(), s(&["Landuse"])),
                (jura::MINERALS.to_string(), s(&jura::MINERAL_COLUMNS)),
            ]),
        ),
        DataBinding::Eeg { .. } => (
            vec![eeg::TIME.to_string()],
            BTreeMap::from([
                (eeg::SOURCE.to_string(), s(&eeg::SOURCE_COLUMNS)),
                (eeg::TARGET.to_string(), s(&eeg::TARGET_COLUMNS)),
            ]),
        ),
    }
}

pub fn load(cfg: &ExperimentConfig, dir: &Path) -> Result<Loaded> {
    match &cfg.data {
        DataBinding::Csv {
            train,
            test,
            inputs,
            nodes,
            standardize,
        } => {
            let table = read_table(&dir.join(train))?;
            let records = fit_records(&table, inputs, nodes, standardize)?;
            let mut train = to_dataset(&table, inputs, nodes, &records)?;
            let eval = match test {
                Some(t) => {
                    let mut d = to_dataset(&read_table(&dir.join(t))?, inputs, nodes, &records)?;
                    d.standardization = records.clone();
                    EvalSet::Table(d)
                }
                None => EvalSet::None,
            };
            train.standardization = records;
            check_labels(cfg, &train)?;
            Ok(Loaded { train, eval })
        }
        DataBinding::Jura { train, val } => {
            let j = jura::load(&dir.join(train), &dir.join(val))?;
            let rows = j.val_indices();
            Ok(Loaded {
                train: j.data,
                eval: EvalSet::Jura { rows, cd: j.val_cd },
            })
        }
        DataBinding::Eeg { file } => {
            let e = eeg::load(&dir.join(file))?;
            let rows = e.test_indices();
            Ok(Loaded {
                train: e.data,
                eval: EvalSet::Eeg {
                    rows,
                    targets: e.test_targets,
                },
            })
        }
    }
}

/// Header plus rows of optional values; empty, `NA` and `nan` cells are
/// missing.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    source: String,
}

impl Table {
    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", self.source)))
    }

    /// Values of a column; missing cells are an error.
    pub fn dense(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.col(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| row[c].ok_or_else(|| Error::Data(format!("{}: row {} has no `{name}`", self.source, r + 1))))
            .collect()
    }

    fn sparse(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.col(name)?;
        Ok(self.rows.iter().map(|row| row[c]).collect())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let source = path.display().to_string();
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|cell| match cell {
                "" | "NA" | "nan" | "NaN" => Ok(None),
                v => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Data(format!("{source}: row {}: cannot parse `{v}`", r + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{source}: no data rows")));
    }
    Ok(Table { header, rows, source })
}

fn fit_records(
    table: &Table,
    inputs: &[String],
    nodes: &BTreeMap<String, Vec<String>>,
    standardize: &[String],
) -> Result<Vec<StandardizationRecord>> {
    let mut out = Vec::new();
    for col in standardize {
        if inputs.contains(col) {
            out.push(StandardizationRecord::fit(format!("x:{col}"), &table.dense(col)?, false)?);
            continue;
        }
        let owner = nodes
            .iter()
            .find(|(_, cols)| cols.contains(col))
            .ok_or_else(|| Error::Config(format!("standardized column `{col}` is not bound")))?;
        let vals: Vec<f64> = table.sparse(col)?.into_iter().flatten().collect();
        out.push(StandardizationRecord::fit(format!("{}:{col}", owner.0), &vals, false)?);
    }
    Ok(out)
}

fn apply(records: &[StandardizationRecord], key: &str, v: f64) -> f64 {
    records.iter().find(|r| r.column == key).map_or(v, |r| r.apply(v))
}

fn to_dataset(
    table: &Table,
    inputs: &[String],
    nodes: &BTreeMap<String, Vec<String>>,
    records: &[StandardizationRecord],
) -> Result<Dataset> {
    let n = table.rows.len();
    let mut x = vec![0.0; n * inputs.len()];
    for (c, name) in inputs.iter().enumerate() {
        for (r, v) in table.dense(name)?.into_iter().enumerate() {
            x[r * inputs.len() + c] = apply(records, &format!("x:{name}"), v);
        }
    }
    let mut out = BTreeMap::new();
    for (node, cols) in nodes {
        let d = cols.len();
        let (mut y, mut m) = (vec![0.0; n * d], vec![0.0; n * d]);
        for (c, name) in cols.iter().enumerate() {
            for (r, v) in table.sparse(name)?.into_iter().enumerate() {
                if let Some(v) = v {
                    y[r * d + c] = apply(records, &format!("{node}:{name}"), v);
                    m[r * d + c] = 1.0;
                }
            }
        }
        out.insert(node.clone(), NodeData::new(Tensor::matrix(n, d, y)?, Tensor::matrix(n, d, m)?)?);
    }
    Dataset::new(Tensor::matrix(n, inputs.len(), x)?, out)
}

fn check_labels(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    for ns in &cfg.graph.nodes {
        let classes = match ns.likelihood {
            Some(LikelihoodConfig::Bernoulli) => 2,
            Some(LikelihoodConfig::Softmax { classes }) => classes,
            _ => continue,
        };
        let Some(nd) = data.nodes.get(&ns.name) else { continue };
        for r in nd.observed_rows() {
            let v = nd.y.at(r, 0);
            if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
                return Err(Error::Data(format!("node `{}`: label {v} outside 0..{classes}", ns.name)));
            }
        }
    }
    Ok(())
}
