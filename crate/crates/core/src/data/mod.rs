//! Datasets, standardization, the synthetic system, dataset loaders and
//! evaluation metrics.

pub mod eeg;
pub mod jura;
pub mod metrics;
pub mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Observations of one node: `y` is `N x D_y`, `mask` holds 1 where an
/// entry is observed and 0 elsewhere. Unobserved entries of `y` are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeData {
    pub y: Tensor,
    pub mask: Tensor,
}

impl NodeData {
    pub fn new(y: Tensor, mask: Tensor) -> Result<Self> {
        if y.rank() != 2 || mask.shape() != y.shape() {
            return Err(Error::Data(format!(
                "observation matrix {:?} and mask {:?} must be equal-shaped matrices",
                y.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Data("mask entries must be 0 or 1".into()));
        }
        let y = Tensor::new(
            y.shape().to_vec(),
            y.data().iter().zip(mask.data()).map(|(v, m)| if *m == 0.0 { 0.0 } else { *v }).collect(),
        )?;
        Ok(Self { y, mask })
    }

    /// Fully observed.
    pub fn observed(y: Tensor) -> Result<Self> {
        let mask = Tensor::ones(y.shape());
        Self::new(y, mask)
    }

    pub fn rows(&self) -> usize {
        self.y.rows()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    /// Rows with at least one observed entry.
    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .filter(|&i| self.mask.row(i).iter().any(|&m| m != 0.0))
            .collect()
    }

    /// Rows with every entry observed.
    pub fn full_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .filter(|&i| self.mask.row(i).iter().all(|&m| m != 0.0))
            .collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            y: self.y.select_rows(idx),
            mask: self.mask.select_rows(idx),
        }
    }
}

/// Per-column affine (optionally log) transform applied before modeling:
/// `z = (t(v) - mean) / std` with `t = ln` when `log` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    /// `node:column` or `x:column`.
    pub column: String,
    pub log: bool,
    pub mean: f64,
    pub std: f64,
}

impl StandardizationRecord {
    /// Fits mean and standard deviation (population) of `values` after the
    /// optional log transform.
    pub fn fit(column: impl Into<String>, values: &[f64], log: bool) -> Result<Self> {
        let column = column.into();
        if values.is_empty() {
            return Err(Error::Data(format!("{column}: no values to standardize")));
        }
        if log && values.iter().any(|&v| v <= 0.0) {
            return Err(Error::Data(format!("{column}: non-positive value before log transform")));
        }
        let t: Vec<f64> = values.iter().map(|&v| if log { v.ln() } else { v }).collect();
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Data(format!("{column}: zero variance, cannot standardize")));
        }
        Ok(Self { column, log, mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        let t = if self.log { v.ln() } else { v };
        (t - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        let t = z * self.std + self.mean;
        if self.log {
            t.exp()
        } else {
            t
        }
    }

    /// Maps a mean/variance pair in standardized (log) space back to the
    /// transformed-space scale: mean via [`Self::invert`], variance times
    /// `std^2`. For log columns the returned mean is the median of the
    /// implied log-normal.
    pub fn invert_moments(&self, mean: f64, var: f64) -> (f64, f64) {
        (self.invert(mean), var * self.std * self.std)
    }
}

/// Inputs shared by all nodes plus per-node observations, aligned by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub nodes: BTreeMap<String, NodeData>,
    #[serde(default)]
    pub standardization: Vec<StandardizationRecord>,
}

impl Dataset {
    pub fn new(x: Tensor, nodes: BTreeMap<String, NodeData>) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::Data(format!("inputs must be a matrix, got {:?}", x.shape())));
        }
        for (name, nd) in &nodes {
            if nd.rows() != x.rows() {
                return Err(Error::Data(format!(
                    "node {name}: {} observation rows for {} input rows",
                    nd.rows(),
                    x.rows()
                )));
            }
        }
        Ok(Self {
            x,
            nodes,
            standardization: Vec::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            nodes: self.nodes.iter().map(|(k, v)| (k.clone(), v.select_rows(idx))).collect(),
            standardization: self.standardization.clone(),
        }
    }

    /// Drops node entries without a single observed value.
    pub fn without_empty_nodes(mut self) -> Self {
        self.nodes.retain(|_, v| v.observed_count() > 0);
        self
    }

    /// Rows where every node present in the dataset is fully observed.
    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .filter(|&i| self.nodes.values().all(|nd| nd.mask.row(i).iter().all(|&m| m != 0.0)))
            .collect()
    }

    pub fn record(&self, column: &str) -> Option<&StandardizationRecord> {
        self.standardization.iter().find(|r| r.column == column)
    }
}
