//! DAG model: declarative spec, parameters, doubly stochastic forward
//! sampling, ELBO/PLL losses, prediction and Gaussian conditioning.

mod forward;
mod loss;
mod model;
mod predict;
mod probe;

pub use forward::{forward_call_count, forward_sample, Eps, ForwardSamples, NodeForward};
pub use loss::{elbo_loss, loss, observed_nodes, pll_loss, reduce_samples, LossKind, LossScope, LossTerms};
pub use model::{Model, NodeParams};
pub use predict::{condition_gaussian, predict, predict_with, NodeSummary, PredictiveSummary};
pub use probe::loss_gradient_probe;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihoods::LikelihoodConfig;

fn one() -> usize {
    1
}

/// One subprocess node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    /// Parent node names; their sampled latents are appended to the inputs.
    #[serde(default)]
    pub parents: Vec<String>,
    /// Columns of the shared input matrix fed to this node.
    #[serde(default)]
    pub inputs: Vec<usize>,
    /// Output dimension of the node's latent function.
    #[serde(default = "one")]
    pub latent_dim: usize,
    /// Independent latent GPs mixed into the outputs; defaults to
    /// `latent_dim`.
    #[serde(default)]
    pub num_latents: Option<usize>,
    /// `None` for hidden nodes, which contribute only a KL term.
    #[serde(default)]
    pub likelihood: Option<LikelihoodConfig>,
    /// Number of inducing points.
    pub inducing: usize,
    /// Likelihood normalization; defaults to the observation width.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub freeze_inducing: bool,
    /// Initial kernel lengthscale on the adjustable-input columns; 1 by
    /// default.
    #[serde(default)]
    pub lengthscale: Option<f64>,
    /// Initial kernel lengthscale on the parent columns; 1 by default.
    #[serde(default)]
    pub parent_lengthscale: Option<f64>,
    /// Parameterize `q(u)` relative to the prior Cholesky factor.
    #[serde(default)]
    pub whiten: bool,
}

impl NodeSpec {
    pub fn new(name: &str, inducing: usize) -> Self {
        Self {
            name: name.to_string(),
            parents: vec![],
            inputs: vec![],
            latent_dim: 1,
            num_latents: None,
            likelihood: None,
            inducing,
            alpha: None,
            freeze_inducing: false,
            lengthscale: None,
            parent_lengthscale: None,
            whiten: false,
        }
    }

    pub fn parents(mut self, parents: &[&str]) -> Self {
        self.parents = parents.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn inputs(mut self, cols: &[usize]) -> Self {
        self.inputs = cols.to_vec();
        self
    }

    pub fn latent_dim(mut self, d: usize) -> Self {
        self.latent_dim = d;
        self
    }

    pub fn num_latents(mut self, l: usize) -> Self {
        self.num_latents = Some(l);
        self
    }

    pub fn likelihood(mut self, lik: LikelihoodConfig) -> Self {
        self.likelihood = Some(lik);
        self
    }

    pub fn alpha(mut self, a: f64) -> Self {
        self.alpha = Some(a);
        self
    }

    pub fn freeze_inducing(mut self, f: bool) -> Self {
        self.freeze_inducing = f;
        self
    }

    pub fn lengthscale(mut self, l: f64) -> Self {
        self.lengthscale = Some(l);
        self
    }

    pub fn parent_lengthscale(mut self, l: f64) -> Self {
        self.parent_lengthscale = Some(l);
        self
    }

    pub fn whiten(mut self, w: bool) -> Self {
        self.whiten = w;
        self
    }

    pub fn latents(&self) -> usize {
        self.num_latents.unwrap_or(self.latent_dim)
    }

    /// Whether outputs are a learned linear mix of the latents.
    pub fn mixed(&self) -> bool {
        self.latent_dim > 1 || self.latents() != self.latent_dim
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha
            .unwrap_or_else(|| self.likelihood.as_ref().map_or(1, |l| l.observed_dim()) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    /// Columns of the shared input matrix.
    pub input_dim: usize,
    pub nodes: Vec<NodeSpec>,
}

impl GraphSpec {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn parent_indices(&self, i: usize) -> Vec<usize> {
        self.nodes[i]
            .parents
            .iter()
            .map(|p| self.index_of(p).expect("validated"))
            .collect()
    }

    /// `(parent, child)` index pairs in declaration order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.nodes.len())
            .flat_map(|c| self.parent_indices(c).into_iter().map(move |p| (p, c)))
            .collect()
    }

    /// Dimension of node `i`'s GP input: its input columns followed by the
    /// latent outputs of its parents, in parent order.
    pub fn node_input_dim(&self, i: usize) -> usize {
        self.nodes[i].inputs.len()
            + self
                .parent_indices(i)
                .iter()
                .map(|&p| self.nodes[p].latent_dim)
                .sum::<usize>()
    }

    /// Structural checks; returns the topological order.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.name.as_str()) {
                return Err(Error::Graph(format!("duplicate node name `{}`", n.name)));
            }
        }
        for n in &self.nodes {
            for p in &n.parents {
                if self.index_of(p).is_none() {
                    return Err(Error::Graph(format!("node `{}` has unknown parent `{p}`", n.name)));
                }
                if p == &n.name {
                    return Err(Error::Cycle(n.name.clone()));
                }
            }
            if let Some(c) = n.inputs.iter().find(|&&c| c >= self.input_dim) {
                return Err(Error::Graph(format!(
                    "node `{}` uses input column {c} but inputs have {} columns",
                    n.name, self.input_dim
                )));
            }
            if n.inputs.is_empty() && n.parents.is_empty() {
                return Err(Error::Graph(format!("node `{}` has neither inputs nor parents", n.name)));
            }
            if n.latent_dim == 0 || n.latents() == 0 || n.inducing == 0 {
                return Err(Error::Graph(format!(
                    "node `{}` needs positive latent dimension, latent count and inducing count",
                    n.name
                )));
            }
            if let Some(a) = n.alpha {
                if !(a > 0.0) || !a.is_finite() {
                    return Err(Error::Graph(format!("node `{}` has non-positive alpha {a}", n.name)));
                }
            }
            for l in [n.lengthscale, n.parent_lengthscale].into_iter().flatten() {
                if !(l > 0.0) || !l.is_finite() {
                    return Err(Error::Graph(format!("node `{}` has non-positive lengthscale {l}", n.name)));
                }
            }
            if let Some(lik) = &n.likelihood {
                if let Some(d) = lik.required_latent_dim() {
                    if d != n.latent_dim {
                        return Err(Error::Graph(format!(
                            "node `{}`: likelihood needs latent dimension {d}, declared {}",
                            n.name, n.latent_dim
                        )));
                    }
                }
            }
        }
        topological_sort(self)
    }

    /// `set` together with all of its ancestors.
    pub fn ancestors_closure(&self, set: &[usize]) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = BTreeSet::new();
        let mut stack: Vec<usize> = set.to_vec();
        while let Some(i) = stack.pop() {
            if out.insert(i) {
                stack.extend(self.parent_indices(i));
            }
        }
        out
    }
}

/// Parents before children; among ready nodes the earliest declared goes
/// first.
pub fn topological_sort(spec: &GraphSpec) -> Result<Vec<usize>> {
    let n = spec.nodes.len();
    let parents: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            spec.nodes[i]
                .parents
                .iter()
                .map(|p| {
                    spec.index_of(p)
                        .ok_or_else(|| Error::Graph(format!("unknown parent `{p}`")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n).find(|&i| !placed[i] && parents[i].iter().all(|&p| placed[p]));
        match next {
            Some(i) => {
                placed[i] = true;
                order.push(i);
            }
            None => {
                // every unplaced node waits on another unplaced node; walking
                // parent links from any of them must revisit a node on a cycle
                let mut cur = (0..n).find(|&i| !placed[i]).expect("unplaced node");
                let mut visited = vec![false; n];
                while !visited[cur] {
                    visited[cur] = true;
                    cur = *parents[cur].iter().find(|&&p| !placed[p]).expect("blocked");
                }
                return Err(Error::Cycle(spec.nodes[cur].name.clone()));
            }
        }
    }
    Ok(order)
}

#[cfg(test)]
mod tests;
