use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_sample, Eps};
use super::Model;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::Bound;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean over samples of `log p(y | f_s)`.
    Elbo,
    /// `log` of the sample mean of `p(y | f_s)`.
    Pll,
}

/// Which nodes contribute likelihood terms, which contribute KL terms and
/// which must be sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct LossScope {
    pub ll_nodes: Vec<usize>,
    pub kl_nodes: BTreeSet<usize>,
    pub active: BTreeSet<usize>,
}

impl LossScope {
    /// Likelihood terms of `observed`, KL terms and sampling over the
    /// observed nodes and all their ancestors.
    pub fn ancestor_wise(model: &Model, observed: &[usize]) -> Self {
        let closure = model.spec.ancestors_closure(observed);
        Self {
            ll_nodes: sorted_topo(model, observed),
            kl_nodes: closure.clone(),
            active: closure,
        }
    }

    /// Likelihood and KL of node `i` alone; ancestors are sampled to feed it.
    pub fn node(model: &Model, i: usize) -> Self {
        Self {
            ll_nodes: vec![i],
            kl_nodes: BTreeSet::from([i]),
            active: model.spec.ancestors_closure(&[i]),
        }
    }

    /// Ancestor-wise scope over every observed node of `data`.
    pub fn full(model: &Model, data: &Dataset) -> Result<Self> {
        Ok(Self::ancestor_wise(model, &observed_nodes(model, data)?))
    }
}

fn sorted_topo(model: &Model, set: &[usize]) -> Vec<usize> {
    model.order.iter().copied().filter(|i| set.contains(i)).collect()
}

/// Nodes with a likelihood and an entry in `data`, in topological order.
/// An entry whose mask observes nothing is an error.
pub fn observed_nodes(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &i in &model.order {
        let ns = &model.spec.nodes[i];
        if ns.likelihood.is_none() {
            continue;
        }
        if let Some(nd) = data.nodes.get(&ns.name) {
            if nd.observed_count() == 0 {
                return Err(Error::Data(format!("observed node `{}` has an empty mask", ns.name)));
            }
            out.push(i);
        }
    }
    Ok(out)
}

pub struct LossTerms<'t> {
    /// `-sum_i LL_i / alpha_i + beta * KL`.
    pub total: Var<'t>,
    /// Per-node likelihood terms, already divided by alpha.
    pub ll: Vec<(usize, Var<'t>)>,
    /// Unweighted KL sum over the scope.
    pub kl: Var<'t>,
    pub clamped: usize,
}

fn tile(t: &Tensor, s: usize) -> Tensor {
    let idx: Vec<usize> = (0..s).flat_map(|_| 0..t.rows()).collect();
    t.select_rows(&idx)
}

/// Per-point likelihood term from `S x N` sample log-likelihoods: the
/// sample mean for the ELBO, `logsumexp - ln S` for the PLL.
pub fn reduce_samples<'t>(kind: LossKind, lp: Var<'t>) -> Result<Var<'t>> {
    let s = lp.shape()[0] as f64;
    match kind {
        LossKind::Elbo => lp.sum_axis(0)?.scale(1.0 / s),
        LossKind::Pll => lp.logsumexp(0)?.add_scalar(-s.ln()),
    }
}

/// Negative ELBO or PLL objective over `scope`.
#[allow(clippy::too_many_arguments)]
pub fn loss<'t>(
    model: &Model,
    p: &Bound<'t>,
    data: &Dataset,
    kind: LossKind,
    s: usize,
    beta: f64,
    scope: &LossScope,
    eps: &mut Eps,
) -> Result<LossTerms<'t>> {
    let tape = p.tape;
    let fwd = forward_sample(model, p, &data.x, s, &scope.active, eps)?;
    let n = fwd.n;
    let mut ll = Vec::with_capacity(scope.ll_nodes.len());
    let mut neg_ll: Option<Var> = None;
    for &i in &scope.ll_nodes {
        let ns = &model.spec.nodes[i];
        let lik = model.nodes[i]
            .likelihood
            .as_ref()
            .ok_or_else(|| Error::Graph(format!("node `{}` has no likelihood", ns.name)))?;
        let nd = data
            .nodes
            .get(&ns.name)
            .ok_or_else(|| Error::Data(format!("no observations for node `{}`", ns.name)))?;
        if nd.observed_count() == 0 {
            return Err(Error::Data(format!("observed node `{}` has an empty mask", ns.name)));
        }
        let f = fwd.nodes[i].expect("scope nodes are sampled");
        let lp = lik
            .log_prob_rows(p, f.samples, &tile(&nd.y, s), &tile(&nd.mask, s))?
            .reshape(&[s, n])?;
        let node_ll = reduce_samples(kind, lp)?.sum()?.scale(1.0 / ns.alpha_value())?;
        ll.push((i, node_ll));
        neg_ll = Some(match neg_ll {
            Some(acc) => acc.sub(node_ll)?,
            None => node_ll.neg()?,
        });
    }
    let mut kl: Option<Var> = None;
    for &i in &scope.kl_nodes {
        let k = fwd.nodes[i]
            .ok_or_else(|| Error::Graph("KL node outside the sampled set".into()))?
            .kl;
        kl = Some(match kl {
            Some(acc) => acc.add(k)?,
            None => k,
        });
    }
    let kl = kl.unwrap_or_else(|| tape.scalar(0.0));
    let total = match neg_ll {
        Some(v) => v.add(kl.scale(beta)?)?,
        None => kl.scale(beta)?,
    };
    let clamped = fwd.nodes.iter().flatten().map(|f| f.clamped).sum();
    Ok(LossTerms { total, ll, kl, clamped })
}

fn eval_full(model: &Model, data: &Dataset, kind: LossKind, s: usize, beta: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let scope = LossScope::full(model, data)?;
    Ok(loss(model, &p, data, kind, s, beta, &scope, &mut Eps::Rng(rng))?.total.item())
}

/// Negative ELBO over every observed node of `data` and their ancestors.
pub fn elbo_loss(model: &Model, data: &Dataset, s: usize, beta: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    eval_full(model, data, LossKind::Elbo, s, beta, rng)
}

/// Negative PLL objective over every observed node of `data` and their
/// ancestors.
pub fn pll_loss(model: &Model, data: &Dataset, s: usize, beta: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    eval_full(model, data, LossKind::Pll, s, beta, rng)
}
