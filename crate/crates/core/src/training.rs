//! Ancestor-wise and node-wise optimization, Adam, and inducing-point
//! initialization.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{loss, observed_nodes, Eps, GraphSpec, LossKind, LossScope, Model};
use crate::params::{ParamId, ParamStore};

pub const DEFAULT_SAMPLES: usize = 20;
pub const DEFAULT_PREDICT_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    AncestorWise,
    NodeWise,
}

fn default_loss() -> LossKind {
    LossKind::Pll
}
fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_beta() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub method: Method,
    pub lr: f64,
    /// Epochs over the fully observed rows (or over all rows when
    /// `partial_epochs` is zero).
    pub epochs: usize,
    /// Epochs over the partially observed rows after the first phase.
    #[serde(default)]
    pub partial_epochs: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Restricts the observed set to these nodes; all nodes with data by
    /// default.
    #[serde(default)]
    pub observed: Option<Vec<String>>,
}

impl TrainConfig {
    pub fn new(lr: f64, epochs: usize) -> Self {
        Self {
            loss: default_loss(),
            method: Method::default(),
            lr,
            epochs,
            partial_epochs: 0,
            samples: DEFAULT_SAMPLES,
            beta: 1.0,
            seed: 0,
            observed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be non-negative", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with bias correction. Moments and step counts are kept per
/// parameter, so a parameter stepped only in some inner steps is corrected
/// by its own step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }

    /// Steps taken so far by parameter `id`.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(id).and_then(|s| s.as_ref()).map_or(0, |s| s.t)
    }

    /// Applies one update to each listed parameter. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!("gradient {:?} for `{}`", g.shape(), store.name(*id)),
                });
            }
        }
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (id, g) in grads {
            let st = self.state[*id].get_or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - self.beta1.powi(st.t as i32);
            let c2 = 1.0 - self.beta2.powi(st.t as i32);
            let p = store.get_mut(*id);
            for (((x, gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One loss evaluation in the trace. `node` is `None` for the joint
/// ancestor-wise loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub phase: usize,
    pub node: Option<String>,
    pub loss: f64,
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "phase", "node", "loss"])?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            r.phase.to_string(),
            r.node.clone().unwrap_or_else(|| "total".into()),
            format!("{:e}", r.loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn observed_set(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let obs = observed_nodes(model, data)?;
    let obs = match &cfg.observed {
        None => obs,
        Some(names) => {
            let mut want = BTreeSet::new();
            for n in names {
                let i = model
                    .index_of(n)
                    .ok_or_else(|| Error::Config(format!("observed node `{n}` is not in the graph")))?;
                if model.spec.nodes[i].likelihood.is_none() {
                    return Err(Error::Config(format!("observed node `{n}` has no likelihood")));
                }
                want.insert(i);
            }
            obs.into_iter().filter(|i| want.contains(i)).collect()
        }
    };
    if obs.is_empty() {
        return Err(Error::Data("no observed node has data".into()));
    }
    Ok(obs)
}

/// Parameters stepped by one ancestor-wise epoch: GP parameters of every
/// node in the closure and likelihood parameters of the observed nodes.
pub fn ancestor_wise_params(model: &Model, observed: &[usize]) -> BTreeSet<ParamId> {
    let mut ids: BTreeSet<ParamId> = model
        .spec
        .ancestors_closure(observed)
        .into_iter()
        .flat_map(|i| model.gp_params(i))
        .collect();
    for &i in observed {
        ids.extend(model.likelihood_params(i));
    }
    ids
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// One optimizer step on `scope` with `trainable` as leaves. Returns the
/// loss before the step.
#[allow(clippy::too_many_arguments)]
fn step(
    model: &mut Model,
    adam: &mut Adam,
    data: &Dataset,
    cfg: &TrainConfig,
    scope: &LossScope,
    trainable: &BTreeSet<ParamId>,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, |id| trainable.contains(&id));
    let terms = loss(model, &p, data, cfg.loss, cfg.samples, cfg.beta, scope, &mut Eps::Rng(rng))
        .map_err(|e| diverged(e, epoch))?;
    let value = terms.total.item();
    if !value.is_finite() {
        return Err(Error::Diverged { epoch, loss: value });
    }
    let grads = tape.backward(terms.total).map_err(|e| diverged(e, epoch))?;
    let g: Vec<(ParamId, Tensor)> = p.leaf_ids().map(|id| (id, grads.wrt(p.var(id)))).collect();
    adam.step(&mut model.params, &g)?;
    Ok(value)
}

/// Called after every optimizer step with the model and the node that was
/// stepped (`None` for an ancestor-wise step).
pub type StepHook<'a> = &'a mut dyn FnMut(&Model, Option<usize>);

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut Model,
    adam: &mut Adam,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    phase: usize,
    rng: &mut ChaCha8Rng,
    trace: &mut Vec<TraceRow>,
    hook: &mut StepHook,
) -> Result<()> {
    let obs = observed_set(model, data, cfg)?;
    let epoch0 = trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    match cfg.method {
        Method::AncestorWise => {
            let scope = LossScope::ancestor_wise(model, &obs);
            let trainable = ancestor_wise_params(model, &obs);
            for e in 0..epochs {
                let epoch = epoch0 + e;
                let l = step(model, adam, data, cfg, &scope, &trainable, rng, epoch)?;
                trace.push(TraceRow { epoch, phase, node: None, loss: l });
                hook(model, None);
            }
        }
        Method::NodeWise => {
            for e in 0..epochs {
                let epoch = epoch0 + e;
                for &i in &obs {
                    // fresh forward pass per node: parents updated earlier in
                    // this epoch feed the current node
                    let scope = LossScope::node(model, i);
                    let trainable: BTreeSet<ParamId> = model.node_params(i).into_iter().collect();
                    let l = step(model, adam, data, cfg, &scope, &trainable, rng, epoch)?;
                    trace.push(TraceRow {
                        epoch,
                        phase,
                        node: Some(model.spec.nodes[i].name.clone()),
                        loss: l,
                    });
                    hook(model, Some(i));
                }
            }
        }
    }
    Ok(())
}

/// Trains `model` in place. With `partial_epochs > 0` the first phase runs
/// on the rows where every node is fully observed and the second on the
/// remaining rows; otherwise all rows are used for `epochs`. Loss rows are
/// appended to `trace` as they are produced so it survives a divergence
/// error.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, trace: &mut Vec<TraceRow>) -> Result<()> {
    train_with(model, data, cfg, trace, &mut |_, _| {})
}

/// [`train`] with a hook run after every optimizer step.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    trace: &mut Vec<TraceRow>,
    mut hook: StepHook,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    if cfg.partial_epochs == 0 {
        return run_phase(model, &mut adam, data, cfg, cfg.epochs, 0, &mut rng, trace, &mut hook);
    }
    let full = data.complete_rows();
    let partial: Vec<usize> = (0..data.rows()).filter(|r| !full.contains(r)).collect();
    if full.is_empty() {
        return Err(Error::Data("phased training needs fully observed rows".into()));
    }
    let first = data.select_rows(&full).without_empty_nodes();
    run_phase(model, &mut adam, &first, cfg, cfg.epochs, 0, &mut rng, trace, &mut hook)?;
    if partial.is_empty() {
        log::warn!("no partially observed rows; skipping the second phase");
        return Ok(());
    }
    let second = data.select_rows(&partial).without_empty_nodes();
    run_phase(model, &mut adam, &second, cfg, cfg.partial_epochs, 1, &mut rng, trace, &mut hook)
}

fn pick_rows(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if m <= n {
        if m == n {
            return (0..n).collect();
        }
        let mut idx = sample(rng, n, m).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..m).map(|k| k % n).collect()
    }
}

/// Default parameters with inducing locations placed from the data. Each
/// node's adjustable-input columns come from data rows (the fully observed
/// rows when there are at least `M` of them, all rows otherwise; a sorted
/// uniform subsample when there are more than `M`). When `M` exceeds the
/// available rows, rows are reused with small Gaussian jitter. Parent
/// latent columns are drawn from `N(0, 1)`.
pub fn init_states(spec: GraphSpec, data: &Dataset, seed: u64) -> Result<Model> {
    spec.validate()?;
    if data.x.cols() != spec.input_dim {
        return Err(Error::Data(format!(
            "data has {} input columns, graph expects {}",
            data.x.cols(),
            spec.input_dim
        )));
    }
    if data.rows() == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let complete = data.complete_rows();
    let mut inducing = Vec::with_capacity(spec.nodes.len());
    for i in 0..spec.nodes.len() {
        let ns = &spec.nodes[i];
        let m = ns.inducing;
        let pool: Vec<usize> = if complete.len() >= m {
            complete.clone()
        } else {
            (0..data.rows()).collect()
        };
        let rows = pick_rows(pool.len(), m, &mut rng);
        let reused = m > pool.len();
        if reused && !ns.inputs.is_empty() {
            log::warn!(
                "node `{}`: {} inducing points for {} rows; reusing rows with jitter",
                ns.name,
                m,
                pool.len()
            );
        }
        let xs = data.x.select_cols(&ns.inputs);
        let sd: Vec<f64> = (0..xs.cols())
            .map(|c| {
                let col: Vec<f64> = (0..xs.rows()).map(|r| xs.at(r, c)).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt()
            })
            .collect();
        let d_in = spec.node_input_dim(i);
        let mut z = Vec::with_capacity(m * d_in);
        for (k, &r) in rows.iter().enumerate() {
            for (c, s) in sd.iter().enumerate() {
                let mut v = xs.at(pool[r], c);
                if reused && k >= pool.len() {
                    v += 0.01 * s.max(1e-3) * rng.sample::<f64, _>(StandardNormal);
                }
                z.push(v);
            }
            for _ in ns.inputs.len()..d_in {
                z.push(rng.sample(StandardNormal));
            }
        }
        inducing.push(Tensor::new(vec![m, d_in], z)?);
    }
    Model::new(spec, inducing, &mut rng)
}
