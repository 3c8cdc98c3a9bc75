use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::GraphSpec;
use crate::autodiff::{inv_softplus, Tensor};
use crate::error::{Error, Result};
use crate::kernels::Mixing;
use crate::likelihoods::Likelihood;
use crate::params::{ParamId, ParamStore};
use crate::svgp::LatentGp;

/// Parameters of one node. All latents share the inducing locations `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub z: ParamId,
    pub latents: Vec<LatentGp>,
    pub mixing: Option<Mixing>,
    pub likelihood: Option<Likelihood>,
}

/// A graph spec together with every learnable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: GraphSpec,
    pub order: Vec<usize>,
    pub params: ParamStore,
    pub nodes: Vec<NodeParams>,
}

impl Model {
    /// Builds default-initialized parameters, with every `q(u)` at its prior,
    /// around the given inducing locations (one `M_i x D_in_i` matrix per node, declaration order).
    /// `rng` draws non-square mixing matrices and softmax weights.
    pub fn new(spec: GraphSpec, inducing: Vec<Tensor>, rng: &mut impl Rng) -> Result<Model> {
        let order = spec.validate()?;
        if inducing.len() != spec.nodes.len() {
            return Err(Error::Config(format!(
                "{} inducing matrices for {} nodes",
                inducing.len(),
                spec.nodes.len()
            )));
        }
        let mut params = ParamStore::new();
        let mut nodes = Vec::with_capacity(spec.nodes.len());
        for (i, (ns, z)) in spec.nodes.iter().zip(inducing).enumerate() {
            let d_in = spec.node_input_dim(i);
            if z.shape() != [ns.inducing, d_in] {
                return Err(Error::Config(format!(
                    "node `{}`: inducing locations {:?}, expected [{}, {}]",
                    ns.name,
                    z.shape(),
                    ns.inducing,
                    d_in
                )));
            }
            let prefix = ns.name.clone();
            let latents: Vec<LatentGp> = (0..ns.latents())
                .map(|l| LatentGp {
                    whiten: ns.whiten,
                    ..LatentGp::init(&mut params, &format!("{prefix}.latent{l}"), d_in, ns.inducing)
                })
                .collect();
            for l in &latents {
                let (a, b) = (ns.lengthscale.unwrap_or(1.0), ns.parent_lengthscale.unwrap_or(1.0));
                let init: Vec<f64> = (0..d_in).map(|k| inv_softplus(if k < ns.inputs.len() { a } else { b })).collect();
                params.set(l.kernel.raw_lengthscales, Tensor::vector(init));
                l.reset_to_prior(&mut params, &z)?;
            }
            let zid = params.add(format!("{prefix}.z"), z);
            params.freeze(zid, ns.freeze_inducing);
            let mixing = if ns.mixed() {
                let (d, l) = (ns.latent_dim, ns.latents());
                let b = if d == l {
                    Tensor::eye(d)
                } else {
                    Tensor::new(vec![d, l], (0..d * l).map(|_| rng.sample(StandardNormal)).collect())?
                };
                Some(Mixing::init(&mut params, &prefix, b))
            } else {
                None
            };
            let likelihood = match &ns.likelihood {
                Some(cfg) => Some(Likelihood::init(
                    &mut params,
                    &format!("{prefix}.likelihood"),
                    cfg,
                    ns.latent_dim,
                    rng,
                )?),
                None => None,
            };
            nodes.push(NodeParams {
                z: zid,
                latents,
                mixing,
                likelihood,
            });
        }
        Ok(Model {
            spec,
            order,
            params,
            nodes,
        })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.spec.index_of(name)
    }

    /// GP parameters of node `i`: inducing locations, latent kernels, means,
    /// variational factors and the mixing matrix.
    pub fn gp_params(&self, i: usize) -> Vec<ParamId> {
        let n = &self.nodes[i];
        let mut ids = vec![n.z];
        for l in &n.latents {
            ids.extend([
                l.kernel.raw_lengthscales,
                l.kernel.raw_outputscale,
                l.mean.c,
                l.m_u,
                l.l_raw,
            ]);
        }
        if let Some(m) = &n.mixing {
            ids.push(m.b);
        }
        ids
    }

    pub fn likelihood_params(&self, i: usize) -> Vec<ParamId> {
        self.nodes[i].likelihood.as_ref().map_or(vec![], |l| l.params())
    }

    pub fn node_params(&self, i: usize) -> Vec<ParamId> {
        let mut ids = self.gp_params(i);
        ids.extend(self.likelihood_params(i));
        ids
    }

    /// Owning node of every parameter.
    pub fn param_owner(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.params.len()];
        for i in 0..self.nodes.len() {
            for id in self.node_params(i) {
                owner[id] = i;
            }
        }
        owner
    }
}
