use std::cell::Cell;
use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Model;
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::Bound;

/// Source of the standard-normal reparameterization noise.
pub enum Eps<'r> {
    Rng(&'r mut ChaCha8Rng),
    /// All draws are zero: a deterministic pass through posterior means.
    Zero,
}

impl Eps<'_> {
    fn draw(&mut self, n: usize) -> Tensor {
        match self {
            Eps::Rng(rng) => Tensor::vector((0..n).map(|_| StandardNormal.sample(&mut **rng)).collect()),
            Eps::Zero => Tensor::zeros(&[n]),
        }
    }
}

thread_local! {
    static CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`forward_sample`] calls made on this thread so far.
pub fn forward_call_count() -> usize {
    CALLS.with(Cell::get)
}

/// One node's contribution to a forward pass. Rows are indexed `s * N + n`.
#[derive(Debug, Clone, Copy)]
pub struct NodeForward<'t> {
    /// Sampled outputs, `S*N x D_f`.
    pub samples: Var<'t>,
    /// Per-sample output-space means, `S*N x D_f`.
    pub mean: Var<'t>,
    /// Per-sample output-space marginal variances, `S*N x D_f`.
    pub var: Var<'t>,
    /// Per-sample latent variances before mixing, `S*N x L`.
    pub latent_var: Var<'t>,
    /// Sum of the latents' `KL(q(u) || p(u))`.
    pub kl: Var<'t>,
    pub clamped: usize,
}

pub struct ForwardSamples<'t> {
    pub s: usize,
    pub n: usize,
    /// Indexed by node; `None` for nodes outside the requested set.
    pub nodes: Vec<Option<NodeForward<'t>>>,
}

fn tile_rows<'t>(v: Var<'t>, s: usize) -> Result<Var<'t>> {
    let shape = v.shape();
    let n = shape[0];
    let width: usize = shape[1..].iter().product();
    if s == 1 {
        return Ok(v);
    }
    let mut out_shape = shape.clone();
    out_shape[0] = s * n;
    v.reshape(&[1, n * width])?
        .broadcast_to(&[s, n * width])?
        .reshape(&out_shape)
}

fn tile_tensor(t: &Tensor, s: usize) -> Tensor {
    let idx: Vec<usize> = (0..s).flat_map(|_| 0..t.rows()).collect();
    t.select_rows(&idx)
}

/// Samples the nodes in `active` (which must contain the ancestors of each
/// of its members) in topological order. Each latent draws `S*N` noise
/// values from `eps` in row-major `(s, n)` order; the same sample index `s`
/// is threaded through parents and children.
pub fn forward_sample<'t>(
    model: &Model,
    p: &Bound<'t>,
    x: &Tensor,
    s: usize,
    active: &BTreeSet<usize>,
    eps: &mut Eps,
) -> Result<ForwardSamples<'t>> {
    CALLS.with(|c| c.set(c.get() + 1));
    let spec = &model.spec;
    if s == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if x.rank() != 2 || x.cols() != spec.input_dim {
        return Err(Error::Data(format!(
            "inputs {:?} do not have {} columns",
            x.shape(),
            spec.input_dim
        )));
    }
    let tape = p.tape;
    let n = x.rows();
    let rows = s * n;
    let mut out: Vec<Option<NodeForward<'t>>> = vec![None; spec.nodes.len()];
    for &i in &model.order {
        if !active.contains(&i) {
            continue;
        }
        let ns = &spec.nodes[i];
        let parents = spec.parent_indices(i);
        let params = &model.nodes[i];
        let x_cols = x.select_cols(&ns.inputs);
        let root = parents.is_empty();
        let input = if root {
            tape.constant(x_cols)
        } else {
            let mut parts = Vec::with_capacity(parents.len() + 1);
            if !ns.inputs.is_empty() {
                parts.push(tape.constant(tile_tensor(&x_cols, s)));
            }
            for &pi in &parents {
                let pf = out[pi].ok_or_else(|| {
                    Error::Graph(format!(
                        "node `{}` sampled before its parent `{}`",
                        ns.name, spec.nodes[pi].name
                    ))
                })?;
                parts.push(pf.samples);
            }
            tape.concat(&parts, 1)?
        };
        let z = p.var(params.z);
        let mut g = Vec::with_capacity(params.latents.len());
        let mut gm = Vec::with_capacity(params.latents.len());
        let mut gv = Vec::with_capacity(params.latents.len());
        let mut kl: Option<Var> = None;
        let mut clamped = 0;
        for (l, gp) in params.latents.iter().enumerate() {
            let ctx = format!("node `{}` latent {l}", ns.name);
            let f = gp.factors(p, z, &ctx)?;
            let marg = gp.marginal(p, z, input, &f)?;
            clamped += marg.clamped;
            let (mean, var) = if root {
                (tile_rows(marg.mean, s)?, tile_rows(marg.var, s)?)
            } else {
                (marg.mean, marg.var)
            };
            let e = tape.constant(eps.draw(rows));
            let sample = mean.add(var.sqrt()?.mul(e)?)?;
            g.push(sample.reshape(&[rows, 1])?);
            gm.push(mean.reshape(&[rows, 1])?);
            gv.push(var.reshape(&[rows, 1])?);
            let k = gp.kl(&f)?;
            kl = Some(match kl {
                Some(acc) => acc.add(k)?,
                None => k,
            });
        }
        let g = tape.concat(&g, 1)?;
        let gm = tape.concat(&gm, 1)?;
        let gv = tape.concat(&gv, 1)?;
        let (samples, mean, var) = match &params.mixing {
            Some(mix) => (mix.mix(p, g)?, mix.mix(p, gm)?, mix.mix_var(p, gv)?),
            None => (g, gm, gv),
        };
        out[i] = Some(NodeForward {
            samples,
            mean,
            var,
            latent_var: gv,
            kl: kl.expect("at least one latent"),
            clamped,
        });
    }
    Ok(ForwardSamples { s, n, nodes: out })
}
