use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::forward::Eps;
use super::loss::{loss, LossKind, LossScope};
use super::{GraphSpec, Model, NodeSpec};
use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, NodeData};
use crate::error::Result;
use crate::likelihoods::LikelihoodConfig;
use crate::params::ParamStore;

const DIRECTIONS: usize = 6;
const STEP: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .expect("shape matches")
}

/// Toy graph: a Gaussian root, a Bernoulli child, and a mixed two-output
/// Gaussian grandchild fed by both, with randomized parameters and data.
fn toy(seed: u64) -> Result<(Model, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GraphSpec {
        input_dim: 1,
        nodes: vec![
            NodeSpec::new("a", 4).inputs(&[0]).likelihood(LikelihoodConfig::Gaussian),
            NodeSpec::new("b", 3).parents(&["a"]).inputs(&[0]).likelihood(LikelihoodConfig::Bernoulli),
            NodeSpec::new("c", 3)
                .parents(&["a", "b"])
                .latent_dim(2)
                .num_latents(3)
                .likelihood(LikelihoodConfig::MultitaskGaussian { tasks: 2 }),
        ],
    };
    let inducing = vec![randn(&mut rng, &[4, 1], 1.0), randn(&mut rng, &[3, 2], 1.0), randn(&mut rng, &[3, 2], 1.0)];
    let mut model = Model::new(spec, inducing, &mut rng)?;
    for id in model.params.ids() {
        let name = model.params.name(id).to_string();
        if name.ends_with(".z") {
            continue;
        }
        let v = model.params.get(id);
        let shape = v.shape().to_vec();
        let noise = randn(&mut rng, &shape, 0.3);
        let mut next = v.clone();
        for (x, e) in next.data_mut().iter_mut().zip(noise.data()) {
            *x += e;
        }
        model.params.set(id, next);
    }
    let n = 6;
    let x = randn(&mut rng, &[n, 1], 1.0);
    let mut nodes = BTreeMap::new();
    nodes.insert("a".into(), NodeData::observed(randn(&mut rng, &[n, 1], 1.0))?);
    let labels = Tensor::matrix(n, 1, (0..n).map(|i| (i % 2) as f64).collect())?;
    nodes.insert("b".into(), NodeData::observed(labels)?);
    let mut mask = Tensor::ones(&[n, 2]);
    mask.set(1, 0, 0.0);
    nodes.insert("c".into(), NodeData::new(randn(&mut rng, &[n, 2], 1.0), mask)?);
    Ok((model, Dataset::new(x, nodes)?))
}

fn eval(model: &Model, store: &ParamStore, data: &Dataset, kind: LossKind, scope: &LossScope, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(loss(model, &p, data, kind, 3, 0.7, scope, &mut Eps::Rng(&mut rng))?
        .total
        .item())
}

/// Largest relative error between the tape gradient of a whole loss on
/// a three-node toy graph and central finite differences, taken along
/// random directions in parameter space with the Monte-Carlo noise held
/// fixed.
pub fn loss_gradient_probe(kind: LossKind, seed: u64) -> Result<f64> {
    let (model, data) = toy(seed)?;
    let scope = LossScope::full(&model, &data)?;
    let eps_seed = seed ^ 0x5eed;
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| true);
    let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
    let total = loss(&model, &p, &data, kind, 3, 0.7, &scope, &mut Eps::Rng(&mut rng))?.total;
    let grads = tape.backward(total)?;
    let g: Vec<Tensor> = model.params.ids().map(|id| grads.wrt(p.var(id))).collect();

    let mut dir_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst: f64 = 0.0;
    for _ in 0..DIRECTIONS {
        let dirs: Vec<Tensor> = model.params.ids().map(|id| randn(&mut dir_rng, model.params.get(id).shape(), 1.0)).collect();
        let ad: f64 = g
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |sign: f64| -> Result<f64> {
            let mut store = model.params.clone();
            for (id, d) in model.params.ids().zip(&dirs) {
                let mut v = store.get(id).clone();
                for (x, e) in v.data_mut().iter_mut().zip(d.data()) {
                    *x += sign * STEP * e;
                }
                store.set(id, v);
            }
            eval(&model, &store, &data, kind, &scope, eps_seed)
        };
        let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * STEP);
        worst = worst.max((ad - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}
