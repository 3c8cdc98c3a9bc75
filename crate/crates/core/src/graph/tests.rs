use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::autodiff::{Tape, Tensor, DEFAULT_JITTER};
use crate::data::{Dataset, NodeData};
use crate::likelihoods::LikelihoodConfig;
use crate::params::ParamStore;
use crate::svgp::LatentGp;
use crate::testutil::{inv_det, mat, mul, se, transpose};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn sp(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn random_model(spec: GraphSpec, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inducing = (0..spec.nodes.len())
        .map(|i| randn(&mut rng, &[spec.nodes[i].inducing, spec.node_input_dim(i)], 1.0))
        .collect();
    let mut model = Model::new(spec, inducing, &mut rng).unwrap();
    for id in model.params.ids() {
        if model.params.name(id).ends_with(".z") {
            continue;
        }
        let mut v = model.params.get(id).clone();
        let noise = randn(&mut rng, v.shape(), 0.3);
        v.data_mut().iter_mut().zip(noise.data()).for_each(|(a, e)| *a += e);
        model.params.set(id, v);
    }
    model
}

fn gauss(name: &str, m: usize) -> NodeSpec {
    NodeSpec::new(name, m).likelihood(LikelihoodConfig::Gaussian)
}

fn five_node() -> GraphSpec {
    GraphSpec {
        input_dim: 1,
        nodes: vec![
            gauss("1", 3).inputs(&[0]),
            gauss("2", 3).parents(&["1"]),
            gauss("3", 3).parents(&["2"]),
            gauss("4", 3).parents(&["1"]),
            gauss("5", 4).parents(&["2", "4"]),
        ],
    }
}

fn random_data(spec: &GraphSpec, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[n, spec.input_dim], 1.0);
    let mut nodes = BTreeMap::new();
    for ns in &spec.nodes {
        let Some(lik) = &ns.likelihood else { continue };
        let d = lik.observed_dim();
        let y = match lik {
            LikelihoodConfig::Bernoulli => Tensor::matrix(n, 1, (0..n).map(|_| rng.random_range(0..2) as f64).collect()).unwrap(),
            LikelihoodConfig::Softmax { classes } => {
                Tensor::matrix(n, 1, (0..n).map(|_| rng.random_range(0..*classes) as f64).collect()).unwrap()
            }
            _ => randn(&mut rng, &[n, d], 1.0),
        };
        nodes.insert(ns.name.clone(), NodeData::observed(y).unwrap());
    }
    Dataset::new(x, nodes).unwrap()
}

/// Independent dense evaluation of one latent's `q(f)` marginals and KL.
struct DenseGp {
    z: Vec<Vec<f64>>,
    ls: Vec<f64>,
    os: f64,
    c: f64,
    alpha: Vec<f64>,
    mid: Vec<Vec<f64>>,
    kl: f64,
}

impl DenseGp {
    fn new(store: &ParamStore, gp: &LatentGp, z: &Tensor) -> Self {
        let m = gp.inducing;
        let zr: Vec<Vec<f64>> = (0..m).map(|i| z.row(i).to_vec()).collect();
        let ls: Vec<f64> = store.get(gp.kernel.raw_lengthscales).data().iter().map(|&r| sp(r)).collect();
        let os = sp(store.get(gp.kernel.raw_outputscale).item());
        let c = store.get(gp.mean.c).item();
        let mu: Vec<f64> = store.get(gp.m_u).data().to_vec();
        let raw = store.get(gp.l_raw);
        let l = mat(m, m, |i, j| if i == j { sp(raw.at(i, i)) } else if j < i { raw.at(i, j) } else { 0.0 });
        let s = mul(&l, &transpose(&l));
        let kzz = mat(m, m, |i, j| se(&zr[i], &zr[j], &ls, os) + if i == j { DEFAULT_JITTER * os } else { 0.0 });
        let (kinv, kdet) = inv_det(&kzz);
        let d = mat(m, 1, |i, _| mu[i] - c);
        let alpha: Vec<f64> = mul(&kinv, &d).iter().map(|r| r[0]).collect();
        let diff = mat(m, m, |i, j| kzz[i][j] - s[i][j]);
        let mid = mul(&mul(&kinv, &diff), &kinv);
        let tr: f64 = (0..m).map(|i| mul(&kinv, &s)[i][i]).sum();
        let maha = mul(&mul(&transpose(&d), &kinv), &d)[0][0];
        let (_, sdet) = inv_det(&s);
        let kl = 0.5 * (tr + maha - m as f64 + kdet.ln() - sdet.ln());
        Self { z: zr, ls, os, c, alpha, mid, kl }
    }

    fn at(&self, x: &[f64]) -> (f64, f64) {
        let k: Vec<f64> = self.z.iter().map(|z| se(x, z, &self.ls, self.os)).collect();
        let mean = self.c + k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        let mut q = 0.0;
        for i in 0..k.len() {
            for j in 0..k.len() {
                q += k[i] * self.mid[i][j] * k[j];
            }
        }
        (mean, (self.os - q).max(1e-12))
    }
}

fn dense(model: &Model, node: usize) -> DenseGp {
    let np = &model.nodes[node];
    assert_eq!(np.latents.len(), 1);
    DenseGp::new(&model.params, &np.latents[0], model.params.get(np.z))
}

fn draws(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn noise_var(model: &Model, i: usize) -> f64 {
    model.nodes[i].likelihood.as_ref().unwrap().noise_variances(&model.params)[0]
}

fn log_n(y: f64, mu: f64, v: f64) -> f64 {
    -0.5 * (LN_2PI + v.ln() + (y - mu).powi(2) / v)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn topological_examples() {
    let chain = GraphSpec {
        input_dim: 1,
        nodes: vec![
            NodeSpec::new("1", 2).inputs(&[0]),
            NodeSpec::new("2", 2).parents(&["1"]),
            NodeSpec::new("3", 2).parents(&["2"]),
        ],
    };
    assert_eq!(chain.validate().unwrap(), vec![0, 1, 2]);

    let order = five_node().validate().unwrap();
    let pos = |i: usize| order.iter().position(|&o| o == i).unwrap();
    assert!(pos(0) < pos(1) && pos(0) < pos(3));
    assert!(pos(1) < pos(2) && pos(1) < pos(4));
    assert!(pos(3) < pos(4));

    // declaration order breaks ties, and children declared first still wait
    let mut rev = five_node();
    rev.nodes.reverse();
    let order = rev.validate().unwrap();
    let names: Vec<&str> = order.iter().map(|&i| rev.nodes[i].name.as_str()).collect();
    assert_eq!(names, vec!["1", "4", "2", "5", "3"]);
}

#[test]
fn cycles_are_named() {
    let spec = GraphSpec {
        input_dim: 1,
        nodes: vec![
            NodeSpec::new("root", 2).inputs(&[0]),
            NodeSpec::new("a", 2).parents(&["root", "b"]),
            NodeSpec::new("b", 2).parents(&["a"]),
        ],
    };
    match spec.validate() {
        Err(crate::Error::Cycle(name)) => assert!(name == "a" || name == "b"),
        other => panic!("expected cycle, got {other:?}"),
    }
    let selfloop = GraphSpec {
        input_dim: 1,
        nodes: vec![NodeSpec::new("a", 2).inputs(&[0]).parents(&["a"])],
    };
    assert!(matches!(selfloop.validate(), Err(crate::Error::Cycle(_))));
}

#[test]
fn structural_errors() {
    let bad = |nodes: Vec<NodeSpec>| GraphSpec { input_dim: 1, nodes }.validate().is_err();
    assert!(bad(vec![NodeSpec::new("a", 2).parents(&["ghost"])]));
    assert!(bad(vec![NodeSpec::new("a", 2).inputs(&[3])]));
    assert!(bad(vec![NodeSpec::new("a", 2)]));
    assert!(bad(vec![NodeSpec::new("a", 2).inputs(&[0]), NodeSpec::new("a", 2).inputs(&[0])]));
    assert!(bad(vec![NodeSpec::new("a", 2).inputs(&[0]).alpha(0.0)]));
    assert!(bad(vec![NodeSpec::new("a", 2)
        .inputs(&[0])
        .likelihood(LikelihoodConfig::MultitaskGaussian { tasks: 3 })]));
}

#[test]
fn spec_json_round_trip_and_unknown_fields() {
    let spec = five_node();
    let s = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<GraphSpec>(&s).unwrap(), spec);
    let bad = r#"{"input_dim":1,"nodes":[{"name":"a","inducing":2,"inputs":[0],"colour":1}]}"#;
    assert!(serde_json::from_str::<GraphSpec>(bad).is_err());
    let edges = spec.edges();
    assert_eq!(edges, vec![(0, 1), (1, 2), (0, 3), (1, 4), (3, 4)]);
}

#[test]
fn ancestor_closure_of_five_node_observations() {
    let spec = five_node();
    let c = spec.ancestors_closure(&[3, 4]);
    assert_eq!(c.into_iter().collect::<Vec<_>>(), vec![0, 1, 3, 4]);
}

#[test]
fn parameters_are_prefixed_and_inducing_freezable() {
    let mut spec = five_node();
    spec.nodes[0].freeze_inducing = true;
    let model = random_model(spec, 1);
    assert!(model.params.is_frozen(model.nodes[0].z));
    assert!(!model.params.is_frozen(model.nodes[1].z));
    assert!(model.params.find("5.latent0.m_u").is_some());
    let owner = model.param_owner();
    assert!(owner.iter().all(|&o| o < 5));
    for i in 0..5 {
        assert!(model.node_params(i).iter().all(|&id| owner[id] == i));
    }
}

#[test]
fn zero_noise_pass_is_the_mean() {
    let model = random_model(five_node(), 2);
    let data = random_data(&model.spec, 7, 3);
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let all = (0..5).collect();
    let f = forward_sample(&model, &p, &data.x, 1, &all, &mut Eps::Zero).unwrap();
    for nf in f.nodes.iter().flatten() {
        assert_eq!(nf.samples.value().data(), nf.mean.value().data());
    }
    // and the root mean matches the dense oracle
    let d = dense(&model, 0);
    for n in 0..7 {
        let (m, v) = d.at(data.x.row(n));
        let nf = f.nodes[0].unwrap();
        assert!(close(nf.mean.value().at(n, 0), m, 1e-9));
        assert!(close(nf.var.value().at(n, 0), v, 1e-9));
    }
}

#[test]
fn wrong_input_width_is_an_error() {
    let model = random_model(five_node(), 2);
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let x = Tensor::zeros(&[3, 2]);
    let all = (0..5).collect();
    assert!(forward_sample(&model, &p, &x, 1, &all, &mut Eps::Zero).is_err());
}

#[test]
fn single_gaussian_node_elbo_matches_oracle() {
    let spec = GraphSpec {
        input_dim: 1,
        nodes: vec![gauss("a", 3).inputs(&[0])],
    };
    let model = random_model(spec, 11);
    let data = random_data(&model.spec, 5, 12);
    let (s, beta) = (4, 0.8);
    let got = elbo_loss(&model, &data, s, beta, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();

    let d = dense(&model, 0);
    let e = draws(&mut ChaCha8Rng::seed_from_u64(3), s * 5);
    let nv = noise_var(&model, 0);
    let y = &data.nodes["a"].y;
    let mut ll = 0.0;
    for n in 0..5 {
        let (m, v) = d.at(data.x.row(n));
        let mut acc = 0.0;
        for si in 0..s {
            acc += log_n(y.at(n, 0), m + v.sqrt() * e[si * 5 + n], nv);
        }
        ll += acc / s as f64;
    }
    let want = -ll + beta * d.kl;
    assert!(close(got, want, 1e-8), "{got} vs {want}");
}

fn chain_spec() -> GraphSpec {
    GraphSpec {
        input_dim: 1,
        nodes: vec![NodeSpec::new("a", 3).inputs(&[0]), gauss("b", 3).parents(&["a"])],
    }
}

#[test]
fn chain_without_intermediate_likelihood_is_a_dgp() {
    let model = random_model(chain_spec(), 21);
    let data = random_data(&model.spec, 6, 22);
    let (s, beta, n) = (5, 1.3, 6);
    let got = elbo_loss(&model, &data, s, beta, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

    let (da, db) = (dense(&model, 0), dense(&model, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ea = draws(&mut rng, s * n);
    let eb = draws(&mut rng, s * n);
    let nv = noise_var(&model, 1);
    let y = &data.nodes["b"].y;
    let mut ll = 0.0;
    for si in 0..s {
        for r in 0..n {
            let (ma, va) = da.at(data.x.row(r));
            let h = ma + va.sqrt() * ea[si * n + r];
            let (mb, vb) = db.at(&[h]);
            ll += log_n(y.at(r, 0), mb + vb.sqrt() * eb[si * n + r], nv) / s as f64;
        }
    }
    let want = -ll + beta * (da.kl + db.kl);
    assert!(close(got, want, 1e-8), "{got} vs {want}");
}

#[test]
fn two_sample_pll_toy() {
    let tape = Tape::new();
    let lp = tape.constant(Tensor::matrix(2, 1, vec![0.0, -2.0]).unwrap());
    let v = reduce_samples(LossKind::Pll, lp).unwrap().item();
    assert!((v - -0.566219).abs() < 1e-6, "{v}");
    assert!((v / 2.0 - -0.283110).abs() < 1e-6);
    let e = reduce_samples(LossKind::Elbo, lp).unwrap().item();
    assert_eq!(e, -1.0);
}

fn terms(model: &Model, data: &Dataset, kind: LossKind, s: usize, beta: f64, seed: u64) -> (f64, Vec<(usize, f64)>, f64) {
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let scope = LossScope::full(model, data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = loss(model, &p, data, kind, s, beta, &scope, &mut Eps::Rng(&mut rng)).unwrap();
    (t.total.item(), t.ll.iter().map(|(i, v)| (*i, v.item())).collect(), t.kl.item())
}

#[test]
fn beta_zero_leaves_only_likelihood() {
    let model = random_model(five_node(), 31);
    let data = random_data(&model.spec, 8, 32);
    let (total, ll, kl) = terms(&model, &data, LossKind::Pll, 6, 0.0, 4);
    assert!(kl > 0.0);
    let neg: f64 = -ll.iter().map(|p| p.1).sum::<f64>();
    assert!(close(total, neg, 1e-14));
}

#[test]
fn dropping_observations_removes_only_that_likelihood() {
    let model = random_model(five_node(), 41);
    let data = random_data(&model.spec, 8, 42);
    let (t_all, ll_all, kl_all) = terms(&model, &data, LossKind::Elbo, 5, 0.9, 5);
    let mut less = data.clone();
    less.nodes.remove("2");
    let (t_less, ll_less, kl_less) = terms(&model, &less, LossKind::Elbo, 5, 0.9, 5);
    assert_eq!(kl_all.to_bits(), kl_less.to_bits());
    let ll2 = ll_all.iter().find(|p| p.0 == 1).unwrap().1;
    assert!(close(t_less - t_all, ll2, 1e-10));
    for (i, v) in &ll_less {
        assert_eq!(ll_all.iter().find(|p| p.0 == *i).unwrap().1.to_bits(), v.to_bits());
    }
}

#[test]
fn alpha_rescales_only_its_node() {
    let base = random_model(five_node(), 51);
    let data = random_data(&base.spec, 8, 52);
    let with_alpha = |a: f64| {
        let mut m = base.clone();
        m.spec.nodes[3].alpha = Some(a);
        terms(&m, &data, LossKind::Pll, 5, 1.0, 6)
    };
    let (t1, ll1, _) = with_alpha(1.0);
    let (t3, ll3, _) = with_alpha(3.0);
    for ((i, a), (_, b)) in ll1.iter().zip(&ll3) {
        if *i == 3 {
            assert!(close(*a, 3.0 * b, 1e-12));
        } else {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    // d total / d(1/alpha) is minus the raw node likelihood
    let h = 1e-4;
    let (tp, _, _) = with_alpha(1.0 / (1.0 + h));
    let (tm, _, _) = with_alpha(1.0 / (1.0 - h));
    let fd = (tp - tm) / (2.0 * h);
    let raw = ll1.iter().find(|p| p.0 == 3).unwrap().1;
    assert!(close(fd, -raw, 1e-7), "{fd} vs {}", -raw);
    assert!(t1 != t3);
}

#[test]
fn empty_mask_on_observed_node_is_an_error() {
    let model = random_model(five_node(), 61);
    let mut data = random_data(&model.spec, 4, 62);
    let y = data.nodes["3"].y.clone();
    data.nodes.insert("3".into(), NodeData::new(y, Tensor::zeros(&[4, 1])).unwrap());
    assert!(observed_nodes(&model, &data).is_err());
    assert!(elbo_loss(&model, &data, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(observed_nodes(&model, &data.without_empty_nodes()).is_ok());
}

#[test]
fn losses_are_deterministic_across_thread_counts() {
    let model = random_model(five_node(), 71);
    let data = random_data(&model.spec, 300, 72);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let e = elbo_loss(&model, &data, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            let p = pll_loss(&model, &data, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            (e.to_bits(), p.to_bits())
        })
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, run(1));
}

#[test]
fn whole_loss_gradient_probe_passes() {
    for kind in [LossKind::Elbo, LossKind::Pll] {
        let err = loss_gradient_probe(kind, 5).unwrap();
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn single_node_prediction_matches_marginal() {
    let spec = GraphSpec {
        input_dim: 1,
        nodes: vec![gauss("a", 4).inputs(&[0])],
    };
    let mut model = random_model(spec, 81);
    model.params.set(model.nodes[0].z, Tensor::matrix(4, 1, vec![-1.0, -0.3, 0.4, 1.1]).unwrap());
    let xq = Tensor::matrix(5, 1, vec![-1.0, -0.3, 0.0, 0.4, 1.2]).unwrap();
    let pred = predict(&model, &xq, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let a = pred.node("a").unwrap();
    let d = dense(&model, 0);
    let nv = noise_var(&model, 0);
    for n in 0..5 {
        let (m, v) = d.at(xq.row(n));
        assert!(close(a.mean.at(n, 0), m, 1e-9));
        assert!(close(a.var.at(n, 0), v, 1e-9), "{} vs {v}", a.var.at(n, 0));
        assert!(close(a.obs_var.as_ref().unwrap().at(n, 0), v + nv, 1e-9));
    }
    assert_eq!(a.samples.shape(), &[50, 5, 1]);
}

#[test]
fn chain_prediction_moments_match_independent_dgp_sampler() {
    let model = random_model(chain_spec(), 91);
    let xq = Tensor::matrix(2, 1, vec![-0.5, 0.8]).unwrap();
    let s = 100_000;
    let pred = predict(&model, &xq, s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = pred.node("b").unwrap();
    let (da, db) = (dense(&model, 0), dense(&model, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for n in 0..2 {
        let (ma, va) = da.at(xq.row(n));
        let (mut sm, mut sm2, mut sv) = (0.0, 0.0, 0.0);
        for _ in 0..s {
            let h = ma + va.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let (mb, vb) = db.at(&[h]);
            sm += mb;
            sm2 += mb * mb;
            sv += vb;
        }
        let mean = sm / s as f64;
        let var_means = sm2 / s as f64 - mean * mean;
        let total = sv / s as f64 + var_means;
        let se = (var_means / s as f64).sqrt();
        assert!((b.mean.at(n, 0) - mean).abs() < 5.0 * se * 2f64.sqrt() + 1e-12, "mean {} vs {mean}", b.mean.at(n, 0));
        assert!((b.var.at(n, 0) - total).abs() < 0.03 * total, "var {} vs {total}", b.var.at(n, 0));
    }
}

#[test]
fn degenerate_prior_predicts_zero_variance() {
    let spec = GraphSpec {
        input_dim: 1,
        nodes: vec![NodeSpec::new("a", 3).inputs(&[0])],
    };
    let mut model = random_model(spec, 95);
    let gp = model.nodes[0].latents[0].clone();
    model.params.set(gp.kernel.raw_outputscale, Tensor::scalar(-60.0));
    model.params.set(gp.l_raw, Tensor::eye(3).map(|v| if v == 1.0 { -60.0 } else { 0.0 }));
    let xq = Tensor::matrix(3, 1, vec![-0.5, 0.0, 2.0]).unwrap();
    let pred = predict(&model, &xq, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(pred.nodes[0].var.max_abs() <= 1e-11);
}

#[test]
fn prediction_is_reproducible() {
    let model = random_model(five_node(), 96);
    let xq = randn(&mut ChaCha8Rng::seed_from_u64(4), &[6, 1], 1.0);
    let a = predict(&model, &xq, 30, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = predict(&model, &xq, 30, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mixed_node_covariance_is_coregionalized() {
    let spec = GraphSpec {
        input_dim: 1,
        nodes: vec![NodeSpec::new("m", 3)
            .inputs(&[0])
            .latent_dim(2)
            .num_latents(3)
            .likelihood(LikelihoodConfig::MultitaskGaussian { tasks: 2 })],
    };
    let model = random_model(spec, 97);
    let xq = Tensor::matrix(2, 1, vec![0.1, -0.7]).unwrap();
    let pred = predict(&model, &xq, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let node = &pred.nodes[0];
    let np = &model.nodes[0];
    let bm = model.params.get(np.mixing.as_ref().unwrap().b);
    let z = model.params.get(np.z);
    let dgps: Vec<DenseGp> = np.latents.iter().map(|g| DenseGp::new(&model.params, g, z)).collect();
    let noise = np.likelihood.as_ref().unwrap().noise_variances(&model.params);
    for n in 0..2 {
        let lat: Vec<(f64, f64)> = dgps.iter().map(|g| g.at(xq.row(n))).collect();
        let cov = node.cov_at(n);
        let obs = node.obs_cov_at(n);
        for a in 0..2 {
            let mean: f64 = (0..3).map(|k| bm.at(a, k) * lat[k].0).sum();
            assert!(close(node.mean.at(n, a), mean, 1e-9));
            for b in 0..2 {
                let want: f64 = (0..3).map(|k| bm.at(a, k) * lat[k].1 * bm.at(b, k)).sum();
                assert!(close(cov.at(a, b), want, 1e-9));
                let extra = if a == b { noise[a] } else { 0.0 };
                assert!(close(obs.at(a, b), want + extra, 1e-9));
            }
            assert_eq!(node.var.at(n, a), cov.at(a, a));
        }
    }
}

#[test]
fn conditioning_examples() {
    let (mean, cov) = condition_gaussian(&[0.0, 0.0], &Tensor::eye(2), &[1], &[1.0]).unwrap();
    assert_eq!(mean, vec![0.0, 1.0]);
    assert_eq!(cov.at(0, 0), 1.0);

    let rho = 0.6;
    let sigma = Tensor::matrix(2, 2, vec![1.0, rho, rho, 1.0]).unwrap();
    let (mean, cov) = condition_gaussian(&[0.0, 0.0], &sigma, &[1], &[1.0]).unwrap();
    assert!((mean[0] - rho).abs() < 1e-14);
    assert!((cov.at(0, 0) - (1.0 - rho * rho)).abs() < 1e-14);
    assert_eq!((cov.at(1, 1), cov.at(0, 1)), (0.0, 0.0));

    let (mean, cov) = condition_gaussian(&[0.3, 0.0], &sigma, &[0], &[2.0]).unwrap();
    assert_eq!(mean[0], 2.0);
    assert_eq!(cov.at(0, 0), 0.0);

    assert!(condition_gaussian(&[0.0], &sigma, &[0], &[1.0]).is_err());
    assert!(condition_gaussian(&[0.0, 0.0], &sigma, &[0, 0], &[1.0, 1.0]).is_err());
}

#[test]
fn conditioning_matches_dense_oracle() {
    let a = [[2.0, 0.3, -0.4], [0.3, 1.5, 0.6], [-0.4, 0.6, 1.2]];
    let sigma = Tensor::from_rows(&a.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let mu = [0.1, -0.2, 0.5];
    let (mean, cov) = condition_gaussian(&mu, &sigma, &[2, 0], &[1.0, -1.0]).unwrap();
    // oracle over a = {1}, b = {2, 0}
    let sbb = vec![vec![a[2][2], a[2][0]], vec![a[0][2], a[0][0]]];
    let sab = vec![vec![a[1][2], a[1][0]]];
    let (inv, _) = inv_det(&sbb);
    let gain = mul(&sab, &inv);
    let r = [1.0 - mu[2], -1.0 - mu[0]];
    let want_mean = mu[1] + gain[0][0] * r[0] + gain[0][1] * r[1];
    let want_var = a[1][1] - mul(&gain, &transpose(&sab))[0][0];
    assert!((mean[1] - want_mean).abs() < 1e-12);
    assert!((cov.at(1, 1) - want_var).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn single_sample_pll_equals_elbo_bitwise(seed in 0u64..1000) {
        let model = random_model(five_node(), seed);
        let data = random_data(&model.spec, 5, seed + 1);
        let e = elbo_loss(&model, &data, 1, 0.7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let p = pll_loss(&model, &data, 1, 0.7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(e.to_bits(), p.to_bits());
    }

    #[test]
    fn pll_likelihood_dominates_elbo(seed in 0u64..1000) {
        let model = random_model(five_node(), seed);
        let data = random_data(&model.spec, 6, seed + 2);
        let (_, e, ke) = terms(&model, &data, LossKind::Elbo, 20, 1.0, seed);
        let (_, p, kp) = terms(&model, &data, LossKind::Pll, 20, 1.0, seed);
        prop_assert_eq!(ke.to_bits(), kp.to_bits());
        for ((i, a), (j, b)) in e.iter().zip(&p) {
            prop_assert_eq!(i, j);
            prop_assert!(b >= a, "node {}: pll {} < elbo {}", i, b, a);
        }
    }

    #[test]
    fn conditional_covariance_shrinks(vals in prop::collection::vec(-1.0f64..1.0, 12), obs in 0usize..3) {
        let m = mat(3, 4, |i, j| vals[i * 4 + j]);
        let mut s = mul(&m, &transpose(&m));
        for (i, row) in s.iter_mut().enumerate() { row[i] += 0.1; }
        let sigma = Tensor::from_rows(&s).unwrap();
        let (_, cov) = condition_gaussian(&[0.0; 3], &sigma, &[obs], &[0.5]).unwrap();
        for i in 0..3 {
            prop_assert!(cov.at(i, i) >= -1e-12);
            prop_assert!(cov.at(i, i) <= sigma.at(i, i) + 1e-12);
        }
    }
}
