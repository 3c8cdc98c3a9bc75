use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_sample, Eps};
use super::Model;
use crate::autodiff::linalg;
use crate::autodiff::{cholesky_with_jitter, sigmoid, Tape, Tensor, DEFAULT_JITTER};
use crate::error::{shape_err, Error, Result};
use crate::likelihoods::Likelihood;

/// Monte-Carlo predictive moments of one node at `N` query inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub name: String,
    /// `N x D`.
    pub mean: Tensor,
    /// Latent predictive variance, `N x D`.
    pub var: Tensor,
    /// Cross-output covariance, `N x D x D`.
    pub cov: Tensor,
    /// Gaussian noise variances per output; empty for other likelihoods.
    pub noise: Vec<f64>,
    /// `var + noise` for Gaussian nodes.
    pub obs_var: Option<Tensor>,
    /// Mean class probabilities, `N x C` (softmax) or `N x 1` (Bernoulli,
    /// probability of class 1).
    pub probs: Option<Tensor>,
    /// Sampled outputs, `S x N x D`.
    pub samples: Tensor,
}

impl NodeSummary {
    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    /// `D x D` latent covariance at row `n`.
    pub fn cov_at(&self, n: usize) -> Tensor {
        let d = self.dim();
        Tensor::from_parts(vec![d, d], self.cov.data()[n * d * d..(n + 1) * d * d].to_vec())
    }

    /// Observation-space covariance at row `n`: latent covariance plus the
    /// noise on the diagonal.
    pub fn obs_cov_at(&self, n: usize) -> Tensor {
        let mut c = self.cov_at(n);
        for (i, nv) in self.noise.iter().enumerate() {
            let v = c.at(i, i) + nv;
            c.set(i, i, v);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub samples: usize,
    pub nodes: Vec<NodeSummary>,
}

impl PredictiveSummary {
    pub fn node(&self, name: &str) -> Option<&NodeSummary> {
        self.nodes.iter().find(|n| n.name == name)
    }
}

/// Samples every node `s` times at the query inputs and summarizes the
/// per-sample Gaussians by the law of total variance. Nodes are listed in
/// declaration order.
pub fn predict(model: &Model, x: &Tensor, s: usize, rng: &mut ChaCha8Rng) -> Result<PredictiveSummary> {
    predict_with(model, x, s, &mut Eps::Rng(rng))
}

pub fn predict_with(model: &Model, x: &Tensor, s: usize, eps: &mut Eps) -> Result<PredictiveSummary> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let all = (0..model.spec.nodes.len()).collect();
    let fwd = forward_sample(model, &p, x, s, &all, eps)?;
    let n = fwd.n;
    let mut nodes = Vec::with_capacity(model.spec.nodes.len());
    for (i, ns) in model.spec.nodes.iter().enumerate() {
        let f = fwd.nodes[i].expect("all nodes sampled");
        let params = &model.nodes[i];
        let means = f.mean.value();
        let vars = f.var.value();
        let lvars = f.latent_var.value();
        let samples = f.samples.value();
        let d = means.cols();
        let l = lvars.cols();
        let inv_s = 1.0 / s as f64;

        let mut mean = vec![0.0; n * d];
        let mut mean_v = vec![0.0; n * d];
        let mut mean_lv = vec![0.0; n * l];
        for si in 0..s {
            for r in 0..n {
                let row = si * n + r;
                for k in 0..d {
                    mean[r * d + k] += means.at(row, k);
                    mean_v[r * d + k] += vars.at(row, k);
                }
                for k in 0..l {
                    mean_lv[r * l + k] += lvars.at(row, k);
                }
            }
        }
        mean.iter_mut().chain(mean_v.iter_mut()).chain(mean_lv.iter_mut()).for_each(|v| *v *= inv_s);

        // empirical covariance of the per-sample means
        let mut cov = vec![0.0; n * d * d];
        for si in 0..s {
            for r in 0..n {
                let row = si * n + r;
                for a in 0..d {
                    let da = means.at(row, a) - mean[r * d + a];
                    for b in 0..d {
                        cov[(r * d + a) * d + b] += da * (means.at(row, b) - mean[r * d + b]) * inv_s;
                    }
                }
            }
        }
        let mut var = vec![0.0; n * d];
        match &params.mixing {
            Some(mix) => {
                let bm = model.params.get(mix.b);
                for r in 0..n {
                    for a in 0..d {
                        for b in 0..d {
                            let within: f64 = (0..l).map(|k| bm.at(a, k) * mean_lv[r * l + k] * bm.at(b, k)).sum();
                            cov[(r * d + a) * d + b] += within;
                        }
                        var[r * d + a] = cov[(r * d + a) * d + a];
                    }
                }
            }
            None => {
                for r in 0..n {
                    for a in 0..d {
                        cov[(r * d + a) * d + a] += mean_v[r * d + a];
                        var[r * d + a] = cov[(r * d + a) * d + a];
                    }
                }
            }
        }
        let mean = Tensor::from_parts(vec![n, d], mean);
        let var = Tensor::from_parts(vec![n, d], var);

        let mut noise = vec![];
        let mut obs_var = None;
        let mut probs = None;
        match &params.likelihood {
            Some(lik @ (Likelihood::Gaussian { .. } | Likelihood::MultitaskGaussian { .. })) => {
                noise = lik.noise_variances(&model.params);
                let mut ov = var.clone();
                for r in 0..n {
                    for (k, nv) in noise.iter().enumerate() {
                        let v = ov.at(r, k) + nv;
                        ov.set(r, k, v);
                    }
                }
                obs_var = Some(ov);
            }
            Some(Likelihood::Bernoulli) => {
                let mut pr = vec![0.0; n];
                for si in 0..s {
                    for r in 0..n {
                        pr[r] += sigmoid(samples.at(si * n + r, 0)) * inv_s;
                    }
                }
                probs = Some(Tensor::from_parts(vec![n, 1], pr));
            }
            Some(Likelihood::Softmax { w, classes, .. }) => {
                let logits = samples.matmul(&model.params.get(*w).transposed())?;
                let c = *classes;
                let mut pr = vec![0.0; n * c];
                for si in 0..s {
                    for r in 0..n {
                        let row = logits.row(si * n + r);
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for k in 0..c {
                            pr[r * c + k] += (row[k] - m).exp() / z * inv_s;
                        }
                    }
                }
                probs = Some(Tensor::from_parts(vec![n, c], pr));
            }
            None => {}
        }
        nodes.push(NodeSummary {
            name: ns.name.clone(),
            mean,
            var,
            cov: Tensor::from_parts(vec![n, d, d], cov),
            noise,
            obs_var,
            probs,
            samples: Tensor::from_parts(vec![s, n, d], samples.data().to_vec()),
        });
    }
    Ok(PredictiveSummary { samples: s, nodes })
}

/// Conditions a joint Gaussian over `D` outputs on `values` at the indices
/// `observed`. Returns the full-length mean and `D x D` covariance with the
/// observed entries fixed at their values and zero (co)variance. The
/// observed block is factorized exactly first and with the escalating jitter
/// policy if that fails.
pub fn condition_gaussian(mean: &[f64], cov: &Tensor, observed: &[usize], values: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    let d = mean.len();
    if cov.shape() != [d, d] || observed.len() != values.len() {
        return shape_err(
            "condition_gaussian",
            format!("mean {d}, covariance {:?}, {} indices, {} values", cov.shape(), observed.len(), values.len()),
        );
    }
    if let Some(&bad) = observed.iter().find(|&&i| i >= d) {
        return shape_err("condition_gaussian", format!("observed index {bad} out of range {d}"));
    }
    let mut seen = vec![false; d];
    for &i in observed {
        if std::mem::replace(&mut seen[i], true) {
            return shape_err("condition_gaussian", format!("observed index {i} repeated"));
        }
    }
    let free: Vec<usize> = (0..d).filter(|&i| !seen[i]).collect();
    let (k, a) = (observed.len(), free.len());
    let mut out_mean = mean.to_vec();
    let mut out_cov = cov.clone();
    for (&i, &v) in observed.iter().zip(values) {
        out_mean[i] = v;
    }
    if k == 0 {
        return Ok((out_mean, out_cov));
    }
    let sbb = cov.select_rows(observed).select_cols(observed);
    let lb = match cholesky_with_jitter(&sbb, 0.0, "condition_gaussian") {
        Ok((l, _)) => l,
        Err(Error::Cholesky { .. }) => cholesky_with_jitter(&sbb, DEFAULT_JITTER, "condition_gaussian")?.0,
        Err(e) => return Err(e),
    };
    // A = L^-1 S_ba (k x a), w = L^-1 (y_b - mu_b)
    let mut am = cov.select_rows(observed).select_cols(&free).into_data();
    linalg::solve_triangular(lb.data(), k, false, false, &mut am, a);
    let mut w: Vec<f64> = observed.iter().zip(values).map(|(&i, v)| v - mean[i]).collect();
    linalg::solve_triangular(lb.data(), k, false, false, &mut w, 1);
    for (ai, &fi) in free.iter().enumerate() {
        out_mean[fi] = mean[fi] + (0..k).map(|j| am[j * a + ai] * w[j]).sum::<f64>();
        for (bi, &fj) in free.iter().enumerate() {
            let reduce: f64 = (0..k).map(|j| am[j * a + ai] * am[j * a + bi]).sum();
            out_cov.set(fi, fj, cov.at(fi, fj) - reduce);
        }
    }
    for &i in observed {
        for j in 0..d {
            out_cov.set(i, j, 0.0);
            out_cov.set(j, i, 0.0);
        }
    }
    Ok((out_mean, out_cov))
}
