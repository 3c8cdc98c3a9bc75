//! Observation likelihoods `p(y | f)`.
//!
//! Observations of a node are stored as an `N x D_y` matrix with an
//! elementwise 0/1 mask; class labels are stored as their integer value.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inv_softplus, softplus, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Initial Gaussian noise variance on standardized data.
pub const INIT_NOISE_VAR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LikelihoodConfig {
    Gaussian,
    MultitaskGaussian { tasks: usize },
    Bernoulli,
    Softmax { classes: usize },
}

impl LikelihoodConfig {
    /// Columns of the observation matrix.
    pub fn observed_dim(&self) -> usize {
        match self {
            LikelihoodConfig::MultitaskGaussian { tasks } => *tasks,
            _ => 1,
        }
    }

    /// Latent output dimension this likelihood requires, if it constrains it.
    pub fn required_latent_dim(&self) -> Option<usize> {
        match self {
            LikelihoodConfig::Gaussian | LikelihoodConfig::Bernoulli => Some(1),
            LikelihoodConfig::MultitaskGaussian { tasks } => Some(*tasks),
            LikelihoodConfig::Softmax { .. } => None,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(
            self,
            LikelihoodConfig::Gaussian | LikelihoodConfig::MultitaskGaussian { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Likelihood {
    Gaussian { raw_noise: ParamId },
    MultitaskGaussian { raw_noise: ParamId, tasks: usize },
    Bernoulli,
    /// Logits `W f` with `W` of shape `classes x latent_dim`.
    Softmax { w: ParamId, classes: usize, latent_dim: usize },
}

impl Likelihood {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &LikelihoodConfig, latent_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if let Some(d) = cfg.required_latent_dim() {
            if d != latent_dim {
                return Err(Error::Config(format!(
                    "{prefix}: likelihood needs latent dimension {d}, node has {latent_dim}"
                )));
            }
        }
        let raw = inv_softplus(INIT_NOISE_VAR);
        Ok(match *cfg {
            LikelihoodConfig::Gaussian => Likelihood::Gaussian {
                raw_noise: store.add(format!("{prefix}.raw_noise"), Tensor::full(&[1], raw)),
            },
            LikelihoodConfig::MultitaskGaussian { tasks } => Likelihood::MultitaskGaussian {
                raw_noise: store.add(format!("{prefix}.raw_noise"), Tensor::full(&[tasks], raw)),
                tasks,
            },
            LikelihoodConfig::Bernoulli => Likelihood::Bernoulli,
            LikelihoodConfig::Softmax { classes } => {
                if classes < 2 {
                    return Err(Error::Config(format!("{prefix}: softmax needs at least 2 classes")));
                }
                let w = (0..classes * latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                Likelihood::Softmax {
                    w: store.add(format!("{prefix}.w"), Tensor::new(vec![classes, latent_dim], w)?),
                    classes,
                    latent_dim,
                }
            }
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Likelihood::Gaussian { raw_noise } | Likelihood::MultitaskGaussian { raw_noise, .. } => {
                vec![*raw_noise]
            }
            Likelihood::Bernoulli => vec![],
            Likelihood::Softmax { w, .. } => vec![*w],
        }
    }

    pub fn observed_dim(&self) -> usize {
        match self {
            Likelihood::MultitaskGaussian { tasks, .. } => *tasks,
            _ => 1,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Likelihood::Gaussian { .. } | Likelihood::MultitaskGaussian { .. })
    }

    /// Per-output noise variances of Gaussian kinds; empty otherwise.
    pub fn noise_variances(&self, store: &ParamStore) -> Vec<f64> {
        match self {
            Likelihood::Gaussian { raw_noise } | Likelihood::MultitaskGaussian { raw_noise, .. } => {
                store.get(*raw_noise).data().iter().map(|&r| softplus(r)).collect()
            }
            _ => vec![],
        }
    }

    /// Checks labels and shapes of an observation matrix against this
    /// likelihood; masked-out entries are ignored.
    pub fn validate(&self, y: &Tensor, mask: &Tensor) -> Result<()> {
        if y.rank() != 2 || y.cols() != self.observed_dim() || mask.shape() != y.shape() {
            return Err(Error::Data(format!(
                "observations {:?} / mask {:?} do not match likelihood width {}",
                y.shape(),
                mask.shape(),
                self.observed_dim()
            )));
        }
        let bad = |v: f64, max: usize| v.fract() != 0.0 || v < 0.0 || v >= max as f64;
        for (v, m) in y.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                continue;
            }
            if !v.is_finite() {
                return Err(Error::Data("non-finite observation".into()));
            }
            match self {
                Likelihood::Bernoulli if bad(*v, 2) => {
                    return Err(Error::Data(format!("bernoulli label {v} not in {{0, 1}}")));
                }
                Likelihood::Softmax { classes, .. } if bad(*v, *classes) => {
                    return Err(Error::Data(format!("class label {v} out of range 0..{classes}")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Masked log-likelihood of every row: `f` is `R x D_f` latent values,
    /// `y` and `mask` are `R x D_y`. Returns a length-`R` vector.
    pub fn log_prob_rows<'t>(&self, p: &Bound<'t>, f: Var<'t>, y: &Tensor, mask: &Tensor) -> Result<Var<'t>> {
        self.validate(y, mask)?;
        let tape = p.tape;
        let fs = f.shape();
        let r = y.rows();
        if fs.len() != 2 || fs[0] != r {
            return shape_err("log_prob", format!("latents {:?} for {} rows", fs, r));
        }
        let maskv = tape.constant(mask.clone());
        match self {
            Likelihood::Gaussian { raw_noise } | Likelihood::MultitaskGaussian { raw_noise, .. } => {
                if fs[1] != y.cols() {
                    return shape_err("log_prob", format!("latents {:?} vs observations {:?}", fs, y.shape()));
                }
                let nv = p.var(*raw_noise).softplus()?.broadcast_to(y.shape())?;
                let resid = tape.constant(y.clone()).sub(f)?;
                resid
                    .square()?
                    .div(nv)?
                    .add(nv.log()?)?
                    .add_scalar(LN_2PI)?
                    .scale(-0.5)?
                    .mul(maskv)?
                    .sum_axis(1)
            }
            Likelihood::Bernoulli => {
                if fs[1] != 1 {
                    return shape_err("log_prob", format!("bernoulli needs one latent, got {:?}", fs));
                }
                let sign = tape.constant(y.map(|v| 1.0 - 2.0 * v));
                sign.mul(f)?.softplus()?.neg()?.mul(maskv)?.sum_axis(1)
            }
            Likelihood::Softmax { w, classes, latent_dim } => {
                if fs[1] != *latent_dim {
                    return shape_err("log_prob", format!("softmax needs {} latents, got {:?}", latent_dim, fs));
                }
                let logits = f.matmul(p.var(*w).t()?)?;
                let lse = logits.logsumexp(1)?.reshape(&[r, 1])?.broadcast_to(&[r, *classes])?;
                let mut onehot = Tensor::zeros(&[r, *classes]);
                for i in 0..r {
                    if mask.data()[i] != 0.0 {
                        onehot.set(i, y.data()[i] as usize, mask.data()[i]);
                    }
                }
                logits.sub(lse)?.mul(tape.constant(onehot))?.sum_axis(1)
            }
        }
    }

    /// Tape-free `log p(y | f)` for a single observation row.
    pub fn log_prob(&self, store: &ParamStore, y: &[f64], f: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let yt = Tensor::matrix(1, y.len(), y.to_vec())?;
        let mask = Tensor::ones(yt.shape());
        let fv = tape.constant(Tensor::matrix(1, f.len(), f.to_vec())?);
        Ok(self.log_prob_rows(&p, fv, &yt, &mask)?.item())
    }

    /// `E_q[log p(y | f)]`. Gaussian kinds use the closed form
    /// `log N(y; mu, s2) - v / (2 s2)` per output; other kinds average
    /// `log p(y | f_s)` over `samples`.
    pub fn expected_log_prob(&self, store: &ParamStore, y: &[f64], mean: &[f64], var: &[f64], samples: &[Vec<f64>]) -> Result<f64> {
        if self.is_gaussian() {
            let nv = self.noise_variances(store);
            if y.len() != nv.len() || mean.len() != nv.len() || var.len() != nv.len() {
                return shape_err("expected_log_prob", "row width does not match the likelihood");
            }
            return Ok((0..nv.len())
                .map(|d| -0.5 * (LN_2PI + nv[d].ln()) - ((y[d] - mean[d]).powi(2) + var[d]) / (2.0 * nv[d]))
                .sum());
        }
        if samples.is_empty() {
            return shape_err("expected_log_prob", "Monte-Carlo samples required");
        }
        let mut acc = 0.0;
        for f in samples {
            acc += self.log_prob(store, y, f)?;
        }
        Ok(acc / samples.len() as f64)
    }

    /// `log (1/S) sum_s p(y | f_s)`, computed with max-shifted logsumexp.
    pub fn log_expected_prob(&self, store: &ParamStore, y: &[f64], samples: &[Vec<f64>]) -> Result<f64> {
        if samples.is_empty() {
            return shape_err("log_expected_prob", "at least one sample required");
        }
        let lps = samples
            .iter()
            .map(|f| self.log_prob(store, y, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_mean_exp(&lps))
    }

    /// Log predictive density: exact `log N(y; mu, v + s2)` for Gaussian
    /// kinds, [`Self::log_expected_prob`] over `samples` otherwise.
    pub fn predictive_density(&self, store: &ParamStore, y: &[f64], mean: &[f64], var: &[f64], samples: &[Vec<f64>]) -> Result<f64> {
        if self.is_gaussian() {
            let nv = self.noise_variances(store);
            if y.len() != nv.len() || mean.len() != nv.len() || var.len() != nv.len() {
                return shape_err("predictive_density", "row width does not match the likelihood");
            }
            return Ok((0..nv.len()).map(|d| gaussian_log_density(y[d], mean[d], var[d] + nv[d])).sum());
        }
        self.log_expected_prob(store, y, samples)
    }
}

/// `log N(y; mu, var)`.
pub fn gaussian_log_density(y: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (y - mu).powi(2) / var)
}

/// `log((1/n) sum exp(x_i))` with max subtraction.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (x.iter().map(|v| (v - m).exp()).sum::<f64>()).ln() - (x.len() as f64).ln()
}
