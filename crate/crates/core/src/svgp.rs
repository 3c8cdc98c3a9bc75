//! Sparse variational GP, unwhitened by default.
//!
//! With `Lk = chol(K(Z,Z))`, `q(u) = N(m_u, L_S L_S^T)` and prior mean `c`:
//!
//! ```text
//! mean(x) = c + K(x,Z) K(Z,Z)^-1 (m_u - c)
//! var(x)  = k(x,x) - |Lk^-1 K(Z,x)|^2 + |L_S^T Lk^-T Lk^-1 K(Z,x)|^2
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{cholesky_with_jitter, inv_softplus, Tape, Tensor, Var, DEFAULT_JITTER};
use crate::error::{shape_err, Result};
use crate::kernels::{ConstantMean, SeKernel};
use crate::params::{Bound, ParamId, ParamStore};

/// Marginal variances below this are clamped.
pub const VAR_FLOOR: f64 = 1e-12;

/// One latent function: kernel, mean and the variational factors of `q(u)`.
/// Inducing locations are owned by the enclosing node so that coregionalized
/// latents can share them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGp {
    pub kernel: SeKernel,
    pub mean: ConstantMean,
    pub m_u: ParamId,
    /// Unconstrained factor: strict lower triangle used as is, diagonal
    /// through softplus.
    pub l_raw: ParamId,
    pub inducing: usize,
    /// Store `q(u)` relative to the prior: `m_u = m(Z) + Lk v` and
    /// `L_S = Lk L_v`, with `v` and `L_v` held in `m_u` and `l_raw`.
    #[serde(default)]
    pub whiten: bool,
}

/// Per-point Gaussian marginals of `q(f)` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LatentMarginal<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
    /// Number of variances that fell below [`VAR_FLOOR`] before clamping.
    pub clamped: usize,
    /// Smallest variance before clamping.
    pub raw_min: f64,
}

/// Cholesky factors shared by the marginal and the KL of one latent.
#[derive(Debug, Clone, Copy)]
pub struct Factors<'t> {
    pub lk: Var<'t>,
    pub ls: Var<'t>,
    /// `Lk^-1 L_S`, or `L_v` when whitened
    pub r: Var<'t>,
    /// `Lk^-1 (m_u - m(Z))`, or `v` when whitened
    pub white_mean: Var<'t>,
}

impl LatentGp {
    /// `m_u = 0`, `L_S = I`, unit kernel hyperparameters, zero mean.
    pub fn init(store: &mut ParamStore, prefix: &str, input_dim: usize, inducing: usize) -> Self {
        let kernel = SeKernel::init(store, &format!("{prefix}.kernel"), input_dim);
        let mean = ConstantMean::init(store, prefix);
        let m_u = store.add(format!("{prefix}.m_u"), Tensor::zeros(&[inducing]));
        let l_raw = store.add(
            format!("{prefix}.l_raw"),
            Tensor::eye(inducing).map(|v| if v == 1.0 { inv_softplus(1.0) } else { 0.0 }),
        );
        LatentGp {
            kernel,
            mean,
            m_u,
            l_raw,
            inducing,
            whiten: false,
        }
    }

    /// Resets `q(u)` to the prior at inducing locations `z`: `m_u = m(Z)`
    /// and `L_S = chol(K(Z,Z))`, so the KL starts at zero.
    pub fn reset_to_prior(&self, store: &mut ParamStore, z: &Tensor) -> Result<()> {
        if self.whiten {
            let m = self.inducing;
            store.set(self.m_u, Tensor::zeros(&[m]));
            store.set(self.l_raw, Tensor::eye(m).map(|v| if v == 1.0 { inv_softplus(1.0) } else { 0.0 }));
            return Ok(());
        }
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let lk = self.kernel.cov(&p, tape.constant(z.clone()), tape.constant(z.clone()))?.cholesky(DEFAULT_JITTER, "prior init")?;
        let lk = lk.value();
        let mean = self.mean.eval(&p, self.inducing)?.value();
        let m = self.inducing;
        let raw = Tensor::new(
            vec![m, m],
            (0..m * m)
                .map(|k| {
                    let (r, c) = (k / m, k % m);
                    if r == c {
                        inv_softplus(lk.at(r, c))
                    } else {
                        lk.at(r, c)
                    }
                })
                .collect(),
        )?;
        store.set(self.m_u, (*mean).clone());
        store.set(self.l_raw, raw);
        Ok(())
    }

    /// `L_S` with positive diagonal.
    pub fn scale_tril<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        let raw = p.var(self.l_raw);
        let m = self.inducing;
        let tape = p.tape;
        let strict = tape.constant(Tensor::new(
            vec![m, m],
            (0..m * m).map(|k| if k % m < k / m { 1.0 } else { 0.0 }).collect(),
        )?);
        raw.mul(strict)?.add(raw.diag()?.softplus()?.diag_embed()?)
    }

    pub fn factors<'t>(&self, p: &Bound<'t>, z: Var<'t>, context: &str) -> Result<Factors<'t>> {
        let kzz = self.kernel.cov(p, z, z)?;
        let lk = kzz.cholesky(DEFAULT_JITTER, context)?;
        let ls = self.scale_tril(p)?;
        let (white_mean, r) = if self.whiten {
            (p.var(self.m_u), ls)
        } else {
            let d = p.var(self.m_u).sub(self.mean.eval(p, self.inducing)?)?;
            (lk.trisolve(d, false, false)?, lk.trisolve(ls, false, false)?)
        };
        Ok(Factors {
            lk,
            ls,
            r,
            white_mean,
        })
    }

    /// Marginals of `q(f)` at the rows of `x`.
    pub fn marginal<'t>(&self, p: &Bound<'t>, z: Var<'t>, x: Var<'t>, f: &Factors<'t>) -> Result<LatentMarginal<'t>> {
        let n = x.shape()[0];
        let m = self.inducing;
        let kzx = self.kernel.cov(p, z, x)?;
        let alpha = f.lk.trisolve(f.white_mean, false, true)?.reshape(&[m, 1])?;
        let mean = kzx
            .t()?
            .matmul(alpha)?
            .reshape(&[n])?
            .add(self.mean.eval(p, n)?)?;
        let v = f.lk.trisolve(kzx, false, false)?;
        let rtv = f.r.t()?.matmul(v)?;
        let raw_var = self
            .kernel
            .diag(p, n)?
            .sub(v.square()?.sum_axis(0)?)?
            .add(rtv.square()?.sum_axis(0)?)?;
        let raw = raw_var.value();
        let clamped = raw.data().iter().filter(|&&v| v < VAR_FLOOR).count();
        let raw_min = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
        if clamped > 0 {
            log::debug!("clamped {clamped} marginal variances to {VAR_FLOOR:e}");
        }
        Ok(LatentMarginal {
            mean,
            var: raw_var.clamp_min(VAR_FLOOR)?,
            clamped,
            raw_min,
        })
    }

    /// `KL(q(u) || p(u))`.
    pub fn kl<'t>(&self, f: &Factors<'t>) -> Result<Var<'t>> {
        let m = self.inducing as f64;
        let trace = f.r.square()?.sum()?;
        let maha = f.white_mean.square()?.sum()?;
        let logdet_s = f.ls.diag()?.log()?.sum()?;
        // log|K| - log|S|; whitened factors already exclude log|K|
        let logdet_ratio = if self.whiten {
            logdet_s.neg()?
        } else {
            f.lk.diag()?.log()?.sum()?.sub(logdet_s)?
        };
        trace.add(maha)?.add_scalar(-m)?.add(logdet_ratio.scale(2.0)?)?.scale(0.5)
    }
}

/// A standalone single-latent SVGP with its own inducing locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svgp {
    pub z: ParamId,
    pub gp: LatentGp,
}

impl Svgp {
    pub fn new(store: &mut ParamStore, prefix: &str, z: Tensor) -> Self {
        let (m, d) = (z.rows(), z.cols());
        let z = store.add(format!("{prefix}.z"), z);
        Svgp {
            z,
            gp: LatentGp::init(store, prefix, d, m),
        }
    }

    /// Marginals at `x` and the KL term.
    pub fn eval<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(LatentMarginal<'t>, Var<'t>)> {
        let z = p.var(self.z);
        let f = self.gp.factors(p, z, "svgp")?;
        Ok((self.gp.marginal(p, z, x, &f)?, self.gp.kl(&f)?))
    }

    /// Closed-form single-node ELBO with Gaussian noise variance `noise_var`:
    /// `sum_n [log N(y_n; mu_n, s2) - v_n / (2 s2)] - KL`.
    pub fn gaussian_elbo<'t>(&self, p: &Bound<'t>, x: Var<'t>, y: &Tensor, noise_var: f64) -> Result<Var<'t>> {
        let (marg, kl) = self.eval(p, x)?;
        let n = y.len();
        if marg.mean.shape() != [n] {
            return shape_err("gaussian_elbo", format!("{} targets for {:?}", n, marg.mean.shape()));
        }
        let tape = p.tape;
        let resid = tape.constant(y.clone()).sub(marg.mean)?;
        let ll = resid
            .square()?
            .add(marg.var)?
            .scale(-0.5 / noise_var)?
            .add_scalar(-0.5 * (2.0 * std::f64::consts::PI * noise_var).ln())?
            .sum()?;
        ll.sub(kl)
    }
}

/// `mean + sqrt(var) * eps`, elementwise.
pub fn sample_marginal(mean: &Tensor, var: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mean.shape() != var.shape() || mean.shape() != eps.shape() {
        return shape_err(
            "sample_marginal",
            format!("{:?} {:?} {:?}", mean.shape(), var.shape(), eps.shape()),
        );
    }
    let data = mean
        .data()
        .iter()
        .zip(var.data())
        .zip(eps.data())
        .map(|((m, v), e)| m + v.max(0.0).sqrt() * e)
        .collect();
    Tensor::new(mean.shape().to_vec(), data)
}

/// Exact GP log marginal likelihood `log N(y; c, K(X,X) + noise_var I)` under
/// the SE kernel.
pub fn exact_gp_mll(x: &Tensor, y: &Tensor, lengthscales: &[f64], outputscale: f64, mean: f64, noise_var: f64) -> Result<f64> {
    let n = x.rows();
    if y.len() != n {
        return shape_err("exact_gp_mll", format!("{} inputs, {} targets", n, y.len()));
    }
    let mut k = crate::kernels::se_kernel(x, x, lengthscales, outputscale)?;
    for i in 0..n {
        let v = k.at(i, i) + noise_var;
        k.set(i, i, v);
    }
    let (l, _) = cholesky_with_jitter(&k, 0.0, "exact_gp_mll")?;
    let tape = Tape::new();
    let r = tape.constant(y.map(|v| v - mean));
    let w = tape.constant(l.clone()).trisolve(r, false, false)?;
    let quad: f64 = w.value().data().iter().map(|v| v * v).sum();
    let logdet: f64 = (0..n).map(|i| l.at(i, i).ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}
