//! Squared-exponential ARD kernel, constant mean and output mixing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{inv_softplus, Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// `k(x, x') = s^2 exp(-0.5 sum_d ((x_d - x'_d) / l_d)^2)` with
/// `l = softplus(raw_lengthscales)` and `s^2 = softplus(raw_outputscale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub raw_lengthscales: ParamId,
    pub raw_outputscale: ParamId,
    pub input_dim: usize,
}

impl SeKernel {
    pub fn init(store: &mut ParamStore, prefix: &str, input_dim: usize) -> Self {
        let raw = inv_softplus(1.0);
        SeKernel {
            raw_lengthscales: store.add(format!("{prefix}.raw_lengthscales"), Tensor::full(&[input_dim], raw)),
            raw_outputscale: store.add(format!("{prefix}.raw_outputscale"), Tensor::scalar(raw)),
            input_dim,
        }
    }

    pub fn lengthscales<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        p.var(self.raw_lengthscales).softplus()
    }

    /// Signal variance `s^2`.
    pub fn outputscale<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        p.var(self.raw_outputscale).softplus()
    }

    /// Cross-covariance `K(x, x2)`, `N x M`.
    pub fn cov<'t>(&self, p: &Bound<'t>, x: Var<'t>, x2: Var<'t>) -> Result<Var<'t>> {
        let ls = self.lengthscales(p)?;
        let os = self.outputscale(p)?;
        se_cov(x, x2, ls, os)
    }

    /// Diagonal of `K(x, x)`: the signal variance repeated `n` times.
    pub fn diag<'t>(&self, p: &Bound<'t>, n: usize) -> Result<Var<'t>> {
        self.outputscale(p)?.broadcast_to(&[n])
    }
}

pub(crate) fn se_cov<'t>(x: Var<'t>, x2: Var<'t>, ls: Var<'t>, os: Var<'t>) -> Result<Var<'t>> {
    let (xs, x2s) = (x.shape(), x2.shape());
    if xs.len() != 2 || x2s.len() != 2 || xs[1] != x2s[1] || ls.shape() != [xs[1]] {
        return shape_err(
            "se_kernel",
            format!("{:?} vs {:?} with lengthscales {:?}", xs, x2s, ls.shape()),
        );
    }
    let a = x.div(ls.broadcast_to(&xs)?)?;
    let b = x2.div(ls.broadcast_to(&x2s)?)?;
    let k = a.sqdist(b)?.scale(-0.5)?.exp()?;
    k.mul(os.broadcast_to(&[xs[0], x2s[0]])?)
}

/// Tape-free evaluation of the SE kernel with positive `lengthscales` and
/// signal variance `outputscale`.
pub fn se_kernel(x: &Tensor, x2: &Tensor, lengthscales: &[f64], outputscale: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let ls = tape.constant(Tensor::vector(lengthscales.to_vec()));
    let os = tape.scalar(outputscale);
    let k = se_cov(tape.constant(x.clone()), tape.constant(x2.clone()), ls, os)?;
    Ok((*k.value()).clone())
}

/// `m(x) = c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantMean {
    pub c: ParamId,
}

impl ConstantMean {
    pub fn init(store: &mut ParamStore, prefix: &str) -> Self {
        ConstantMean {
            c: store.add(format!("{prefix}.mean"), Tensor::scalar(0.0)),
        }
    }

    /// The mean evaluated at `n` inputs.
    pub fn eval<'t>(&self, p: &Bound<'t>, n: usize) -> Result<Var<'t>> {
        p.var(self.c).broadcast_to(&[n])
    }
}

/// Tape-free constant mean: `c` repeated once per row of `x`.
pub fn constant_mean(x: &Tensor, c: f64) -> Tensor {
    Tensor::full(&[x.rows()], c)
}

/// Mixing matrix `B` (`D_out x L`) of a coregionalized node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    pub b: ParamId,
    pub outputs: usize,
    pub latents: usize,
}

impl Mixing {
    pub fn init(store: &mut ParamStore, prefix: &str, b: Tensor) -> Self {
        let (outputs, latents) = (b.rows(), b.cols());
        Mixing {
            b: store.add(format!("{prefix}.mixing"), b),
            outputs,
            latents,
        }
    }

    /// `G` is `R x L` (one latent per column); returns `G B^T`, `R x D_out`.
    pub fn mix<'t>(&self, p: &Bound<'t>, g: Var<'t>) -> Result<Var<'t>> {
        g.matmul(p.var(self.b).t()?)
    }

    /// Output-space marginal variances `V (B o B)^T` for latent variances `V`.
    pub fn mix_var<'t>(&self, p: &Bound<'t>, v: Var<'t>) -> Result<Var<'t>> {
        v.matmul(p.var(self.b).square()?.t()?)
    }
}

/// `out[s, n, :] = B g[s, n, :]` for `g` of shape `S x N x L` and `B` of
/// shape `D_out x L`.
pub fn mix_outputs(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let gs = g.shape();
    if gs.len() != 3 || b.rank() != 2 || gs[2] != b.cols() {
        return shape_err("mix_outputs", format!("{:?} with B {:?}", gs, b.shape()));
    }
    let (s, n, l) = (gs[0], gs[1], gs[2]);
    let flat = g.clone().reshaped(vec![s * n, l])?;
    flat.matmul(&b.transposed())?.reshaped(vec![s, n, b.rows()])
}
