//! Central finite-difference validation of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Primitive, Tape, Tensor, Var};
use crate::error::{Error, Result};

type Builder = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// Max relative error `|ad - fd| / (|fd| + 1e-8)` over every coordinate of
/// `x`, where `fd` is the central difference with `step`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_inputs(&higher_ranked(|tape, vars| f(tape, vars[0])), std::slice::from_ref(x), step)
}

fn higher_ranked<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Multi-input variant: every coordinate of every input is perturbed.
pub fn check_inputs<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + ?Sized,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let v = f(&tape, &vars)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite_difference_check",
            })
        }
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let ad = grads.wrt(*var);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let err = (ad.data()[i] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct PrimitiveReport {
    pub primitive: Primitive,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero in magnitude, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn triangular(rng: &mut ChaCha8Rng, n: usize, upper: bool) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let keep = if upper { j >= i } else { j <= i };
            if i == j {
                t.set(i, j, rng.random_range(1.0..2.0));
            } else if keep {
                t.set(i, j, rng.random_range(-0.5..0.5));
            }
        }
    }
    t
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let b = uniform(rng, &[n, n], -1.0, 1.0);
    let mut a = b.matmul(&b.transposed()).expect("square");
    for i in 0..n {
        let v = a.at(i, i) + n as f64;
        a.set(i, i, v);
    }
    a
}

fn case(f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static) -> Builder {
    Box::new(f)
}

/// Runs every primitive through [`check_inputs`] on random conforming inputs
/// (step 1e-5). Outputs are reduced to a scalar by a random weighted sum so
/// every output coordinate contributes. One report per primitive, in
/// [`Primitive::ALL`] order.
pub fn gradient_suite(seed: u64) -> Result<Vec<PrimitiveReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<(Primitive, Vec<Tensor>, Builder)> = Vec::new();
    macro_rules! push {
        ($p:expr, [$($x:expr),*], $f:expr) => {
            cases.push(($p, vec![$($x),*], case($f)))
        };
    }
    push!(Primitive::Add, [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |_, v| v[0].add(v[1]));
    push!(Primitive::Sub, [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |_, v| v[0].sub(v[1]));
    push!(Primitive::Mul, [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |_, v| v[0].mul(v[1]));
    push!(Primitive::Div, [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.5, 2.0)], |_, v| v[0].div(v[1]));
    push!(Primitive::Scale, [uniform(r, &[5], -1.0, 1.0)], |_, v| v[0].scale(1.7));
    push!(Primitive::AddScalar, [uniform(r, &[5], -1.0, 1.0)], |_, v| v[0].add_scalar(0.3)?.square());
    push!(Primitive::MatMul, [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |_, v| v[0].matmul(v[1]));
    push!(Primitive::Transpose, [uniform(r, &[3, 4], -1.0, 1.0)], |_, v| v[0].t());
    push!(Primitive::Sum, [uniform(r, &[3, 4], -1.0, 1.0)], |_, v| v[0].sum());
    push!(Primitive::SumAxis, [uniform(r, &[3, 4], -1.0, 1.0)], |_, v| v[0].sum_axis(0));
    push!(Primitive::SumAxis, [uniform(r, &[2, 3, 4], -1.0, 1.0)], |_, v| v[0].sum_axis(1));
    push!(Primitive::Mean, [uniform(r, &[3, 4], -1.0, 1.0)], |_, v| v[0].mean());
    push!(Primitive::Slice, [uniform(r, &[4, 5], -1.0, 1.0)], |_, v| v[0].slice(1, 1, 3));
    push!(Primitive::Slice, [uniform(r, &[4, 5], -1.0, 1.0)], |_, v| v[0].slice(0, 2, 2));
    push!(Primitive::Concat, [uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)], |t, v| t.concat(&[v[0], v[1]], 1));
    push!(Primitive::Concat, [uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1, 3], -1.0, 1.0)], |t, v| t.concat(&[v[0], v[1], v[0]], 0));
    push!(Primitive::Broadcast, [uniform(r, &[1, 3], -1.0, 1.0)], |_, v| v[0].broadcast_to(&[4, 3]));
    push!(Primitive::Broadcast, [uniform(r, &[3], -1.0, 1.0)], |_, v| v[0].broadcast_to(&[2, 3]));
    push!(Primitive::Reshape, [uniform(r, &[2, 6], -1.0, 1.0)], |_, v| v[0].reshape(&[3, 4])?.square());
    push!(Primitive::Exp, [uniform(r, &[5], -1.0, 1.0)], |_, v| v[0].exp());
    push!(Primitive::Log, [uniform(r, &[5], 0.5, 2.0)], |_, v| v[0].log());
    push!(Primitive::Softplus, [uniform(r, &[5], -3.0, 3.0)], |_, v| v[0].softplus());
    push!(Primitive::Square, [uniform(r, &[5], -1.0, 1.0)], |_, v| v[0].square());
    push!(Primitive::Sqrt, [uniform(r, &[5], 0.5, 2.0)], |_, v| v[0].sqrt());
    push!(Primitive::ClampMin, [away_from_zero(r, &[8])], |_, v| v[0].clamp_min(0.0));
    push!(Primitive::LogSumExp, [uniform(r, &[3, 4], -2.0, 2.0)], |_, v| v[0].logsumexp(1));
    push!(Primitive::LogSumExp, [uniform(r, &[3, 4], -2.0, 2.0)], |_, v| v[0].logsumexp(0));
    push!(Primitive::Softmax, [uniform(r, &[3, 4], -2.0, 2.0)], |_, v| v[0].softmax(1));
    push!(Primitive::Softmax, [uniform(r, &[3, 4], -2.0, 2.0)], |_, v| v[0].softmax(0));
    push!(Primitive::Cholesky, [spd(r, 4)], |_, v| v[0].cholesky(super::DEFAULT_JITTER, "gradcheck"));
    push!(Primitive::Cholesky, [spd(r, 4)], |_, v| {
        v[0].cholesky(super::DEFAULT_JITTER, "gradcheck")?.diag()?.log()?.sum()?.scale(2.0)
    });
    for (upper, trans) in [(false, false), (false, true), (true, false), (true, true)] {
        push!(Primitive::TriSolve, [triangular(r, 4, upper), uniform(r, &[4, 3], -1.0, 1.0)], move |_, v| v[0].trisolve(v[1], upper, trans));
    }
    push!(Primitive::TriSolve, [triangular(r, 4, false), uniform(r, &[4], -1.0, 1.0)], |_, v| v[0].trisolve(v[1], false, false));
    push!(Primitive::Diag, [uniform(r, &[4, 4], -1.0, 1.0)], |_, v| v[0].diag());
    push!(Primitive::DiagEmbed, [uniform(r, &[4], -1.0, 1.0)], |_, v| v[0].diag_embed());
    push!(Primitive::SqDist, [uniform(r, &[3, 2], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |_, v| v[0].sqdist(v[1]));

    let mut reports: Vec<PrimitiveReport> = Primitive::ALL
        .iter()
        .map(|&primitive| PrimitiveReport {
            primitive,
            max_rel_error: 0.0,
        })
        .collect();
    for (p, inputs, build) in cases {
        let out_shape = {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            build(&tape, &vars)?.shape()
        };
        let w = uniform(&mut rng, &out_shape, 0.5, 1.5);
        let weighted = higher_ranked(|tape, vars| {
            let out = build(tape, vars)?;
            let wv = tape.constant(w.clone());
            out.mul(wv)?.sum()
        });
        let err = check_inputs(&weighted, &inputs, 1e-5)?;
        let slot = reports
            .iter_mut()
            .find(|rep| rep.primitive == p)
            .expect("every primitive has a slot");
        slot.max_rel_error = slot.max_rel_error.max(err);
    }
    Ok(reports)
}
