//! The three-stage synthetic system: a wiggly root `f1`, a thresholded
//! middle stage `f2` observed only as a binary label, and a final stage `f3`
//! that jumps by 5 wherever `f2` crosses 1.5.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, NodeData};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 1.5;
pub const DEFAULT_NOISE_VAR: f64 = 0.1;
pub const DEFAULT_TRAIN: usize = 40;
pub const DEFAULT_TEST: usize = 200;

pub fn f1(x: f64) -> f64 {
    -(10.0 * PI * (x + 1.0)).sin() / (2.0 * x + 1.0) - x.powi(4)
}

pub fn f2(x: f64) -> f64 {
    f1(x).cos().powi(2) + (3.0 * x).sin()
}

pub fn f3(x: f64) -> f64 {
    let (a, b) = (f1(x), f2(x));
    let offset = if b >= THRESHOLD { 2.5 } else { -2.5 };
    b * a * a + 3.0 * x + offset
}

/// `n` equally spaced points covering `[0, 1]`.
pub fn train_inputs(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Cell midpoints `(j + 0.5) / n`. For even `n` none of them coincides with
/// a point of [`train_inputs`] of any size.
pub fn test_inputs(n: usize) -> Vec<f64> {
    (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect()
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    /// Nodes `f1` (Gaussian), `f2` (binary label) and `f3` (Gaussian).
    pub data: Dataset,
    /// Noiseless `x, f1, f2, f3` per row.
    pub truth: Tensor,
}

/// Evaluates the system at `inputs` and adds Gaussian noise of variance
/// `noise_var` to `y1` and `y3`. The noise stream is drawn row by row
/// (`y1` then `y3`) from a generator seeded with `seed`.
pub fn generate(inputs: &[f64], noise_var: f64, seed: u64) -> Result<SynthSample> {
    if let Some(x) = inputs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Data(format!("synthetic input {x} outside [0, 1]")));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::Config(format!("noise variance {noise_var} must be non-negative")));
    }
    let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inputs.len();
    let (mut y1, mut y2, mut y3, mut truth) = (vec![], vec![], vec![], vec![]);
    for &x in inputs {
        let (a, b, c) = (f1(x), f2(x), f3(x));
        y1.push(a + noise.sample(&mut rng));
        y2.push(if b >= THRESHOLD { 1.0 } else { 0.0 });
        y3.push(c + noise.sample(&mut rng));
        truth.extend([x, a, b, c]);
    }
    let col = |v: Vec<f64>| Tensor::matrix(n, 1, v);
    let nodes = BTreeMap::from([
        ("f1".to_string(), NodeData::observed(col(y1)?)?),
        ("f2".to_string(), NodeData::observed(col(y2)?)?),
        ("f3".to_string(), NodeData::observed(col(y3)?)?),
    ]);
    Ok(SynthSample {
        data: Dataset::new(col(inputs.to_vec())?, nodes)?,
        truth: Tensor::matrix(n, 4, truth)?,
    })
}
