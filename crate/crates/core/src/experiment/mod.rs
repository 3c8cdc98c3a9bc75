//! Declarative experiments: config documents with presets, data binding,
//! checkpoints, evaluation and tabular prediction.

mod binding;
mod checkpoint;
mod config;

pub use binding::{column_names, load, read_table, EvalSet, Loaded, Table};
pub use checkpoint::{write_atomic, Checkpoint, FORMAT, VERSION};
pub use config::{preset_value, DataBinding, ExperimentConfig, Preset};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::autodiff::Tensor;
use crate::data::{eeg, jura, metrics, synth, Dataset, StandardizationRecord};
use crate::error::{Error, Result};
use crate::graph::{condition_gaussian, predict_with, Eps, Model, NodeSummary};
use crate::likelihoods::LikelihoodConfig;
use crate::training::{init_states, train, TraceRow};

/// Offset between the training and test noise seeds of synthetic data.
pub const TEST_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Writes `train.csv` (`n_train` points), `test.csv` and `truth.csv`
/// (noiseless `f1, f2, f3` on the test grid) for the synthetic system.
pub fn write_synthetic(dir: &Path, n_train: usize, n_test: usize, noise_var: f64, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let train = synth::generate(&synth::train_inputs(n_train), noise_var, seed)?;
    let test = synth::generate(&synth::test_inputs(n_test), noise_var, seed.wrapping_add(TEST_SEED_OFFSET))?;
    for (name, sample) in [("train.csv", &train), ("test.csv", &test)] {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        w.write_record(["x", "y1", "y2", "y3"])?;
        for r in 0..sample.data.rows() {
            let y = |n: &str| sample.data.nodes[n].y.at(r, 0);
            w.write_record([sample.data.x.at(r, 0), y("f1"), y("f2"), y("f3")].map(|v| v.to_string()))?;
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
    w.write_record(["x", "f1", "f2", "f3"])?;
    for r in 0..test.truth.rows() {
        w.write_record(test.truth.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// z-value of the two-sided 95% band.
pub const BAND_Z: f64 = 1.96;

/// Initializes from the training data and trains with the config's
/// settings. Loss rows are appended to `trace` as they are produced.
pub fn fit(cfg: &ExperimentConfig, data: &Dataset, trace: &mut Vec<TraceRow>) -> Result<Model> {
    let mut model = init_states(cfg.graph.clone(), data, cfg.training.seed)?;
    train(&mut model, data, &cfg.training, trace)?;
    Ok(model)
}

fn invert(rec: Option<&StandardizationRecord>, z: f64) -> f64 {
    rec.map_or(z, |r| r.invert(z))
}

fn scale2(rec: Option<&StandardizationRecord>) -> f64 {
    rec.map_or(1.0, |r| r.std * r.std)
}

fn column(t: &Tensor, c: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| t.at(r, c)).collect()
}

/// Metrics of one Gaussian output column. `y` is in original units, the
/// moments in model units. MAE and SMSE compare in original units; for
/// log-transformed columns the point prediction is the back-transformed
/// mean and MLL is taken on the log scale.
pub fn column_metrics(rec: Option<&StandardizationRecord>, y: &[f64], mu: &[f64], var: &[f64]) -> Result<metrics::Metrics> {
    let point: Vec<f64> = mu.iter().map(|&m| invert(rec, m)).collect();
    let v: Vec<f64> = var.iter().map(|&v| v * scale2(rec)).collect();
    match rec {
        Some(r) if r.log => {
            let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
            let lmu: Vec<f64> = mu.iter().map(|m| m * r.std + r.mean).collect();
            Ok(metrics::Metrics {
                mae: metrics::mae(y, &point)?,
                smse: metrics::smse(y, &point)?,
                mll: metrics::mll(&ly, &lmu, &v)?,
            })
        }
        _ => metrics::all(y, &point, &v),
    }
}

fn average(ms: &[metrics::Metrics]) -> metrics::Metrics {
    let n = ms.len() as f64;
    metrics::Metrics {
        mae: ms.iter().map(|m| m.mae).sum::<f64>() / n,
        smse: ms.iter().map(|m| m.smse).sum::<f64>() / n,
        mll: ms.iter().map(|m| m.mll).sum::<f64>() / n,
    }
}

fn predict_rows(ck: &Checkpoint, x: &Tensor, seed: u64) -> Result<Vec<NodeSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(predict_with(&ck.model, x, ck.config.predict_samples, &mut Eps::Rng(&mut rng))?.nodes)
}

/// Scores a checkpoint on the held-out part of its data. The result maps
/// each scored node to its metrics (`MAE`, `SMSE`, `MLL` for Gaussian
/// nodes, `ACC`, `MLL` for label nodes); Jura adds `Cd_conditional_MAE`.
pub fn evaluate(ck: &Checkpoint, loaded: &Loaded, seed: u64) -> Result<Value> {
    let model = &ck.model;
    let (_, names) = column_names(&ck.config);
    let mut out = Map::new();
    match &loaded.eval {
        EvalSet::None => return Err(Error::Data("the data binding has no held-out set".into())),
        EvalSet::Table(test) => {
            let summaries = predict_rows(ck, &test.x, seed)?;
            for (i, ns) in model.spec.nodes.iter().enumerate() {
                let (Some(lik), Some(nd)) = (&ns.likelihood, test.nodes.get(&ns.name)) else {
                    continue;
                };
                let s = &summaries[i];
                let value = match lik {
                    LikelihoodConfig::Bernoulli | LikelihoodConfig::Softmax { .. } => {
                        let probs = s.probs.as_ref().expect("label node has probabilities");
                        let rows = nd.observed_rows();
                        if rows.is_empty() {
                            continue;
                        }
                        let (mut hits, mut ll) = (0.0, 0.0);
                        for &r in &rows {
                            let y = nd.y.at(r, 0) as usize;
                            let p: Vec<f64> = match lik {
                                LikelihoodConfig::Bernoulli => vec![1.0 - probs.at(r, 0), probs.at(r, 0)],
                                _ => probs.row(r).to_vec(),
                            };
                            let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
                            hits += f64::from(u8::from(best == y));
                            ll -= p[y].max(f64::MIN_POSITIVE).ln();
                        }
                        let n = rows.len() as f64;
                        json!({"ACC": hits / n, "MLL": ll / n})
                    }
                    _ => {
                        let obs_var = s.obs_var.as_ref().expect("gaussian node has observation variance");
                        let cols = &names[&ns.name];
                        let mut per = Vec::new();
                        for (c, name) in cols.iter().enumerate() {
                            let rows: Vec<usize> = (0..test.rows()).filter(|&r| nd.mask.at(r, c) != 0.0).collect();
                            if rows.is_empty() {
                                continue;
                            }
                            let rec = test.record(&format!("{}:{name}", ns.name));
                            let y: Vec<f64> = column(&nd.y, c, &rows).into_iter().map(|v| invert(rec, v)).collect();
                            per.push(column_metrics(rec, &y, &column(&s.mean, c, &rows), &column(obs_var, c, &rows))?);
                        }
                        if per.is_empty() {
                            continue;
                        }
                        serde_json::to_value(average(&per))?
                    }
                };
                out.insert(ns.name.clone(), value);
            }
        }
        EvalSet::Jura { rows, cd } => {
            let i = model
                .index_of(jura::MINERALS)
                .ok_or_else(|| Error::Checkpoint(format!("graph has no `{}` node", jura::MINERALS)))?;
            let nd = &loaded.train.nodes[jura::MINERALS];
            let x = loaded.train.x.select_rows(rows);
            let s = &predict_rows(ck, &x, seed)?[i];
            let rec = ck.record(&format!("{}:Cd", jura::MINERALS));
            let mut cond = Vec::with_capacity(rows.len());
            for (k, &r) in rows.iter().enumerate() {
                let (mean, _) = condition_gaussian(s.mean.row(k), &s.obs_cov_at(k), &[0, 1], &[nd.y.at(r, 0), nd.y.at(r, 1)])?;
                cond.push(invert(rec, mean[jura::CD]));
            }
            let obs_var = s.obs_var.as_ref().expect("gaussian node");
            let all: Vec<usize> = (0..rows.len()).collect();
            let marginal = column_metrics(rec, cd, &column(&s.mean, jura::CD, &all), &column(obs_var, jura::CD, &all))?;
            out.insert(jura::MINERALS.into(), serde_json::to_value(marginal)?);
            out.insert("Cd_conditional_MAE".into(), json!(metrics::mae(cd, &cond)?));
        }
        EvalSet::Eeg { rows, targets } => {
            let i = model
                .index_of(eeg::TARGET)
                .ok_or_else(|| Error::Checkpoint(format!("graph has no `{}` node", eeg::TARGET)))?;
            let x = loaded.train.x.select_rows(rows);
            let s = &predict_rows(ck, &x, seed)?[i];
            let obs_var = s.obs_var.as_ref().expect("gaussian node");
            let all: Vec<usize> = (0..rows.len()).collect();
            let mut per = Vec::new();
            for (c, name) in eeg::TARGET_COLUMNS.iter().enumerate() {
                let rec = ck.record(&format!("{}:{name}", eeg::TARGET));
                let m = column_metrics(rec, &column(targets, c, &all), &column(&s.mean, c, &all), &column(obs_var, c, &all))?;
                out.insert(format!("{}:{name}", eeg::TARGET), serde_json::to_value(&m)?);
                per.push(m);
            }
            out.insert(eeg::TARGET.into(), serde_json::to_value(average(&per))?);
        }
    }
    Ok(Value::Object(out))
}

/// Predictive table at the inputs of `table` (original units). Columns are
/// the inputs, then per node and output `mean`, `var`, `lower`, `upper` in
/// original units (bands at +-1.96 sd, back-transformed for log columns),
/// then class probabilities for label nodes. With `zero_noise` every
/// sampling draw is zero and the reported variance is the observation
/// noise alone.
pub fn predict_table(
    ck: &Checkpoint,
    table: &Table,
    samples: usize,
    zero_noise: bool,
    seed: u64,
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let (inputs, names) = column_names(&ck.config);
    let n = table.rows.len();
    let mut raw = Vec::with_capacity(inputs.len());
    for name in &inputs {
        let col = table
            .dense(name)
            .map_err(|e| Error::Checkpoint(format!("inputs do not match the checkpoint: {e}")))?;
        raw.push(col);
    }
    let mut x = vec![0.0; n * inputs.len()];
    for (c, name) in inputs.iter().enumerate() {
        let rec = ck.record(&format!("x:{name}"));
        for r in 0..n {
            x[r * inputs.len() + c] = rec.map_or(raw[c][r], |rc| rc.apply(raw[c][r]));
        }
    }
    let x = Tensor::matrix(n, inputs.len(), x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = if zero_noise { Eps::Zero } else { Eps::Rng(&mut rng) };
    let summary = predict_with(&ck.model, &x, samples, &mut eps)?;

    let mut header = inputs.clone();
    let mut cols: Vec<Vec<f64>> = raw;
    for (i, ns) in ck.model.spec.nodes.iter().enumerate() {
        let s = &summary.nodes[i];
        let gaussian = matches!(
            ns.likelihood,
            Some(LikelihoodConfig::Gaussian | LikelihoodConfig::MultitaskGaussian { .. })
        );
        let out_names: Vec<String> = match (&ns.likelihood, names.get(&ns.name)) {
            (Some(l), Some(v)) if gaussian && v.len() == l.observed_dim() => v.clone(),
            _ => (0..s.dim()).map(|k| format!("f{k}")).collect(),
        };
        for (k, oname) in out_names.iter().enumerate() {
            let rec = ck.record(&format!("{}:{oname}", ns.name));
            let (mut m, mut v, mut lo, mut hi) = (vec![], vec![], vec![], vec![]);
            for r in 0..n {
                let mu = s.mean.at(r, k);
                let var = match (&s.obs_var, zero_noise) {
                    (Some(_), true) => s.noise[k],
                    (Some(ov), false) => ov.at(r, k),
                    (None, true) => 0.0,
                    (None, false) => s.var.at(r, k),
                };
                let sd = var.sqrt();
                m.push(invert(rec, mu));
                v.push(var * scale2(rec));
                lo.push(invert(rec, mu - BAND_Z * sd));
                hi.push(invert(rec, mu + BAND_Z * sd));
            }
            for (suffix, col) in [("mean", m), ("var", v), ("lower", lo), ("upper", hi)] {
                header.push(format!("{}:{oname}:{suffix}", ns.name));
                cols.push(col);
            }
        }
        if let Some(p) = &s.probs {
            for c in 0..p.cols() {
                let label = if matches!(ns.likelihood, Some(LikelihoodConfig::Bernoulli)) { 1 } else { c };
                header.push(format!("{}:p{label}", ns.name));
                cols.push((0..n).map(|r| p.at(r, c)).collect());
            }
        }
    }
    let rows = (0..n).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
    Ok((header, rows))
}
