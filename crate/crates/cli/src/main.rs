use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use pogpn::autodiff::{gradient_suite, inject_gradient_fault, Primitive};
use pogpn::data::synth;
use pogpn::experiment::{
    evaluate, fit, load, predict_table, read_table, write_atomic, write_synthetic, Checkpoint, EvalSet,
    ExperimentConfig,
};
use pogpn::graph::{loss_gradient_probe, LossKind};
use pogpn::training::write_trace;
use pogpn::Error;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Relative error accepted by `gradcheck`.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "pogpn", version, about = "Partially observable Gaussian process networks")]
struct Cli {
    /// Worker threads for dense linear algebra; rayon's default when unset.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// env_logger filter, e.g. `info` or `pogpn=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train.csv, test.csv and truth.csv for the synthetic system.
    Synth {
        #[arg(long, default_value_t = synth::DEFAULT_TRAIN)]
        n_train: usize,
        #[arg(long, default_value_t = synth::DEFAULT_TEST)]
        n_test: usize,
        /// Variance of the Gaussian noise on y1 and y3.
        #[arg(long, default_value_t = synth::DEFAULT_NOISE_VAR)]
        noise_var: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json, manifest.json, trace.csv and
    /// timing.json into `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predictive moments and 95% bands at the rows of an input CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        /// Monte-Carlo samples; the checkpoint's setting when unset.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Zero every sampling draw and report the observation noise alone.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Score a checkpoint on the held-out part of its data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Metrics JSON; stdout when unset.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every primitive and of a whole loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Core(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Gradcheck(_) => ("gradcheck", 5),
            Failure::Core(e) => match e {
                Error::Io(_) => ("io", 1),
                Error::Config(_) | Error::Json(_) => ("config", 2),
                Error::Graph(_) | Error::Cycle(_) => ("graph", 2),
                Error::Shape { .. } => ("shape", 2),
                Error::Diverged { .. } | Error::NonFinite { .. } | Error::NonFiniteGradient(_) => ("divergence", 3),
                Error::Cholesky { .. } | Error::ForeignVar | Error::NonScalarRoot(_) => ("numerical", 3),
                Error::Data(_) | Error::Csv(_) => ("data", 4),
                Error::Checkpoint(_) => ("checkpoint", 6),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Gradcheck(m) => m.clone(),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Missing or unreadable data files are data errors, not I/O errors.
fn data_err(dir: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", dir.display())),
        Error::Csv(c) => Error::Data(format!("{}: {c}", dir.display())),
        other => other,
    }
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    Ok(Checkpoint::from_json(&text)?)
}

fn write_json(path: &Path, v: &Value) -> Outcome {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn seed_override() -> Outcome<Option<u64>> {
    match std::env::var("POGPN_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("POGPN_SEED `{s}` is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path) -> Outcome {
    let start = Instant::now();
    let text = std::fs::read_to_string(config).map_err(Error::from)?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed_override()? {
        cfg.training.seed = seed;
    }
    let loaded = load(&cfg, data_dir).map_err(data_err(data_dir))?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let mut trace = Vec::new();
    let fitted = fit(&cfg, &loaded.train, &mut trace);
    write_trace(&out.join("trace.csv"), &trace)?;
    let model = fitted?;
    log::info!("trained {} epochs in {:.1}s", trace.len(), start.elapsed().as_secs_f64());

    let ck = Checkpoint::new(cfg.clone(), loaded.train.standardization.clone(), model);
    ck.save(&out.join("checkpoint.json"))?;
    let metrics = match loaded.eval {
        EvalSet::None => Value::Null,
        _ => evaluate(&ck, &loaded, cfg.training.seed)?,
    };
    let canonical = serde_json::to_string(&cfg).map_err(Error::from)?;
    let manifest = json!({
        "config_hash": sha256_hex(canonical.as_bytes()),
        "seed": cfg.training.seed,
        "loss": cfg.training.loss,
        "method": cfg.training.method,
        "epochs": cfg.training.epochs,
        "partial_epochs": cfg.training.partial_epochs,
        "final_loss": trace.last().map(|r| r.loss),
        "metrics": metrics,
        "checkpoint": "checkpoint.json",
        "trace": "trace.csv",
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("timing.json"), &json!({"wall_seconds": start.elapsed().as_secs_f64()}))
}

fn cmd_predict(checkpoint: &Path, inputs: &Path, samples: Option<usize>, out: &Path, seed: u64, zero_noise: bool) -> Outcome {
    let ck = load_checkpoint(checkpoint)?;
    let samples = samples.unwrap_or(ck.config.predict_samples);
    if samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()).into());
    }
    let table = read_table(inputs).map_err(data_err(inputs))?;
    let (header, rows) = predict_table(&ck, &table, samples, zero_noise, seed)?;
    let mut w = csv::Writer::from_path(out).map_err(Error::from)?;
    w.write_record(&header).map_err(Error::from)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, out: Option<&Path>, seed: u64) -> Outcome {
    let ck = load_checkpoint(checkpoint)?;
    let loaded = load(&ck.config, data_dir).map_err(data_err(data_dir))?;
    let scores = evaluate(&ck, &loaded, seed)?;
    match out {
        Some(p) => write_json(p, &scores),
        None => {
            println!("{}", serde_json::to_string_pretty(&scores).map_err(Error::from)?);
            Ok(())
        }
    }
}

fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> Outcome {
    if let Ok(name) = std::env::var("POGPN_INJECT_FAULT") {
        let p = Primitive::from_name(name.trim())
            .ok_or_else(|| Error::Config(format!("POGPN_INJECT_FAULT: unknown primitive `{name}`")))?;
        log::warn!("corrupting the `{}` gradient", p.name());
        inject_gradient_fault(Some(p));
    }
    let mut rows: Vec<(String, f64)> =
        gradient_suite(seed)?.into_iter().map(|r| (r.primitive.name().to_string(), r.max_rel_error)).collect();
    for (name, kind) in [("loss:elbo", LossKind::Elbo), ("loss:pll", LossKind::Pll)] {
        rows.push((name.to_string(), loss_gradient_probe(kind, seed)?));
    }
    let primitives = Primitive::ALL.len();
    let worst_of = |rows: &[(String, f64)]| -> (String, f64) {
        rows.iter().fold(rows[0].clone(), |w, r| if r.1 > w.1 || r.1.is_nan() { r.clone() } else { w })
    };
    // a broken primitive also breaks the loss probes; blame the primitive
    let failing_primitive = rows[..primitives].iter().any(|r| !(r.1 <= GRAD_TOLERANCE));
    let worst = if failing_primitive { worst_of(&rows[..primitives]) } else { worst_of(&rows) };
    let pass = rows.iter().all(|r| r.1 <= GRAD_TOLERANCE);
    let report = json!({
        "seed": seed,
        "tolerance": GRAD_TOLERANCE,
        "checks": rows.iter().map(|(n, e)| json!({"name": n, "max_rel_error": e, "pass": *e <= GRAD_TOLERANCE})).collect::<Vec<_>>(),
        "worst": {"name": worst.0, "max_rel_error": worst.1},
        "pass": pass,
    });
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Gradcheck(format!(
            "`{}` gradient off by relative error {:e} (tolerance {GRAD_TOLERANCE:e})",
            worst.0, worst.1
        )))
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::Synth {
            n_train,
            n_test,
            noise_var,
            seed,
            out,
        } => Ok(write_synthetic(&out, n_train, n_test, noise_var, seed)?),
        Cmd::Train { config, data_dir, out } => cmd_train(&config, &data_dir, &out),
        Cmd::Predict {
            checkpoint,
            inputs,
            samples,
            out,
            seed,
            zero_noise,
        } => cmd_predict(&checkpoint, &inputs, samples, &out, seed, zero_noise),
        Cmd::Eval {
            checkpoint,
            data_dir,
            out,
            seed,
        } => cmd_eval(&checkpoint, &data_dir, out.as_deref(), seed),
        Cmd::Gradcheck { seed, out } => cmd_gradcheck(seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, code) = f.kind_and_code();
            // one JSON object per line so callers can parse the reason
            eprintln!("{}", json!({"error": kind, "code": code, "message": f.message()}));
            ExitCode::from(code)
        }
    }
}
