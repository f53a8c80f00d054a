use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dwp::harness::verify::{run_suite, Selection, VerifyOptions};
use dwp::harness::{self, DatasetSpec, ExperimentSpec, RunRecord, RECORD_FILE};
use dwp::inference::TrainSchedule;
use dwp::kernel::KernelConfig;
use dwp::model::{dwp_prior_sample, DwpModel, ModelConfig, StlFlags};
use dwp::{Error, Matrix, RngStream};

/// Deep Wishart processes: training, evaluation, verification and prior sampling.
#[derive(Parser)]
#[command(name = "dwp", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a CSV and write a run record, checkpoint and trace.
    Train(TrainArgs),
    /// Test log-likelihood of a checkpoint on a CSV.
    Eval(EvalArgs),
    /// Run the verification oracles and print one PASS/FAIL line per check.
    Verify(VerifyArgs),
    /// Draw one Gram matrix from the deep Wishart prior and write it as CSV.
    SamplePrior(SamplePriorArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Numeric CSV file.
    #[arg(long)]
    data: PathBuf,
    /// Target column (0-based); defaults to the last column.
    #[arg(long)]
    target_col: Option<usize>,
    /// Skip the first row.
    #[arg(long)]
    skip_header: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of Wishart layers.
    #[arg(long)]
    depth: usize,
    /// Number of inducing points.
    #[arg(long)]
    inducing: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Degrees of freedom per layer, comma separated; defaults to the input dimension.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Monte Carlo samples per training step.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Monte Carlo samples for ELBO and test log-likelihood evaluation.
    #[arg(long, default_value_t = 100)]
    eval_samples: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_final: f64,
    #[arg(long, default_value_t = 10_000)]
    lr_drop_step: usize,
    /// Steps over which the KL weight rises linearly from 0 to 1.
    #[arg(long, default_value_t = 1000)]
    anneal_steps: usize,
    #[arg(long, default_value_t = 1e-6)]
    jitter: f64,
    /// Keep full gradients through log Q instead of sticking the landing.
    #[arg(long)]
    no_stl: bool,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0)]
    split_index: u64,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    /// Train row indices (whitespace separated); requires --test-index.
    #[arg(long, requires = "test_index")]
    train_index: Option<PathBuf>,
    #[arg(long, requires = "train_index")]
    test_index: Option<PathBuf>,
    /// Output directory for run.json, checkpoint.json and trace.jsonl.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Print a progress line to stderr every N steps (0 disables).
    #[arg(long, default_value_t = 500)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Run record holding the standardization; defaults to run.json next to the checkpoint.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// numerics, jacobians, density, invariance, gradients, prior-equiv or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo draws for the moment checks.
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
}

#[derive(Args)]
struct SamplePriorArgs {
    #[arg(long)]
    depth: usize,
    #[arg(long)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
    /// Dimension of the random inputs.
    #[arg(long, default_value_t = 2)]
    input_dim: usize,
    /// Degrees of freedom per layer, comma separated; defaults to the number of points.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    jitter: f64,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::NotPositiveDefinite(_) => "not_positive_definite",
        Error::SingularTriangular(_) => "singular_triangular",
        Error::SingularLeadingBlock => "singular_leading_block",
        Error::Domain(_) => "domain",
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::NotPsd(_) => "not_psd",
        Error::NonFiniteGradient(_) => "non_finite_gradient",
        Error::Numerical { .. } => "numerical",
        Error::NonFiniteLoss(_) => "non_finite_loss",
        Error::Parse { .. } => "parse",
        Error::EmptyDataset => "empty_dataset",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io(_) => "io",
    }
}

fn fail(kind: &str, message: String, extra: serde_json::Value) -> ExitCode {
    let mut v = json!({ "error": { "kind": kind, "message": message } });
    if let (Some(obj), serde_json::Value::Object(more)) = (v["error"].as_object_mut(), extra) {
        obj.extend(more);
    }
    eprintln!("{v}");
    ExitCode::from(2)
}

fn dataset_spec(d: &DataArgs) -> DatasetSpec {
    let mut s = DatasetSpec::new(&d.data);
    s.target_col = d.target_col;
    s.skip_header = d.skip_header;
    s
}

fn train(a: TrainArgs) -> dwp::Result<serde_json::Value> {
    let mut data = dataset_spec(&a.data);
    data.split_seed = a.split_seed;
    data.split_index = a.split_index;
    data.train_fraction = a.train_fraction;
    data.index_files = a.train_index.zip(a.test_index);

    // input_dim and empty widths are filled in from the data
    let mut config = ModelConfig::new(a.depth, a.inducing, 1);
    config.widths = a.widths.unwrap_or_default();
    config.batch_size = a.batch;
    config.train_samples = a.samples;
    config.eval_samples = a.eval_samples;
    config.jitter = a.jitter;
    config.stl = if a.no_stl { StlFlags::NONE } else { StlFlags::ALL };
    let schedule = TrainSchedule {
        steps: a.steps,
        lr_initial: a.lr,
        lr_drop_step: a.lr_drop_step,
        lr_final: a.lr_final,
        kl_anneal_steps: a.anneal_steps,
        ..TrainSchedule::default()
    };
    let spec = ExperimentSpec {
        data,
        config,
        schedule,
        seed: a.seed,
    };
    let log_every = a.log_every;
    let rec = harness::run_experiment(&spec, &a.out, |r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == spec.schedule.steps) {
            eprintln!("step {:>6}  elbo {:>14.4}  lr {:.0e}  anneal {:.3}", r.step, r.elbo, r.lr, r.anneal);
        }
    })?;
    Ok(json!({
        "run_dir": a.out,
        "record_hash": rec.content_hash(),
        "initial_elbo_per_n": rec.initial_elbo_per_n,
        "final_elbo_per_n": rec.final_elbo_per_n,
        "test_ll": rec.test_ll,
        "steps_run": rec.steps_run,
        "wall_time_s": rec.wall_time_s,
    }))
}

fn eval(a: EvalArgs) -> dwp::Result<serde_json::Value> {
    let model = DwpModel::load_checkpoint(&a.checkpoint)?;
    let record_path = a.record.unwrap_or_else(|| {
        a.checkpoint.parent().unwrap_or(Path::new(".")).join(RECORD_FILE)
    });
    let record = RunRecord::load(&record_path)?;
    let data = harness::load_csv(&dataset_spec(&a.data))?;
    let ll = harness::evaluate(&model, &data, &record.transform, a.samples, a.seed)?;
    Ok(json!({ "test_ll": ll, "n": data.x.rows() }))
}

fn sample_prior(a: SamplePriorArgs) -> dwp::Result<serde_json::Value> {
    if a.depth == 0 || a.points == 0 || a.input_dim == 0 {
        return Err(Error::Config("depth, points and input dimension must be positive".into()));
    }
    let widths = a.widths.unwrap_or_else(|| vec![a.points; a.depth]);
    if widths.len() != a.depth {
        return Err(Error::Config("need one width per layer".into()));
    }
    let mut rng = RngStream::new(a.seed, 0);
    let x = Matrix::from_fn(a.points, a.input_dim, |_, _| rng.normal());
    let mut kernels = vec![KernelConfig::with_ard(1.0, vec![(a.input_dim as f64).sqrt(); a.input_dim])?];
    for _ in 0..a.depth {
        kernels.push(KernelConfig::new(1.0, 1.0)?);
    }
    let s = dwp_prior_sample(&x, &widths, &kernels, a.jitter, 1, &mut rng.split(1))?;
    let g = s.grams.last().expect("depth >= 1").as_matrix();
    let text: String = (0..g.rows())
        .map(|i| {
            let row: Vec<String> = g.row(i).iter().map(|v| v.to_string()).collect();
            row.join(",") + "\n"
        })
        .collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, text)?;
    Ok(json!({ "out": a.out, "rows": g.rows(), "cols": g.cols(), "layer": a.depth }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::SamplePrior(a) => sample_prior(a),
        Cmd::Verify(a) => {
            let sel: Selection = match a.suite.parse() {
                Ok(s) => s,
                Err(e) => return fail(error_kind(&e), e.to_string(), json!({})),
            };
            let opts = VerifyOptions {
                seed: a.seed,
                draws: a.draws,
            };
            let results = run_suite(sel, &opts);
            for r in &results {
                println!("{r}");
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            println!("{} checks, {} passed, {} failed", results.len(), results.len() - failed.len(), failed.len());
            if !failed.is_empty() {
                let msg = format!("{} verification checks failed", failed.len());
                return fail("verification_failed", msg, json!({ "failed": failed }));
            }
            return ExitCode::SUCCESS;
        }
    };
    match res {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_kind(&e), e.to_string(), json!({})),
    }
}
