use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use npvi::checkpoint::{load_checkpoint, save_checkpoint};
use npvi::data::{
    generate_synthetic, ingest_csv, ingest_csv_with, split, PreprocessOptions, SynthOptions,
};
use npvi::experiment::grid_search;
use npvi::likelihood::{Likelihood, LikelihoodKind};
use npvi::predictor::DEFAULT_PREDICTIVE_SAMPLES;
use npvi::trainer::{Method, Trainer};
use npvi::{Dataset, ExperimentConfig, FittedModel, NpviError, Points, Result};

#[derive(Parser)]
#[command(
    name = "npvi",
    version,
    about = "Nearest-neighbor variational inference for GP models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset from a GP prior and write it as CSV.
    Synth(SynthArgs),
    /// Split a CSV into train / validation / test files.
    Split(SplitArgs),
    /// Train one model and save a checkpoint.
    Fit(FitArgs),
    /// Select the length scale on the validation set.
    Grid(GridArgs),
    /// Write latent predictions and log-likelihoods for a labelled CSV.
    Predict(PredictArgs),
    /// Print mean test NLL and its standard error.
    Evaluate(EvaluateArgs),
    /// Write predictions on a regular 2D grid.
    Surface(SurfaceArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 0.1)]
    length_scale: f64,
    #[arg(long, default_value = "poisson")]
    likelihood: LikelihoodKind,
    #[arg(long, default_value_t = 0.01)]
    sigma2: f64,
    #[arg(long, default_value_t = 1.0)]
    signal_variance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample the prior with this many nearest-neighbor parents (needed above 5000 points).
    #[arg(long)]
    vecchia_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving train.csv, val.csv and test.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

/// Training options; flags override the config file.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    likelihood: Option<LikelihoodKind>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_seconds: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    /// Standardize each feature column to zero mean and unit variance.
    #[arg(long)]
    standardize: bool,
    /// Map targets to [0, 1].
    #[arg(long)]
    target_min_max: bool,
    /// Raise transformed targets below this value to it.
    #[arg(long)]
    clamp_floor: Option<f64>,
    /// Training log, one JSON record per line.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    length_scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated length scales.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Checkpoint for the selected model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long, default_value_t = DEFAULT_PREDICTIVE_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long, default_value_t = DEFAULT_PREDICTIVE_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SurfaceArgs {
    #[arg(long)]
    model: PathBuf,
    /// Points per axis.
    #[arg(long, default_value_t = 100)]
    resolution: usize,
    /// x1_min,x1_max,x2_min,x2_max in model coordinates.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [0.0, 1.0, 0.0, 1.0])]
    bounds: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split_cmd(a),
        Command::Fit(a) => fit(a),
        Command::Grid(a) => grid(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Surface(a) => surface(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let lik = Likelihood::new(a.likelihood, a.sigma2)?;
    let opts = SynthOptions {
        signal_variance: a.signal_variance,
        vecchia_k: a.vecchia_k,
    };
    let data = generate_synthetic(a.n, a.d, a.length_scale, &lik, a.seed, &opts)?;
    data.write_csv(&a.out)?;
    println!(
        "{}",
        json!({"command": "synth", "rows": data.len(), "dim": data.dim(), "out": a.out})
    );
    Ok(())
}

fn split_cmd(a: SplitArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let data: Dataset = ingest_csv(&a.input, &a.target, &PreprocessOptions::default())?;
    let (tr, va, te) = split(&data, &cfg.split, a.seed.unwrap_or(cfg.seed))?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (name, part) in [("train.csv", &tr), ("val.csv", &va), ("test.csv", &te)] {
        part.write_csv(a.out_dir.join(name))?;
    }
    println!(
        "{}",
        json!({
            "command": "split",
            "rejected_rows": data.meta.rejected_rows.len(),
            "train": tr.len(),
            "validation": va.len(),
            "test": te.len(),
        })
    );
    Ok(())
}

impl TrainArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(method => method, k => k, likelihood => likelihood, sigma2 => sigma2, batch_size => batch_size,
             max_seconds => max_seconds, eval_every => eval_every, patience => patience,
             mc_samples => mc_samples, val_samples => val_samples, seed => seed);
        if self.lr.is_some() {
            c.learning_rate = self.lr;
        }
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        if self.max_epochs.is_some() {
            c.max_epochs = self.max_epochs;
        }
        if self.standardize {
            c.preprocessing.standardize_features = true;
        }
        if self.target_min_max {
            c.preprocessing.target_min_max = true;
        }
        if self.clamp_floor.is_some() {
            c.preprocessing.clamp_floor = self.clamp_floor;
        }
        c.validate()?;
        Ok(c)
    }

    fn datasets(&self, cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
        let train: Dataset = ingest_csv(&self.train, &self.target, &cfg.preprocessing)?;
        let val = ingest_csv_with(&self.val, &self.target, &train.meta.preprocessing)?;
        Ok((train, val))
    }

    fn write_log(&self, model: &FittedModel) -> Result<()> {
        match &self.log {
            Some(p) => model.log.write_jsonl(p),
            None => Ok(()),
        }
    }
}

fn summary(command: &str, model: &FittedModel, length_scale: f64) -> serde_json::Value {
    json!({
        "command": command,
        "method": model.method().to_string(),
        "length_scale": length_scale,
        "steps": model.log.steps,
        "epochs": model.log.epochs,
        "best_step": model.log.best_step,
        "best_val_nll": model.log.best_val_nll,
        "stop_reason": model.log.stop_reason,
    })
}

fn fit(a: FitArgs) -> Result<()> {
    let cfg = a.train.config()?;
    let (train, val) = a.train.datasets(&cfg)?;
    let ls = a.length_scale.unwrap_or(cfg.length_scale_grid[0]);
    let mut model = Trainer::new(
        &train,
        &val,
        cfg.train_config(),
        cfg.kernel(ls)?,
        cfg.likelihood()?,
    )?
    .run()?;
    model.preprocessing = Some(train.meta.preprocessing.clone());
    save_checkpoint(&model, &a.out)?;
    a.train.write_log(&model)?;
    println!("{}", summary("fit", &model, ls));
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let mut cfg = a.train.config()?;
    if let Some(g) = a.grid.clone() {
        cfg.length_scale_grid = g;
        cfg.validate()?;
    }
    let (train, val) = a.train.datasets(&cfg)?;
    let mut res = grid_search(&train, &val, &cfg)?;
    for row in &res.table {
        println!(
            "{}",
            json!({"length_scale": row.length_scale, "val_nll": row.val_nll, "steps": row.steps})
        );
    }
    res.best_model.preprocessing = Some(train.meta.preprocessing.clone());
    if let Some(out) = &a.out {
        save_checkpoint(&res.best_model, out)?;
    }
    a.train.write_log(&res.best_model)?;
    println!(
        "{}",
        summary("grid", &res.best_model, res.best_length_scale)
    );
    Ok(())
}

fn load_test(model: &FittedModel, path: &Path, target: &str) -> Result<Dataset> {
    match &model.preprocessing {
        Some(pre) => ingest_csv_with(path, target, pre),
        None => ingest_csv(path, target, &PreprocessOptions::default()),
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let model: FittedModel = load_checkpoint(&a.model)?;
    let data = load_test(&model, &a.input, &a.target)?;
    let view = model.view()?;
    let pts: Vec<&[f64]> = data.x.iter().collect();
    let latents = view.predict_many(&pts)?;
    let (_, nll) = view.nll_per_point(&data.x, &data.y, a.samples, a.seed)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(csv_err)?;
    let mut header = data.meta.feature_names.clone();
    header.extend(["y", "mean", "variance", "log_prob"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (i, lat) in latents.iter().enumerate() {
        let mut rec: Vec<String> = data.x.point(i).iter().map(f64::to_string).collect();
        rec.extend([data.y[i], lat.mean, lat.variance, -nll[i]].map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    println!(
        "{}",
        json!({"command": "predict", "rows": data.len(), "out": a.out})
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model: FittedModel = load_checkpoint(&a.model)?;
    let data = load_test(&model, &a.test, &a.target)?;
    let (mean, per_point) = model
        .view()?
        .nll_per_point(&data.x, &data.y, a.samples, a.seed)?;
    let n = per_point.len() as f64;
    let se = if per_point.len() > 1 {
        let var = per_point.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    println!("test NLL: {mean:.4} ± {se:.4}");
    println!(
        "{}",
        json!({"command": "evaluate", "rows": per_point.len(), "mean_nll": mean, "std_err": se})
    );
    Ok(())
}

fn surface(a: SurfaceArgs) -> Result<()> {
    let model: FittedModel = load_checkpoint(&a.model)?;
    if model.train_x.dim() != 2 {
        return Err(NpviError::Input(format!(
            "surface needs a 2-dimensional model, this one has dimension {}",
            model.train_x.dim()
        )));
    }
    if a.resolution < 2 {
        return Err(NpviError::Input("resolution must be at least 2".into()));
    }
    let [x0, x1, y0, y1] = [a.bounds[0], a.bounds[1], a.bounds[2], a.bounds[3]];
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (a.resolution - 1) as f64;
    let mut coords = Vec::with_capacity(2 * a.resolution * a.resolution);
    for r in 0..a.resolution {
        for c in 0..a.resolution {
            coords.extend([step(x0, x1, c), step(y0, y1, r)]);
        }
    }
    let grid = Points::new(2, coords)?;
    let pts: Vec<&[f64]> = grid.iter().collect();
    let latents = model.view()?.predict_many(&pts)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(csv_err)?;
    w.write_record(["x1", "x2", "mean", "variance"])
        .map_err(csv_err)?;
    for (p, lat) in pts.iter().zip(&latents) {
        w.write_record([p[0], p[1], lat.mean, lat.variance].map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    println!(
        "{}",
        json!({"command": "surface", "points": latents.len(), "out": a.out})
    );
    Ok(())
}

fn csv_err(e: csv::Error) -> NpviError {
    NpviError::Input(format!("csv: {e}"))
}
