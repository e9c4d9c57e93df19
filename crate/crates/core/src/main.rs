#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use rfshim::dataset_io::{load_dataset, save_dataset};
use rfshim::field::{coefficient_of_variation, generate_dataset, Dataset, GenConfig, SliceRecord, Split};
use rfshim::nfd::{
    evaluate_nfd, load_nfd, save_nfd, synth_labeled_set, train_nfd, NfdTrainConfig, SampleCounts,
    UniformityCriterion,
};
use rfshim::objective::{magnitude_map, quadrature_weights, rmse_percent, ObjectiveParams, ShimWeights};
use rfshim::predictor::{load_model, predict, predict_batch, save_model, train, TrainConfig};
use rfshim::report::{combined_ratio, mean, mean_ratio, median, ratio_pgm, BenchReport, MethodStats, RunConfig};
use rfshim::solvers::{
    adam_solve, mls_solve, restart_search, AdamHyper, AdamOptions, MlsOptions, RestartOptions,
    SolveReport,
};
use rfshim::ShimError;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser, Serialize)]
#[command(name = "rfshim", version, about = "RF shimming toolkit: synthetic fields, solvers, learned predictor")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "SHIM_WORKERS")]
    workers: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Fill reference weights by random-restart Adam.
    MakeRefs(MakeRefsArgs),
    /// Solve every slice with a classical solver and write a CSV.
    Solve(SolveArgs),
    /// Train predictor models over cross-validation folds.
    Train(TrainArgs),
    /// Predict weights with a trained model.
    Predict(PredictArgs),
    /// Time solvers and predictor on the same slices.
    Bench(BenchArgs),
    /// Write grayscale field-map images.
    Render(RenderArgs),
    /// Train the non-uniformity detector.
    NfdTrain(NfdTrainArgs),
    /// Evaluate the non-uniformity detector on held-out samples.
    NfdEval(NfdEvalArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    slices: usize,
    #[arg(long, default_value_t = 8)]
    coils: usize,
    #[arg(long, default_value_t = 101)]
    grid: usize,
    /// Phantom semi-major axis range in mm, as `lo,hi`.
    #[arg(long, value_parser = parse_range)]
    radius_range: Option<(f64, f64)>,
}

#[derive(Args, Serialize)]
struct MakeRefsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output path (default: overwrite the input).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    restarts: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SolveMethod {
    Mls,
    Adam,
}

#[derive(Args, Serialize)]
struct SolveArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SolveMethod::Mls)]
    method: SolveMethod,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Adam steps.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Also write every full solve report as JSON lines.
    #[arg(long)]
    reports: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    width_base: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitSel {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSel::All)]
    split: SplitSel,
    /// Flag predicted maps with a trained detector.
    #[arg(long)]
    nfd: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Predictor model files.
    #[arg(long, num_args = 1..)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = 200)]
    volume_slices: usize,
    #[arg(long, default_value_t = 50)]
    restarts: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Use only the first N slices.
    #[arg(long)]
    max_slices: Option<usize>,
    /// Skip the restart search.
    #[arg(long)]
    no_restarts: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    /// CSV with `slice_id` and `w<k>_re`/`w<k>_im` columns (as written by `predict`).
    #[arg(long, conflicts_with_all = ["model", "reference"])]
    weights: Option<PathBuf>,
    #[arg(long, conflicts_with = "reference")]
    model: Option<PathBuf>,
    /// Use the stored reference weights.
    #[arg(long)]
    reference: bool,
    #[arg(long)]
    out_dir: PathBuf,
    /// Render only the first N slices.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Serialize)]
struct CriterionArgs {
    #[arg(long, default_value_t = 0.15)]
    min_ratio: f64,
    #[arg(long, default_value_t = 0.35)]
    max_cov: f64,
}

#[derive(Args, Serialize)]
struct NfdTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    uniform: usize,
    #[arg(long, default_value_t = 200)]
    non_uniform: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[command(flatten)]
    criterion: CriterionArgs,
}

#[derive(Args, Serialize)]
struct NfdEvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    uniform: usize,
    #[arg(long, default_value_t = 200)]
    non_uniform: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[command(flatten)]
    criterion: CriterionArgs,
}

enum CliError {
    Usage(String),
    Data(ShimError),
    DataAt(PathBuf, ShimError),
    Internal(String),
}

trait At<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> At<T> for Result<T, ShimError> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::DataAt(path.to_path_buf(), e))
    }
}

impl From<ShimError> for CliError {
    fn from(e: ShimError) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if !(lo > 0.0 && hi >= lo) {
        return Err(format!("need 0 < lo <= hi, got {lo},{hi}"));
    }
    Ok((lo, hi))
}

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

struct Ctx {
    seed: u64,
    verbose: u8,
    argv: Vec<String>,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn snapshot<T: Serialize>(&self, command: &str, args: &T, output: &Path) -> CliResult {
        let mut options = serde_json::to_value(args).expect("arguments serialize");
        if let Some(map) = options.as_object_mut() {
            map.insert("seed".into(), self.seed.into());
        }
        let path = RunConfig::new(command, self.argv.clone(), options).write_beside(output)?;
        self.log(format!("config snapshot: {}", path.display()));
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let workers = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(EXIT_USAGE);
        }
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_INTERNAL);
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        verbose: cli.verbose,
        argv: std::env::args().collect(),
    };
    panic::set_hook(Box::new(|info| eprintln!("internal error: {info}")));
    let outcome = panic::catch_unwind(panic::AssertUnwindSafe(|| pool.install(|| run(&ctx, &cli.command))));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::Usage(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Ok(Err(CliError::Data(e))) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(EXIT_DATA)
        }
        Ok(Err(CliError::DataAt(p, e))) => {
            eprintln!("error [{}]: {}: {e}", e.code(), p.display());
            ExitCode::from(EXIT_DATA)
        }
        Ok(Err(CliError::Internal(m))) => {
            eprintln!("internal error: {m}");
            ExitCode::from(EXIT_INTERNAL)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}

fn run(ctx: &Ctx, command: &Command) -> CliResult {
    match command {
        Command::GenData(a) => gen_data(ctx, a),
        Command::MakeRefs(a) => make_refs(ctx, a),
        Command::Solve(a) => solve(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::Predict(a) => predict_cmd(ctx, a),
        Command::Bench(a) => bench(ctx, a),
        Command::Render(a) => render(ctx, a),
        Command::NfdTrain(a) => nfd_train(ctx, a),
        Command::NfdEval(a) => nfd_eval(ctx, a),
    }
}

fn gen_data(ctx: &Ctx, a: &GenDataArgs) -> CliResult {
    if a.slices == 0 {
        return usage("--slices must be >= 1");
    }
    if a.coils == 0 {
        return usage("--coils must be >= 1");
    }
    if a.grid < 8 {
        return usage("--grid must be >= 8");
    }
    let mut cfg = GenConfig {
        n_slices: a.slices,
        n_coils: a.coils,
        grid: a.grid,
        seed: ctx.seed,
        ..GenConfig::default()
    };
    if let Some(r) = a.radius_range {
        cfg.radius_range_mm = r;
    }
    let ds = generate_dataset(&cfg)?;
    save_dataset(&ds, &a.out)?;
    ctx.snapshot("gen-data", a, &a.out)?;

    let q = quadrature_weights(a.coils);
    let covs = ds
        .records
        .par_iter()
        .map(|r| Ok(coefficient_of_variation(&magnitude_map(&r.field, &q, &r.mask)?, &r.mask)))
        .collect::<Result<Vec<f64>, ShimError>>()?;
    println!(
        "wrote {} slices ({} train / {} val / {} test), {}x{} grid, {} coils to {}",
        ds.len(),
        ds.split_indices(Split::Train).len(),
        ds.split_indices(Split::Val).len(),
        ds.split_indices(Split::Test).len(),
        a.grid,
        a.grid,
        a.coils,
        a.out.display()
    );
    println!(
        "quadrature CoV: mean {:.4}, median {:.4}, min {:.4}, max {:.4}",
        mean(&covs),
        median(&covs),
        covs.iter().copied().fold(f64::INFINITY, f64::min),
        covs.iter().copied().fold(0.0, f64::max)
    );
    Ok(())
}

fn make_refs(ctx: &Ctx, a: &MakeRefsArgs) -> CliResult {
    if a.restarts == 0 || a.steps == 0 {
        return usage("--restarts and --steps must be >= 1");
    }
    if !(a.lr > 0.0) {
        return usage("--lr must be positive");
    }
    let mut ds = load_dataset(&a.data).at(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| a.data.clone());
    let params = ObjectiveParams::default();
    let start = Instant::now();
    let results: Vec<Result<SolveReport, ShimError>> = ds
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let opts = RestartOptions {
                n_restarts: a.restarts,
                steps: a.steps,
                seed: ctx.seed.wrapping_add(i as u64),
                hyper: AdamHyper {
                    lr: a.lr,
                    ..AdamHyper::default()
                },
            };
            restart_search(r, &params, &opts)
        })
        .collect();
    let mut failures = String::new();
    let mut rmse = Vec::new();
    for (r, res) in ds.records.iter_mut().zip(results) {
        match res.and_then(|rep| r.set_reference(&rep.final_weights)) {
            Ok(()) => rmse.push(r.reference().expect("just set").rmse_percent),
            Err(e) => {
                r.clear_reference();
                let _ = writeln!(failures, "{},{},\"{}\"", r.slice_id, e.code(), e.to_string().replace('"', "'"));
            }
        }
    }
    save_dataset(&ds, &out)?;
    ctx.snapshot("make-refs", a, &out)?;
    println!(
        "references for {}/{} slices in {:.1}s, mean RMSE {:.4}%",
        rmse.len(),
        ds.len(),
        start.elapsed().as_secs_f64(),
        mean(&rmse)
    );
    if !failures.is_empty() {
        let manifest = out.with_extension("failures.csv");
        fs::write(&manifest, format!("slice_id,error_code,message\n{failures}"))?;
        return Err(CliError::Data(ShimError::InvalidArgument(format!(
            "{} slices failed, see {}",
            ds.len() - rmse.len(),
            manifest.display()
        ))));
    }
    Ok(())
}

fn solve(ctx: &Ctx, a: &SolveArgs) -> CliResult {
    if !(a.lambda >= 0.0) {
        return usage("--lambda must be >= 0");
    }
    let ds = load_dataset(&a.data).at(&a.data)?;
    let params = ObjectiveParams::with_lambda(a.lambda);
    let results: Vec<Result<SolveReport, ShimError>> = ds
        .records
        .par_iter()
        .map(|r| match a.method {
            SolveMethod::Mls => mls_solve(
                r,
                &params,
                &MlsOptions {
                    max_iter: a.max_iter,
                    tol: a.tol,
                    init: None,
                },
            ),
            SolveMethod::Adam => adam_solve(
                r,
                &params,
                &AdamOptions {
                    steps: a.steps,
                    ..AdamOptions::default()
                },
            ),
        })
        .collect();
    let method = match a.method {
        SolveMethod::Mls => "mls",
        SolveMethod::Adam => "adam",
    };
    let mut csv = String::from("slice_id,method,rmse_percent,iterations,wall_time_s,converged,trace_monotone,error\n");
    let mut jsonl = String::new();
    let mut failed = 0;
    for (r, res) in ds.records.iter().zip(&results) {
        match res {
            Ok(rep) => {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},",
                    r.slice_id,
                    method,
                    rep.final_rmse_percent,
                    rep.iterations,
                    rep.wall_time_s,
                    rep.converged,
                    rep.trace_is_monotone()
                );
                let mut v = serde_json::to_value(rep).expect("report serializes");
                v["slice_id"] = r.slice_id.clone().into();
                let _ = writeln!(jsonl, "{v}");
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(csv, "{},{},,,,,,{}", r.slice_id, method, e.code());
            }
        }
    }
    fs::write(&a.out, csv)?;
    if let Some(p) = &a.reports {
        fs::write(p, jsonl)?;
    }
    ctx.snapshot("solve", a, &a.out)?;
    let ok: Vec<f64> = results.iter().flatten().map(|r| r.final_rmse_percent).collect();
    println!(
        "{method}: {} slices, {failed} failed, mean RMSE {:.4}%",
        results.len(),
        mean(&ok)
    );
    Ok(())
}

fn records_with_refs(ds: &Dataset, split: Split) -> CliResult<Vec<&SliceRecord>> {
    let recs = ds.records_in(split);
    if let Some(r) = recs.iter().find(|r| r.reference().is_none()) {
        return Err(CliError::Data(ShimError::InvalidArgument(format!(
            "record {} has no reference weights; run make-refs first",
            r.slice_id
        ))));
    }
    Ok(recs)
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> CliResult {
    if a.folds == 0 || a.batch_size == 0 || a.width_base == 0 {
        return usage("--folds, --batch-size and --width-base must be >= 1");
    }
    if !(a.lr > 0.0) {
        return usage("--lr must be positive");
    }
    let base = load_dataset(&a.data).at(&a.data)?;
    fs::create_dir_all(&a.out_dir)?;
    for fold in 0..a.folds {
        let config = TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            seed: ctx.seed.wrapping_add(fold as u64),
            width_base: a.width_base,
            ..TrainConfig::default()
        };
        let mut ds = base.clone();
        ds.resplit(config.split, config.seed)?;
        records_with_refs(&ds, Split::Train)?;
        records_with_refs(&ds, Split::Val)?;
        let start = Instant::now();
        let (model, history) = train(&ds, &config)?;
        let model_path = a.out_dir.join(format!("model_fold{fold}.shnn"));
        let hist_path = a.out_dir.join(format!("history_fold{fold}.json"));
        save_model(&model, &model_path)?;
        fs::write(&hist_path, serde_json::to_string_pretty(&history).expect("history serializes"))?;
        let last = history.epochs.last();
        println!(
            "fold {fold}: {} epochs in {:.1}s, final train loss {}, best epoch {:?} -> {}",
            history.epochs.len(),
            start.elapsed().as_secs_f64(),
            last.map_or("-".into(), |e| format!("{:.4}", e.train_loss)),
            history.best_epoch,
            model_path.display()
        );
    }
    ctx.snapshot("train", a, &a.out_dir.join("train"))?;
    Ok(())
}

fn select(ds: &Dataset, split: SplitSel) -> Vec<&SliceRecord> {
    match split {
        SplitSel::All => ds.records.iter().collect(),
        SplitSel::Train => ds.records_in(Split::Train),
        SplitSel::Val => ds.records_in(Split::Val),
        SplitSel::Test => ds.records_in(Split::Test),
    }
}

fn weight_header(c: usize) -> String {
    let re: Vec<String> = (0..c).map(|k| format!("w{k}_re")).collect();
    let im: Vec<String> = (0..c).map(|k| format!("w{k}_im")).collect();
    format!("{},{}", re.join(","), im.join(","))
}

fn predict_cmd(ctx: &Ctx, a: &PredictArgs) -> CliResult {
    let ds = load_dataset(&a.data).at(&a.data)?;
    let model = load_model(&a.model).at(&a.model)?;
    let detector = match &a.nfd {
        Some(p) => {
            let mut d = load_nfd(p).at(p)?;
            d.threshold = a.threshold;
            Some(d)
        }
        None => None,
    };
    let recs = select(&ds, a.split);
    if recs.is_empty() {
        return usage("selected split is empty");
    }
    let c = model.architecture().n_coils();
    let mut csv = format!(
        "slice_id,rmse_percent,ref_rmse_percent,wall_time_s,{}{}\n",
        weight_header(c),
        if detector.is_some() { ",nfd_label,nfd_confidence" } else { "" }
    );
    let mut rmses = Vec::new();
    for r in &recs {
        let p = predict(&model, r)?;
        let rmse = rmse_percent(&r.field, &p.weights, &r.mask, &r.target)?;
        rmses.push(rmse);
        let refr = r.reference().map_or(String::new(), |x| x.rmse_percent.to_string());
        let w: Vec<String> = p.weights.to_real().iter().map(|v| v.to_string()).collect();
        let _ = write!(csv, "{},{},{},{},{}", r.slice_id, rmse, refr, p.wall_time_s, w.join(","));
        if let Some(d) = &detector {
            let map = magnitude_map(&r.field, &p.weights, &r.mask)?;
            let (label, conf) = rfshim::nfd::classify(d, &map)?;
            let _ = write!(csv, ",{},{}", label.name(), conf);
        }
        csv.push('\n');
    }
    fs::write(&a.out, csv)?;
    ctx.snapshot("predict", a, &a.out)?;
    println!("predicted {} slices, mean RMSE {:.4}%", recs.len(), mean(&rmses));
    Ok(())
}

fn time_reps<F: FnMut() -> CliResult<Vec<f64>>>(reps: usize, n: usize, mut f: F) -> CliResult<(Vec<f64>, f64)> {
    let mut times = Vec::with_capacity(reps);
    let mut rmse = Vec::new();
    for _ in 0..reps {
        let start = Instant::now();
        rmse = f()?;
        times.push(start.elapsed().as_secs_f64() / n as f64);
    }
    Ok((rmse, median(&times)))
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> CliResult {
    if a.reps == 0 || a.volume_slices == 0 {
        return usage("--reps and --volume-slices must be >= 1");
    }
    let ds = load_dataset(&a.data).at(&a.data)?;
    let mut recs: Vec<&SliceRecord> = ds.records.iter().collect();
    if let Some(m) = a.max_slices {
        recs.truncate(m.max(1));
    }
    let n = recs.len();
    fs::create_dir_all(&a.out_dir)?;
    let params = ObjectiveParams::default();
    // every method is timed on one thread
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let mut methods = Vec::new();
    let mut model_load_s = None;
    single.install(|| -> CliResult {
        ctx.log("timing mls");
        let (rmse, t) = time_reps(a.reps, n, || {
            recs.iter()
                .map(|r| Ok(mls_solve(r, &params, &MlsOptions::default())?.final_rmse_percent))
                .collect()
        })?;
        methods.push(MethodStats::new("mls", &rmse, t, a.volume_slices));
        if !a.no_restarts {
            ctx.log("timing adam_restart");
            let opts = RestartOptions {
                n_restarts: a.restarts,
                steps: a.steps,
                seed: ctx.seed,
                ..RestartOptions::default()
            };
            let (rmse, t) = time_reps(a.reps, n, || {
                recs.iter()
                    .map(|r| Ok(restart_search(r, &params, &opts)?.final_rmse_percent))
                    .collect()
            })?;
            methods.push(MethodStats::new("adam_restart", &rmse, t, a.volume_slices));
        }
        for (k, path) in a.models.iter().enumerate() {
            let start = Instant::now();
            let model = load_model(path).at(path)?;
            let load = start.elapsed().as_secs_f64();
            if k == 0 {
                model_load_s = Some(load);
            }
            let name = if a.models.len() == 1 {
                "predictor".to_string()
            } else {
                format!("predictor{k}")
            };
            ctx.log(format!("timing {name}"));
            let (rmse, t) = time_reps(a.reps, n, || {
                let w = predict_batch(&model, &recs)?;
                recs.iter()
                    .zip(&w)
                    .map(|(r, w)| Ok(rmse_percent(&r.field, w, &r.mask, &r.target)?))
                    .collect()
            })?;
            methods.push(MethodStats::new(&name, &rmse, t, a.volume_slices));
        }
        Ok(())
    })?;
    let mut report = BenchReport {
        volume_slices: a.volume_slices,
        repetitions: a.reps,
        methods,
        model_load_s,
    };
    report.compute_speedups();
    fs::write(a.out_dir.join("bench.txt"), report.to_text())?;
    fs::write(a.out_dir.join("bench.csv"), report.to_csv())?;
    fs::write(a.out_dir.join("bench.json"), report.to_json())?;
    ctx.snapshot("bench", a, &a.out_dir.join("bench"))?;
    print!("{}", report.to_text());
    Ok(())
}

fn read_weight_csv(path: &Path) -> CliResult<Vec<(String, ShimWeights)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let bad = |m: String| CliError::Data(ShimError::Format(format!("{}: {m}", path.display())));
    let id_col = header
        .iter()
        .position(|h| *h == "slice_id")
        .ok_or_else(|| bad("missing slice_id column".into()))?;
    let mut re_cols = Vec::new();
    let mut im_cols = Vec::new();
    for k in 0.. {
        match (
            header.iter().position(|h| *h == format!("w{k}_re")),
            header.iter().position(|h| *h == format!("w{k}_im")),
        ) {
            (Some(r), Some(i)) => {
                re_cols.push(r);
                im_cols.push(i);
            }
            _ => break,
        }
    }
    if re_cols.is_empty() {
        return Err(bad("no w<k>_re / w<k>_im columns".into()));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let get = |c: usize| -> CliResult<f64> {
            f.get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("line {}: bad number in column {c}", ln + 2)))
        };
        let mut real = Vec::with_capacity(2 * re_cols.len());
        for &c in &re_cols {
            real.push(get(c)?);
        }
        for &c in &im_cols {
            real.push(get(c)?);
        }
        let id = f.get(id_col).ok_or_else(|| bad(format!("line {}: missing id", ln + 2)))?;
        out.push((id.to_string(), ShimWeights::from_real(&real)?));
    }
    Ok(out)
}

fn render(ctx: &Ctx, a: &RenderArgs) -> CliResult {
    let ds = load_dataset(&a.data).at(&a.data)?;
    let mut recs: Vec<&SliceRecord> = ds.records.iter().collect();
    if let Some(l) = a.limit {
        recs.truncate(l);
    }
    let weights: Vec<ShimWeights> = if let Some(p) = &a.weights {
        let table = read_weight_csv(p)?;
        recs.iter()
            .map(|r| {
                table
                    .iter()
                    .find(|(id, _)| *id == r.slice_id)
                    .map(|(_, w)| w.clone())
                    .ok_or_else(|| {
                        CliError::Data(ShimError::InvalidArgument(format!(
                            "no weights for slice {} in {}",
                            r.slice_id,
                            p.display()
                        )))
                    })
            })
            .collect::<CliResult<_>>()?
    } else if let Some(p) = &a.model {
        predict_batch(&load_model(p).at(p)?, &recs)?
    } else if a.reference {
        recs.iter()
            .map(|r| {
                r.reference().map(|x| x.weights.clone()).ok_or_else(|| {
                    CliError::Data(ShimError::InvalidArgument(format!(
                        "record {} has no reference weights",
                        r.slice_id
                    )))
                })
            })
            .collect::<CliResult<_>>()?
    } else {
        recs.iter().map(|r| quadrature_weights(r.n_coils())).collect()
    };
    fs::create_dir_all(&a.out_dir)?;
    let mut files = 0;
    for (r, w) in recs.iter().zip(&weights) {
        let mag = magnitude_map(&r.field, w, &r.mask)?;
        let img = ratio_pgm(&combined_ratio(&mag, r.target.as_slice()), &r.mask)?;
        fs::write(a.out_dir.join(format!("{}_combined.pgm", r.slice_id)), img)?;
        files += 1;
        for k in 0..r.n_coils() {
            let ch: Vec<f64> = r.field.channel(k).iter().map(|s| s.norm()).collect();
            let img = ratio_pgm(&mean_ratio(&ch, &r.mask), &r.mask)?;
            fs::write(a.out_dir.join(format!("{}_ch{k}.pgm", r.slice_id)), img)?;
            files += 1;
        }
    }
    ctx.snapshot("render", a, &a.out_dir.join("render"))?;
    println!("wrote {files} images for {} slices to {}", recs.len(), a.out_dir.display());
    Ok(())
}

fn criterion(a: &CriterionArgs) -> CliResult<UniformityCriterion> {
    if !(a.min_ratio >= 0.0 && a.max_cov > 0.0) {
        return usage("--min-ratio must be >= 0 and --max-cov > 0");
    }
    Ok(UniformityCriterion {
        min_ratio: a.min_ratio,
        max_cov: a.max_cov,
    })
}

fn nfd_train(ctx: &Ctx, a: &NfdTrainArgs) -> CliResult {
    if a.uniform == 0 || a.non_uniform == 0 {
        return usage("both classes need at least one sample");
    }
    let crit = criterion(&a.criterion)?;
    let ds = load_dataset(&a.data).at(&a.data)?;
    let recs = records_with_refs(&ds, Split::Train)?;
    let counts = SampleCounts {
        uniform: a.uniform,
        non_uniform: a.non_uniform,
    };
    let samples = synth_labeled_set(&recs, ctx.seed, counts, &crit)?;
    let config = NfdTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: ctx.seed,
    };
    let (model, history) = train_nfd(&samples, &config)?;
    save_nfd(&model, &a.out)?;
    let mut hist_path = a.out.clone().into_os_string();
    hist_path.push(".history.json");
    fs::write(&hist_path, serde_json::to_string_pretty(&history).expect("history serializes"))?;
    ctx.snapshot("nfd-train", a, &a.out)?;
    println!(
        "detector trained on {} samples, final training accuracy {}",
        samples.len(),
        history.last().map_or("-".into(), |e| format!("{:.4}", e.accuracy))
    );
    Ok(())
}

fn nfd_eval(ctx: &Ctx, a: &NfdEvalArgs) -> CliResult {
    if a.uniform == 0 && a.non_uniform == 0 {
        return usage("evaluation set would be empty");
    }
    let crit = criterion(&a.criterion)?;
    let ds = load_dataset(&a.data).at(&a.data)?;
    let mut recs = records_with_refs(&ds, Split::Val)?;
    recs.extend(records_with_refs(&ds, Split::Test)?);
    if recs.is_empty() {
        return Err(CliError::Data(ShimError::InvalidArgument(
            "dataset has no val/test records to evaluate on".into(),
        )));
    }
    let mut model = load_nfd(&a.model).at(&a.model)?;
    model.threshold = a.threshold;
    let counts = SampleCounts {
        uniform: a.uniform,
        non_uniform: a.non_uniform,
    };
    let samples = synth_labeled_set(&recs, ctx.seed, counts, &crit)?;
    let cm = evaluate_nfd(&model, &samples)?;
    fs::create_dir_all(&a.out_dir)?;
    let text = format!(
        "                 pred uniform  pred non_uniform\n\
         true uniform     {:>12}  {:>16}\n\
         true non_uniform {:>12}  {:>16}\n\
         accuracy {:.4} (uniform {:.4}, non_uniform {:.4})\n\
         mean confidence: uniform {:.4}, non_uniform {:.4}\n",
        cm.tn,
        cm.fp,
        cm.fn_,
        cm.tp,
        cm.accuracy(),
        cm.uniform_accuracy(),
        cm.non_uniform_accuracy(),
        cm.mean_confidence_uniform,
        cm.mean_confidence_non_uniform
    );
    fs::write(a.out_dir.join("confusion.txt"), &text)?;
    fs::write(
        a.out_dir.join("confusion.csv"),
        format!(
            "tp,fp,tn,fn,accuracy,mean_confidence_uniform,mean_confidence_non_uniform\n{},{},{},{},{},{},{}\n",
            cm.tp,
            cm.fp,
            cm.tn,
            cm.fn_,
            cm.accuracy(),
            cm.mean_confidence_uniform,
            cm.mean_confidence_non_uniform
        ),
    )?;
    fs::write(
        a.out_dir.join("confusion.json"),
        serde_json::to_string_pretty(&cm).expect("matrix serializes"),
    )?;
    ctx.snapshot("nfd-eval", a, &a.out_dir.join("confusion"))?;
    print!("{text}");
    Ok(())
}
