use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use amorgp::baselines::{fit_map, fit_ml, timing_compare, write_timing, InitMode, MLFitConfig};
use amorgp::checks::{run_all, CheckConfig};
use amorgp::dataset::{split_dataset, Dataset, Standardizer};
use amorgp::ensemble::{build_eval_kernel_set, ensemble_predict_batched, write_report, EnsembleSpec};
use amorgp::gp::GpPosterior;
use amorgp::grammar::{KernelExpression, NamedParams, ParamAssignment};
use amorgp::linalg::Matrix;
use amorgp::manifest::{append_manifest, sha256_file, RunManifest};
use amorgp::model::{forward_cost_probe, AmortizationModel, ModelConfig};
use amorgp::sampler::{
    sample_expression, sample_gp_targets, sample_pair, sample_params_with, save_pairs, stream_rng, SamplerConfig,
};
use amorgp::training::{median, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "amorgp", version, about = "Amortized inference of GP kernel hyperparameters")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write sampled training pairs to a cache file.
    Sample(SampleArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Run noise fine-tuning on a trained model.
    Finetune(FinetuneArgs),
    /// Predict kernel parameters for a dataset.
    Infer(InferArgs),
    /// Fit parameters by maximizing the marginal likelihood.
    FitMl(FitArgs),
    /// Fit parameters by maximizing the posterior.
    FitMap(FitArgs),
    /// Score a kernel set on a train/test split.
    Evaluate(EvaluateArgs),
    /// Marginal-likelihood weighted ensemble over a kernel set.
    Ensemble(EnsembleArgs),
    /// Timing tables.
    Bench(BenchArgs),
    /// Run the invariant suite.
    Check(CheckArgs),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Sampler configuration JSON.
    #[arg(long)]
    sampler: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
    Tiny,
}

impl Preset {
    fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Full => ModelConfig::full(),
            Preset::Tiny => ModelConfig::tiny(8),
        }
    }

    fn train(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig::full(),
            _ => TrainConfig::desk(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Training configuration JSON; missing fields take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    total_pairs: Option<usize>,
    #[arg(long)]
    phase2_pairs: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file, last column is the target.
    #[arg(long)]
    data: PathBuf,
    /// Skip standardization of inputs and targets.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    kernel: String,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    kernel: String,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 150)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Draw the first start from the priors instead of all-ones.
    #[arg(long)]
    prior_init: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Amortized,
    Ml,
    Map,
}

#[derive(Args)]
struct SplitArgs {
    /// CSV dataset. Without it, a dataset is drawn from the generative prior.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    /// Input dimension of a generated dataset.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// `eval24` or a `;`-separated list of expressions.
    #[arg(long, default_value = "eval24")]
    kernels: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Defaults to `amortized` with a model and `ml` without.
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Output CSV; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    /// Model checkpoint; a randomly initialized desk model otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Restarts of the multi-start baseline.
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 250)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Skip the baseline timing table.
    #[arg(long)]
    probe_only: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match &cli.command {
        Command::Sample(a) => sample(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Finetune(a) => finetune(a, seed),
        Command::Infer(a) => infer(a),
        Command::FitMl(a) => fit(a, seed, false),
        Command::FitMap(a) => fit(a, seed, true),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::Ensemble(a) => ensemble(a, seed),
        Command::Bench(a) => bench(a, seed),
        Command::Check(a) => check(a, seed),
    }?;
    Ok(ExitCode::SUCCESS)
}

struct Run {
    command: &'static str,
    seed: u64,
    started: chrono::DateTime<Utc>,
}

impl Run {
    fn start(command: &'static str, seed: u64) -> Self {
        Self { command, seed, started: Utc::now() }
    }

    fn finish(
        self,
        dir: &Path,
        config: impl Serialize,
        checkpoint: Option<&Path>,
        outputs: Vec<PathBuf>,
    ) -> Result<()> {
        let checkpoint_sha256 = checkpoint.map(sha256_file).transpose()?;
        append_manifest(
            dir,
            RunManifest {
                command: self.command.into(),
                args: std::env::args().skip(1).collect(),
                config: serde_json::to_value(config)?,
                seed: self.seed,
                checkpoint_sha256,
                started: self.started,
                finished: Utc::now(),
                outputs,
            },
        )?;
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_kernel(s: &str) -> Result<KernelExpression> {
    s.parse::<KernelExpression>().with_context(|| format!("bad kernel expression `{s}`"))
}

fn load_model(path: &Path) -> Result<AmortizationModel> {
    let (model, _, _) = AmortizationModel::load(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(model)
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let data = Dataset::from_csv(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    if args.raw {
        return Ok(data);
    }
    Ok(Standardizer::fit(&data).transform(&data)?)
}

fn sample(a: &SampleArgs, seed: u64) -> Result<()> {
    let run = Run::start("sample", seed);
    let cfg: SamplerConfig = match &a.sampler {
        Some(p) => read_json(p)?,
        None => SamplerConfig { rng_seed: seed, ..SamplerConfig::default() },
    };
    cfg.validate()?;
    let pairs = (0..a.count)
        .map(|i| sample_pair(&cfg, &mut stream_rng(cfg.rng_seed, i as u64)))
        .collect::<amorgp::Result<Vec<_>>>()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_pairs(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    let dir = manifest_dir(&a.out);
    run.finish(&dir, &cfg, None, vec![a.out.clone()])
}

fn manifest_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn train_config(preset: TrainConfig, path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            // Layer the file over the preset so partial files work.
            let mut base = serde_json::to_value(preset)?;
            let over: serde_json::Value = read_json(p)?;
            merge(&mut base, over);
            Ok(serde_json::from_value(base)?)
        }
        None => Ok(preset),
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let run = Run::start("train", seed);
    let mut cfg = train_config(a.preset.train(), a.config.as_ref())?;
    cfg.seed = seed;
    if let Some(v) = a.total_pairs {
        cfg.total_pairs = v;
    }
    if let Some(v) = a.phase2_pairs {
        cfg.phase2_pairs = v;
    }
    if let Some(v) = a.threads {
        cfg.threads = v;
    }
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(p, Some(cfg.clone()))?,
        None => Trainer::new(AmortizationModel::new(a.preset.model(), seed)?, cfg.clone())?,
    };
    let start = Instant::now();
    trainer.run(Some(&a.out))?;
    let ckpt = a.out.join("final.ckpt");
    println!(
        "trained {} steps on {} pairs in {:.1}s ({} skipped); checkpoint {}",
        trainer.step_count(),
        trainer.pairs_seen(),
        start.elapsed().as_secs_f64(),
        trainer.skipped_pairs(),
        ckpt.display()
    );
    let outputs = vec![ckpt.clone(), a.out.join("metrics.csv")];
    run.finish(&a.out, &cfg, Some(&ckpt), outputs)
}

fn finetune(a: &FinetuneArgs, seed: u64) -> Result<()> {
    let run = Run::start("finetune", seed);
    let model = load_model(&a.model)?;
    let mut cfg = train_config(TrainConfig::desk(), a.config.as_ref())?;
    cfg.seed = seed;
    if let Some(v) = a.pairs {
        cfg.phase2_pairs = v;
    }
    if let Some(v) = a.threads {
        cfg.threads = v;
    }
    let mut trainer = Trainer::finetuning(model, cfg.clone())?;
    trainer.run(Some(&a.out))?;
    let ckpt = a.out.join("final.ckpt");
    println!("fine-tuned {} steps; checkpoint {}", trainer.step_count(), ckpt.display());
    run.finish(&a.out, &cfg, Some(&ckpt), vec![ckpt.clone(), a.out.join("metrics.csv")])
}

fn print_params(expr: &KernelExpression, params: &ParamAssignment, extra: serde_json::Value) -> Result<()> {
    let mut v = serde_json::to_value(NamedParams::new(expr, params))?;
    if let (serde_json::Value::Object(m), serde_json::Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let expr = parse_kernel(&a.kernel)?;
    let data = load_data(&a.data)?;
    let model = load_model(&a.model)?;
    let params = model.predict_params(&data, &expr)?;
    params.validate(&expr)?;
    print_params(&expr, &params, serde_json::json!({}))
}

fn fit(a: &FitArgs, seed: u64, map: bool) -> Result<()> {
    let expr = parse_kernel(&a.kernel)?;
    let data = load_data(&a.data)?;
    let cfg = MLFitConfig {
        lr: a.lr,
        max_steps: a.steps,
        restarts: a.restarts,
        init_mode: if a.prior_init { InitMode::PriorDraw } else { InitMode::FixedOnes },
        seed,
        ..MLFitConfig::default()
    };
    cfg.validate()?;
    let r = if map { fit_map(&expr, &data, &cfg)? } else { fit_ml(&expr, &data, &cfg)? };
    print_params(
        &expr,
        &r.params,
        serde_json::json!({"objective": r.objective, "evaluations": r.steps, "restart": r.restart}),
    )
}

/// Train/test split shared by `evaluate` and `ensemble`, standardized with
/// training statistics unless `--raw`.
fn prepare_split(a: &SplitArgs, seed: u64) -> Result<(Dataset, Dataset)> {
    let data = match &a.data {
        Some(p) => Dataset::from_csv(p).with_context(|| format!("reading {}", p.display()))?,
        None => generated_dataset(a.n_train + 400, a.dim, seed)?,
    };
    let (train, test) = split_dataset(&data, a.n_train, seed)?;
    if a.raw {
        return Ok((train, test));
    }
    let st = Standardizer::fit(&train);
    Ok((st.transform(&train)?, st.transform(&test)?))
}

fn generated_dataset(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream_rng(seed, 0);
    let expr = sample_expression(d, &mut rng);
    let params = sample_params_with(&expr, &Default::default(), &mut rng);
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect());
    let y = sample_gp_targets(&expr, &params, &x, &mut rng)?;
    log::info!("generated dataset from {expr}");
    Ok(Dataset::new(x, y)?)
}

fn kernel_set(spec: &str, d: usize, seed: u64) -> Result<Vec<KernelExpression>> {
    if spec == "eval24" {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok(build_eval_kernel_set(d, &mut rng)?);
    }
    spec.split(';').map(|s| parse_kernel(s.trim())).collect()
}

#[derive(Serialize)]
struct EvalRow {
    kernel: String,
    method: String,
    rmse: f64,
    nll: f64,
    seconds: f64,
}

fn evaluate(a: &EvaluateArgs, seed: u64) -> Result<()> {
    let run = Run::start("evaluate", seed);
    let (train, test) = prepare_split(&a.split, seed)?;
    let exprs = kernel_set(&a.split.kernels, train.d(), seed)?;
    let method = a.method.unwrap_or(if a.model.is_some() { Method::Amortized } else { Method::Ml });
    let model = match (&a.model, method) {
        (Some(p), _) => Some(load_model(p)?),
        (None, Method::Amortized) => bail!("--method amortized needs --model"),
        (None, _) => None,
    };
    let fit_cfg = MLFitConfig { seed, ..MLFitConfig::default() };
    let mut rows = Vec::with_capacity(exprs.len());
    for expr in &exprs {
        let start = Instant::now();
        let params = match method {
            Method::Amortized => model.as_ref().expect("checked above").predict_params(&train, expr),
            Method::Ml => fit_ml(expr, &train, &fit_cfg).map(|r| r.params),
            Method::Map => fit_map(expr, &train, &fit_cfg).map(|r| r.params),
        };
        let seconds = start.elapsed().as_secs_f64();
        let (rmse, nll) = params
            .and_then(|p| GpPosterior::new(expr.clone(), p, train.clone()))
            .and_then(|post| post.metrics(&test))
            .map(|m| (m.rmse, m.nll))
            .unwrap_or_else(|e| {
                log::warn!("{expr}: {e}");
                (f64::NAN, f64::NAN)
            });
        let name = match method {
            Method::Amortized => "amortized",
            Method::Ml => "ml",
            Method::Map => "map",
        };
        rows.push(EvalRow { kernel: expr.to_string(), method: name.into(), rmse, nll, seconds });
    }
    write_csv(a.out.as_deref(), &rows)?;
    if let Some(out) = &a.out {
        let config =
            serde_json::json!({"n_train": a.split.n_train, "kernels": a.split.kernels, "method": rows[0].method});
        run.finish(&manifest_dir(out), config, a.model.as_deref(), vec![out.clone()])?;
    }
    Ok(())
}

fn write_csv<T: Serialize>(out: Option<&Path>, rows: &[T]) -> Result<()> {
    let sink: Box<dyn Write> = match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|q| !q.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Box::new(fs::File::create(p)?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn ensemble(a: &EnsembleArgs, seed: u64) -> Result<()> {
    let run = Run::start("ensemble", seed);
    let (train, test) = prepare_split(&a.split, seed)?;
    let spec = EnsembleSpec::new(kernel_set(&a.split.kernels, train.d(), seed)?)?;
    let model = load_model(&a.model)?;
    let pred = ensemble_predict_batched(&model, &train, &spec, test.x())?;
    match &a.out {
        Some(p) => {
            write_report(fs::File::create(p)?, &pred, test.y())?;
            let config = serde_json::json!({"n_train": a.split.n_train, "kernels": a.split.kernels});
            run.finish(&manifest_dir(p), config, Some(&a.model), vec![p.clone()])?;
        }
        None => write_report(std::io::stdout(), &pred, test.y())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbeRow {
    n: usize,
    d: usize,
    l: usize,
    median_seconds: f64,
}

fn bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let run = Run::start("bench", seed);
    fs::create_dir_all(&a.out)?;
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => AmortizationModel::new(ModelConfig::desk(), seed)?,
    };
    let mut probe = Vec::new();
    let grid = [
        (64, 1, 1),
        (128, 1, 1),
        (256, 1, 1),
        (512, 1, 1),
        (128, 2, 1),
        (128, 4, 1),
        (128, 8, 1),
        (128, 2, 2),
        (128, 2, 4),
    ];
    for (n, d, l) in grid {
        let mut t: Vec<f64> = (0..a.repeats.max(1))
            .map(|r| forward_cost_probe(&model, n, d, l, seed + r as u64).map(|x| x.as_secs_f64()))
            .collect::<amorgp::Result<_>>()?;
        probe.push(ProbeRow { n, d, l, median_seconds: median(&mut t) });
    }
    let probe_path = a.out.join("forward_cost.csv");
    write_csv(Some(&probe_path), &probe)?;
    let mut outputs = vec![probe_path];
    if !a.probe_only {
        let (train, test) = prepare_split(
            &SplitArgs { data: None, raw: false, n_train: a.n, dim: a.dim, kernels: "eval24".into() },
            seed,
        )?;
        let exprs = kernel_set("eval24", a.dim, seed)?;
        let cfg = MLFitConfig { seed, ..MLFitConfig::default() };
        let rows = timing_compare(&exprs, &train, &test, &model, &cfg, a.restarts)?;
        let path = a.out.join("timing.csv");
        write_timing(fs::File::create(&path)?, &rows)?;
        outputs.push(path);
    }
    let config = serde_json::json!({"repeats": a.repeats, "restarts": a.restarts, "n": a.n, "dim": a.dim});
    run.finish(&a.out, config, a.model.as_deref(), outputs)
}

fn check(a: &CheckArgs, seed: u64) -> Result<()> {
    let cfg = CheckConfig { cases: a.cases, seed, ..CheckConfig::default() };
    let outcomes = run_all(&cfg)?;
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.ok() { "PASS" } else { "FAIL" };
        println!("{tag} {} ({}/{} cases, worst {:.3e})", o.name, o.passed, o.cases, o.worst);
        if !o.ok() {
            failed += 1;
        }
    }
    println!("{} passed, {} failed", outcomes.len() - failed, failed);
    if failed > 0 {
        bail!("{failed} checks failed");
    }
    Ok(())
}
