use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use algebraformer::autodiff::Fault;
use algebraformer::bvp::{self, EquationKind};
use algebraformer::gradcheck::{self, SuiteOptions};
use algebraformer::model::{self, ModelConfig, ModelWeights};
use algebraformer::newton::{self, DirectionProvider, NewtonOptions};
use algebraformer::seeding::{self, streams};
use algebraformer::stats;
use algebraformer::training::{self, SupervisedSet, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::write_resolved;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "model.afw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const NEWTON_BENCH_HEADER: &str = "method,trial,iterations,final_objective,converged,seconds";

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenBvpRun {
    pub kind: EquationKind,
    pub count: usize,
    pub dim: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for GenBvpRun {
    fn default() -> Self {
        GenBvpRun { kind: EquationKind::Diffusion, count: 1000, dim: 64, seed: 0, out: None }
    }
}

pub fn gen_bvp(run: &GenBvpRun) -> Result<(), CliError> {
    let out = required(&run.out, "out")?;
    let ds = bvp::generate_dataset(run.kind, run.count, run.dim, run.seed)?;
    bvp::write_dataset(out, &ds)?;
    write_resolved(out, run)?;
    let conds = ds.conditions();
    if conds.is_empty() {
        println!("wrote 0 {} systems to {}", run.kind, out.display());
    } else {
        println!(
            "wrote {} {} systems of dimension {} to {} ({} rejected)",
            conds.len(),
            run.kind,
            run.dim,
            out.display(),
            ds.rejected
        );
        println!("median condition number: {:.6e}", stats::median(&conds));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenNewtonRun {
    pub count: usize,
    pub m: usize,
    pub n: usize,
    pub p: f64,
    pub seed: u64,
    pub newton: NewtonOptions,
    pub out: Option<PathBuf>,
}

impl Default for GenNewtonRun {
    fn default() -> Self {
        GenNewtonRun { count: 100, m: 500, n: 20, p: 6.0, seed: 0, newton: NewtonOptions::default(), out: None }
    }
}

pub fn gen_newton(run: &GenNewtonRun) -> Result<(), CliError> {
    let out = required(&run.out, "out")?;
    run.newton.validate()?;
    let ds = newton::generate_trajectories(run.count, run.m, run.n, run.p, &run.newton, run.seed)?;
    newton::write_trajectories(out, &ds)?;
    write_resolved(out, run)?;
    let lengths = &ds.manifest.trajectory_lengths;
    println!(
        "wrote {} converged trajectories of {} ({} pairs) to {}",
        ds.trajectories.len(),
        run.count,
        ds.pair_count(),
        out.display()
    );
    if !lengths.is_empty() {
        let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        println!("mean trajectory length: {mean:.3}");
    }
    Ok(())
}

/// A loaded training corpus: either labeled systems or Newton pairs.
struct Corpus {
    train: SupervisedSet,
    test: SupervisedSet,
    /// Builds the model config that matches this corpus.
    config: Box<dyn Fn(&str) -> Result<ModelConfig, CliError>>,
}

fn manifest_format(dir: &Path) -> Result<String, CliError> {
    let path = dir.join(bvp::MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(v.get("format").and_then(|f| f.as_str()).unwrap_or_default().to_string())
}

fn holdout(count: usize, fraction: f64) -> Result<usize, CliError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CliError::Usage(format!("test_fraction must lie in [0, 1), got {fraction}")));
    }
    Ok(count - (fraction * count as f64).round() as usize)
}

enum Loaded {
    Systems(Vec<bvp::LinearSystemSample>),
    Newton(newton::TrajectoryDataset),
}

fn load(dir: &Path) -> Result<Loaded, CliError> {
    let format = manifest_format(dir)?;
    if format == newton::TRAJECTORY_FORMAT {
        Ok(Loaded::Newton(newton::read_trajectories(dir)?))
    } else {
        Ok(Loaded::Systems(bvp::read_dataset(dir)?.samples))
    }
}

/// Loads `data`, taking the test split from `test_data` when given and
/// otherwise from the tail of `data`.
fn load_corpus(data: &Path, test_data: Option<&Path>, test_fraction: f64) -> Result<Corpus, CliError> {
    let test = test_data.map(load).transpose()?;
    match (load(data)?, test) {
        (Loaded::Systems(all), test) => {
            let (train, test) = match test {
                Some(Loaded::Systems(t)) => (all, t),
                Some(Loaded::Newton(_)) => return Err(CliError::Data("test data holds Newton pairs, training data holds systems".into())),
                None => {
                    let k = holdout(all.len(), test_fraction)?;
                    let (a, b) = all.split_at(k);
                    (a.to_vec(), b.to_vec())
                }
            };
            let n = train.first().map_or(0, |s| s.dim());
            Ok(Corpus {
                train: SupervisedSet::from_systems(&train)?,
                test: SupervisedSet::from_systems(&test)?,
                config: Box::new(move |preset| Ok(ModelConfig::for_systems(preset, n)?)),
            })
        }
        (Loaded::Newton(ds), test) => {
            let (train, test) = match test {
                Some(Loaded::Newton(t)) => (ds.trajectories, t.trajectories),
                Some(Loaded::Systems(_)) => return Err(CliError::Data("test data holds systems, training data holds Newton pairs".into())),
                None => ds.split(holdout(ds.trajectories.len(), test_fraction)?),
            };
            let n = ds.manifest.n;
            Ok(Corpus {
                train: newton::supervised_pairs(&train)?,
                test: newton::supervised_pairs(&test)?,
                config: Box::new(move |preset| Ok(ModelConfig::for_newton(preset, n)?)),
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Share of `data` held out for testing when `test_data` is absent.
    pub test_fraction: f64,
    pub preset: String,
    pub causal: bool,
    pub positional: bool,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            data: None,
            test_data: None,
            test_fraction: 0.1,
            preset: "desk".into(),
            causal: false,
            positional: true,
            train: TrainConfig::default(),
            out: None,
        }
    }
}

fn report(log: &training::MetricsLog, out: &Path) -> Result<(), CliError> {
    log.write_csv(&out.join(METRICS_FILE))?;
    match log.rows.last() {
        Some(r) => println!(
            "epoch {}: train loss {:.4e}, test MSE {:.4e}, test relative MSE {:.4e}",
            r.epoch, r.train_loss, r.test_mse, r.test_rel_mse
        ),
        None => println!("no epochs run"),
    }
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn train(run: &TrainRun) -> Result<(), CliError> {
    let out = required(&run.out, "out")?;
    let corpus = load_corpus(required(&run.data, "data")?, run.test_data.as_deref(), run.test_fraction)?;
    let mut cfg = (corpus.config)(&run.preset)?;
    cfg.causal = run.causal;
    cfg.positional = run.positional;
    if let Ok(baseline) = training::mean_predictor_mse(&corpus.train, &corpus.test) {
        println!(
            "{} training / {} test examples; mean-predictor test MSE {baseline:.4e}",
            corpus.train.len(),
            corpus.test.len()
        );
    }
    std::fs::create_dir_all(out)?;
    write_resolved(out, run)?;
    let (_, log) = training::train(&cfg, &run.train, &corpus.train, &corpus.test, Some(out))?;
    report(&log, out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneRun {
    pub from: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub test_fraction: f64,
    pub epochs: usize,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for FineTuneRun {
    fn default() -> Self {
        FineTuneRun {
            from: None,
            data: None,
            test_data: None,
            test_fraction: 0.1,
            epochs: 200,
            train: TrainConfig::default(),
            out: None,
        }
    }
}

pub fn fine_tune(run: &FineTuneRun) -> Result<(), CliError> {
    let out = required(&run.out, "out")?;
    let weights = model::load_weights(required(&run.from, "from")?)?;
    let corpus = load_corpus(required(&run.data, "data")?, run.test_data.as_deref(), run.test_fraction)?;
    std::fs::create_dir_all(out)?;
    write_resolved(out, run)?;
    let (_, log) = training::fine_tune(weights, &run.train, &corpus.train, &corpus.test, run.epochs, Some(out))?;
    report(&log, out)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalReport {
    examples: usize,
    mse: f64,
    mean_rel_mse: f64,
    median_rel_mse: f64,
}

pub fn eval(run: &EvalRun) -> Result<(), CliError> {
    let weights = model::load_weights(required(&run.model, "model")?)?;
    let set = match load(required(&run.data, "data")?)? {
        Loaded::Systems(s) => SupervisedSet::from_systems(&s)?,
        Loaded::Newton(ds) => newton::supervised_pairs(&ds.trajectories)?,
    };
    let stats = training::evaluate(&weights, &set)?;
    println!("examples: {}", set.len());
    println!("mse: {:.6e}", stats.mse);
    println!("mean relative mse: {:.6e}", stats.mean_rel_mse);
    println!("median relative mse: {:.6e}", stats.median_rel_mse);
    if let Some(out) = &run.out {
        write_resolved(out, run)?;
        let r = EvalReport {
            examples: set.len(),
            mse: stats.mse,
            mean_rel_mse: stats.mean_rel_mse,
            median_rel_mse: stats.median_rel_mse,
        };
        std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&r).expect("plain struct") + "\n")?;
    }
    Ok(())
}

fn csv_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchNoiseRun {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub levels: Vec<f64>,
    pub rcond: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for BenchNoiseRun {
    fn default() -> Self {
        BenchNoiseRun { model: None, data: None, levels: vec![1e-4, 1e-3, 1e-2, 1e-1], rcond: 1e-15, seed: 0, out: None }
    }
}

pub fn bench_noise(run: &BenchNoiseRun) -> Result<(), CliError> {
    let out = required(&run.out, "out")?;
    let weights = model::load_weights(required(&run.model, "model")?)?;
    let ds = bvp::read_dataset(required(&run.data, "data")?)?;
    let rows = training::noise_benchmark(&weights, &ds.samples, &run.levels, run.rcond, run.seed)?;
    let csv = training::noise_table_csv(&rows);
    write_resolved(csv_dir(out), run)?;
    std::fs::write(out, &csv)?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchNewtonRun {
    pub model: Option<PathBuf>,
    pub m: usize,
    pub n: usize,
    pub p: f64,
    pub trials: usize,
    pub seed: u64,
    pub newton: NewtonOptions,
    /// The learned run may take this many times the exact iteration count.
    pub iteration_factor: usize,
    pub out: Option<PathBuf>,
}

impl Default for BenchNewtonRun {
    fn default() -> Self {
        BenchNewtonRun {
            model: None,
            m: 500,
            n: 20,
            p: 6.0,
            trials: 10,
            seed: 1,
            newton: NewtonOptions::default(),
            iteration_factor: 5,
            out: None,
        }
    }
}

struct BenchRow {
    method: &'static str,
    trial: usize,
    trajectory: newton::NewtonTrajectory,
    seconds: f64,
}

fn learned_run(
    weights: &ModelWeights,
    prob: &newton::LpProblem,
    opts: &NewtonOptions,
) -> Result<(newton::NewtonTrajectory, newton::TimingReport), CliError> {
    let x0 = vec![0.0; prob.n()];
    Ok(newton::accelerated_newton(prob, &x0, &mut DirectionProvider::LearnedModel(weights), opts)?)
}

pub fn bench_newton(run: &BenchNewtonRun) -> Result<(), CliError> {
    let out = required(&run.out, "out")?;
    run.newton.validate()?;
    let weights = model::load_weights(required(&run.model, "model")?)?;
    let expected = ModelConfig::for_newton(&weights.config().preset, run.n)?;
    if weights.config().token_dim != expected.token_dim || weights.config().max_tokens < run.n {
        return Err(CliError::Data(format!(
            "model takes {} tokens of width {}, problems need {} tokens of width {}",
            weights.config().max_tokens,
            weights.config().token_dim,
            run.n,
            expected.token_dim
        )));
    }
    let mut exact_rows = Vec::new();
    let mut learned_rows = Vec::new();
    let mut first_latency = None;
    let mut later = Vec::new();
    for trial in 0..run.trials {
        let prob = newton::sample_problem(run.m, run.n, run.p, seeding::derive(run.seed, streams::NEWTON_PROBLEM, trial as u64))?;
        let started = Instant::now();
        let exact = newton::newton_solve(&prob, &vec![0.0; run.n], &run.newton)?;
        exact_rows.push(BenchRow { method: "exact", trial, seconds: started.elapsed().as_secs_f64(), trajectory: exact });

        let budget = NewtonOptions { max_iter: run.iteration_factor * exact_rows[trial].trajectory.iterations().max(1), ..run.newton };
        let started = Instant::now();
        let (learned, timing) = learned_run(&weights, &prob, &budget)?;
        let seconds = started.elapsed().as_secs_f64();
        if first_latency.is_none() {
            first_latency = Some(timing.first_direction);
            later.extend(timing.per_iteration.iter().skip(1));
        } else {
            later.extend(&timing.per_iteration);
        }
        learned_rows.push(BenchRow { method: "learned", trial, seconds, trajectory: learned });
    }

    let mut csv = format!("{NEWTON_BENCH_HEADER}\n");
    for r in exact_rows.iter().chain(&learned_rows) {
        let t = &r.trajectory;
        writeln!(csv, "{},{},{},{:e},{},{:e}", r.method, r.trial, t.iterations(), t.final_objective(), t.converged, r.seconds)
            .expect("writing to a String");
    }
    write_resolved(csv_dir(out), run)?;
    std::fs::write(out, &csv)?;
    print!("{csv}");
    if let Some(first) = first_latency {
        println!("first model evaluation: {first:.3e} s");
    }
    if !later.is_empty() {
        println!("median later model evaluation: {:.3e} s", stats::median(&later));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckRun {
    pub op: Option<String>,
    pub seed: u64,
}

/// Returns whether every check passed.
pub fn gradcheck(run: &GradcheckRun, fault: Option<Fault>) -> Result<bool, CliError> {
    if let Some(op) = &run.op {
        if !gradcheck::known_check(op) {
            let mut names: Vec<&str> = gradcheck::OP_NAMES.to_vec();
            names.push(gradcheck::MODEL_CHECK);
            return Err(CliError::Usage(format!("unknown check {op:?}; expected one of {}", names.join(", "))));
        }
    }
    let opts = SuiteOptions { only: run.op.clone(), seed: run.seed, fault };
    let results = gradcheck::run_suite(&opts)?;
    print!("{}", gradcheck::format_table(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}
