mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use algebraformer::autodiff::Fault;
use algebraformer::newton::StopRule;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{resolve, Overrides};
use error::CliError;

#[derive(Parser)]
#[command(name = "algebraformer", version, about = "Spectral linear systems, Newton trajectories and a transformer solver")]
struct Cli {
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file of run settings; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled systems from a boundary value problem.
    GenBvp(GenBvpArgs),
    /// Generate Newton trajectories on random l_p regression problems.
    GenNewton(GenNewtonArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint at the constant fine-tuning rate.
    FineTune(FineTuneArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare the model with LU, QR and SVD on noisy right-hand sides.
    BenchNoise(BenchNoiseArgs),
    /// Compare exact and learned Newton directions.
    BenchNewton(BenchNewtonArgs),
    /// Check analytic derivatives against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenBvpArgs {
    #[arg(long, value_parser = ["diffusion", "reaction", "advection"])]
    kind: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    /// Interior dimension of each system.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StopArg {
    Objective,
    Gradient,
}

impl From<StopArg> for StopRule {
    fn from(s: StopArg) -> Self {
        match s {
            StopArg::Objective => StopRule::ObjectiveDecrement,
            StopArg::Gradient => StopRule::GradientNorm,
        }
    }
}

#[derive(Args)]
struct NewtonFlags {
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, value_enum)]
    stop: Option<StopArg>,
    /// Compare against absolute rather than relative thresholds.
    #[arg(long)]
    absolute: bool,
    /// Armijo backtracking on each step.
    #[arg(long)]
    line_search: bool,
}

impl NewtonFlags {
    fn apply(&self, o: &mut Overrides) {
        o.set("newton.tol", self.tol)
            .set("newton.max_iter", self.max_iter)
            .set("newton.stop", self.stop.map(StopRule::from))
            .set("newton.relative", self.absolute.then_some(false))
            .set("newton.line_search", self.line_search.then_some(true));
    }
}

#[derive(Args)]
struct GenNewtonArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[command(flatten)]
    newton: NewtonFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizerFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    fine_tune_lr: Option<f64>,
    /// Save a checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Relative noise added to training right-hand sides.
    #[arg(long)]
    train_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl OptimizerFlags {
    fn apply(&self, o: &mut Overrides, epochs_path: &'static str) {
        o.set(epochs_path, self.epochs)
            .set("train.batch_size", self.batch_size)
            .set("train.lr_max", self.lr_max)
            .set("train.lr_min", self.lr_min)
            .set("train.weight_decay", self.weight_decay)
            .set("train.grad_clip", self.grad_clip)
            .set("train.fine_tune_lr", self.fine_tune_lr)
            .set("train.checkpoint_every", self.checkpoint_every)
            .set("train.train_noise", self.train_noise)
            .set("train.seed", self.seed);
    }
}

#[derive(Args)]
struct DataFlags {
    /// Dataset directory (systems or Newton trajectories).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Separate test dataset; otherwise the tail of --data is held out.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

impl DataFlags {
    fn apply(&self, o: &mut Overrides) {
        o.set("data", self.data.clone()).set("test_data", self.test_data.clone()).set("test_fraction", self.test_fraction);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, value_parser = ["paper", "desk"])]
    preset: Option<String>,
    /// Restrict attention to earlier tokens.
    #[arg(long)]
    causal: bool,
    /// Drop the learned positional embeddings.
    #[arg(long)]
    no_positional: bool,
    #[command(flatten)]
    opt: OptimizerFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FineTuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    from: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    opt: OptimizerFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for eval.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchNoiseArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated relative noise levels; a clean row is always added.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Relative singular-value cutoff for the SVD solver.
    #[arg(long)]
    rcond: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchNewtonArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Learned runs may use this many times the exact iteration count.
    #[arg(long)]
    iteration_factor: Option<usize>,
    #[command(flatten)]
    newton: NewtonFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run a single check.
    #[arg(long)]
    op: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, hide = true, value_parser = ["gelu-sign-flip"])]
    inject_fault: Option<String>,
}

fn dispatch(cli: &Cli) -> Result<bool, CliError> {
    let file = cli.config.as_deref();
    let mut o = Overrides::default();
    match &cli.command {
        Command::GenBvp(a) => {
            o.set("kind", a.kind.clone()).set("count", a.count).set("dim", a.dim).set("seed", a.seed).set("out", a.out.clone());
            commands::gen_bvp(&resolve(file, &o, Some("seed"))?)?;
        }
        Command::GenNewton(a) => {
            o.set("count", a.count).set("m", a.m).set("n", a.n).set("p", a.p).set("seed", a.seed).set("out", a.out.clone());
            a.newton.apply(&mut o);
            commands::gen_newton(&resolve(file, &o, Some("seed"))?)?;
        }
        Command::Train(a) => {
            a.data.apply(&mut o);
            a.opt.apply(&mut o, "train.epochs");
            o.set("preset", a.preset.clone())
                .set("causal", a.causal.then_some(true))
                .set("positional", a.no_positional.then_some(false))
                .set("out", a.out.clone());
            commands::train(&resolve(file, &o, Some("train.seed"))?)?;
        }
        Command::FineTune(a) => {
            a.data.apply(&mut o);
            a.opt.apply(&mut o, "epochs");
            o.set("from", a.from.clone()).set("out", a.out.clone());
            commands::fine_tune(&resolve(file, &o, Some("train.seed"))?)?;
        }
        Command::Eval(a) => {
            o.set("model", a.model.clone()).set("data", a.data.clone()).set("out", a.out.clone());
            commands::eval(&resolve(file, &o, None)?)?;
        }
        Command::BenchNoise(a) => {
            o.set("model", a.model.clone())
                .set("data", a.data.clone())
                .set("levels", a.levels.clone())
                .set("rcond", a.rcond)
                .set("seed", a.seed)
                .set("out", a.out.clone());
            commands::bench_noise(&resolve(file, &o, Some("seed"))?)?;
        }
        Command::BenchNewton(a) => {
            o.set("model", a.model.clone())
                .set("m", a.m)
                .set("n", a.n)
                .set("p", a.p)
                .set("trials", a.trials)
                .set("iteration_factor", a.iteration_factor)
                .set("seed", a.seed)
                .set("out", a.out.clone());
            a.newton.apply(&mut o);
            commands::bench_newton(&resolve(file, &o, Some("seed"))?)?;
        }
        Command::Gradcheck(a) => {
            o.set("op", a.op.clone()).set("seed", a.seed);
            let fault = a.inject_fault.as_ref().map(|_| Fault::GeluBackwardSignFlip);
            return commands::gradcheck(&resolve(file, &o, Some("seed"))?, fault);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
