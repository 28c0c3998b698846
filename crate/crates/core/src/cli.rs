//! Command-line surface: variance benchmark, one-shot estimation, training
//! drivers and pmf export.
//!
//! Every command reads flags, optionally merged under a flat `key=value`
//! config file (flags win), validates them before any compute, and writes
//! CSV with a header row. Exit codes: 1 configuration, 2 data, 3 numeric.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::chebyshev::Interval;
use crate::degree_dist::{chebyshev_weighted_variance, DegreeDistribution, DistChoice};
use crate::error::{Category, Error, Result};
use crate::function::{ChebApprox, SpectralFunction};
use crate::optimize::{EvalConfig, Phase, SGDConfig, SVRGConfig, StepInfo, StepRule};
use crate::probes::{
    estimate_spectral_sum_fixed, estimate_spectral_sum_unbiased, power_method_rayleigh, power_safety, ProbePlan,
    WithInterval, POWER_ITERS,
};
use crate::rng::derive_seed;
use crate::tasks::completion::{
    completion_auto_rho, completion_train, initial_factor, CompletionEval, CompletionProblem, OptimizerConfig,
};
use crate::tasks::data::{load_movielens, load_symmetric_matrix, with_test_set, write_matrix, RatingFormat};
use crate::tasks::gp::{gp_negloglik_at, gp_train, kernel_interval, load_gp_data};

/// Stream tags: each random choice of a command uses
/// `derive_seed(--seed, &[tag])`.
pub const TAG_SPLIT: u64 = 10;
pub const TAG_INIT: u64 = 11;
pub const TAG_RUN: u64 = 12;
pub const TAG_EVAL: u64 = 13;
pub const TAG_INTERVAL: u64 = 14;
pub const TAG_PROBES: u64 = 15;

/// Series length before trimming in the variance benchmark.
const BENCH_DEGREE: usize = 256;

#[derive(Parser, Debug)]
#[command(
    name = "spectral-cheb",
    version,
    about = "Unbiased randomized Chebyshev estimators for spectral sums and the optimizers built on them"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Chebyshev-weighted variance per distribution for N = 5, 10, ..., 100
    VarianceBench(Opts),
    /// One estimate of tr f(A) for a symmetric matrix file
    Estimate(Opts),
    /// Smoothed nuclear-norm matrix completion
    McTrain(Opts),
    /// Gaussian-process hyperparameter learning
    GpTrain(Opts),
    /// Degree pmf as CSV (i, q_i, cumsum)
    Pmf(Opts),
}

/// Flags shared by all commands; each command reads the ones it needs.
#[derive(Args, Debug, Clone, Default)]
pub struct Opts {
    /// Flat key=value file using the long flag names as keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// log, sqrt, exp, x, x^k or poly:c0,c1,...
    #[arg(long)]
    pub func: Option<String>,
    /// Lower end of the spectral interval
    #[arg(long)]
    pub a: Option<f64>,
    /// Upper end of the spectral interval
    #[arg(long)]
    pub b: Option<f64>,
    /// Coefficient decay rate for the optimal distribution, or "auto"
    #[arg(long)]
    pub rho: Option<String>,
    /// Mean truncation degree
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Rademacher probes per estimate
    #[arg(long = "M", visible_alias = "probes")]
    pub m: Option<usize>,
    /// opt, pois, neg, neg(r) or det; variance-bench takes a comma list
    #[arg(long)]
    pub dist: Option<String>,
    /// Shape r used by a bare "neg" (default 5)
    #[arg(long = "neg-r")]
    pub neg_r: Option<f64>,
    /// Master seed; every random choice derives from it
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed truncation degree for --dist det, or the pmf export length
    #[arg(long)]
    pub degree: Option<usize>,
    /// sgd or svrg
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Epochs (interval refresh and step decay happen per epoch)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Iterations per epoch
    #[arg(long = "inner-iters")]
    pub inner_iters: Option<usize>,
    /// Initial step (sgd) or constant step (svrg)
    #[arg(long)]
    pub step: Option<f64>,
    /// Per-epoch step ratio for sgd
    #[arg(long = "step-decay")]
    pub step_decay: Option<f64>,
    /// Weight of the data term in matrix completion
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Shift of the smoothed nuclear norm (default: squared mean rating)
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Rank of the truncated SVD used to evaluate completions
    #[arg(long)]
    pub rank: Option<usize>,
    /// Training data file
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test ratings file; without it the training file is split
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Training fraction when splitting a single ratings file
    #[arg(long = "train-frac")]
    pub train_frac: Option<f64>,
    /// Symmetric matrix: MatrixMarket (.mtx) or dense whitespace text
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Initial GP hyperparameters "noise,scale,lengthscale"
    #[arg(long)]
    pub theta: Option<String>,
    /// Output CSV (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration trajectory CSV
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Trained model output
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Objective logging interval in iterations (default: one epoch)
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    /// Fill wallclock_ms columns (otherwise left blank so output is reproducible)
    #[arg(long)]
    pub timing: bool,
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{}' for {key}", v.trim())))
}

/// Reads `key=value` lines; `#` starts a comment.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let t = line.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        let (key, value) = t
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), k + 1)))?;
        map.insert(key.trim().trim_start_matches("--").to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl Opts {
    /// Fills unset fields from `map`; unknown keys are rejected.
    pub fn merge(&mut self, mut map: BTreeMap<String, String>) -> Result<()> {
        macro_rules! fill {
            ($($field:ident => $key:literal),* $(,)?) => {$(
                if let Some(v) = map.remove($key) {
                    if self.$field.is_none() {
                        self.$field = Some(parse_value($key, &v)?);
                    }
                }
            )*};
        }
        fill!(
            func => "func", a => "a", b => "b", rho => "rho", n => "N", m => "M", dist => "dist",
            neg_r => "neg-r", seed => "seed", degree => "degree", optimizer => "optimizer",
            epochs => "epochs", inner_iters => "inner-iters", step => "step", step_decay => "step-decay",
            lambda => "lambda", epsilon => "epsilon", rank => "rank", train => "train", test => "test",
            train_frac => "train-frac", matrix => "matrix", theta => "theta", out => "out",
            trajectory => "trajectory", model => "model", eval_every => "eval-every",
        );
        if let Some(v) = map.remove("probes") {
            if self.m.is_none() {
                self.m = Some(parse_value("probes", &v)?);
            }
        }
        if let Some(v) = map.remove("timing") {
            self.timing |= parse_value::<bool>("timing", &v)?;
        }
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown config key '{k}'")));
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn func(&self, default: &str) -> Result<SpectralFunction> {
        self.func.as_deref().unwrap_or(default).parse()
    }

    fn neg_r(&self) -> f64 {
        self.neg_r.unwrap_or(5.0)
    }

    fn dist_choice(&self, default: &str) -> Result<DistChoice> {
        DistChoice::parse_with_default(self.dist.as_deref().unwrap_or(default), self.neg_r())
    }

    /// Explicit ρ, or `None` for auto.
    fn rho_value(&self) -> Result<Option<f64>> {
        match self.rho.as_deref().map(str::trim) {
            None | Some("auto") => Ok(None),
            Some(v) => {
                let r: f64 = parse_value("rho", v)?;
                if !(r > 1.0) || !r.is_finite() {
                    return Err(Error::Config(format!("rho must exceed 1, got {r}")));
                }
                Ok(Some(r))
            }
        }
    }

    /// ρ for `choice`: the explicit value, or `auto()` when the optimal
    /// distribution needs one.
    fn resolve_rho(&self, choice: &DistChoice, auto: impl FnOnce() -> Result<f64>) -> Result<Option<f64>> {
        if *choice != DistChoice::Optimal {
            return Ok(None);
        }
        match self.rho_value()? {
            Some(r) => Ok(Some(r)),
            None => auto().map(Some).map_err(|e| {
                Error::Config(format!("the optimal distribution needs rho and auto selection failed ({e}); pass --rho"))
            }),
        }
    }

    fn positive<T: PartialOrd + Default + Copy + std::fmt::Display>(&self, name: &str, v: T) -> Result<T> {
        if v > T::default() {
            Ok(v)
        } else {
            Err(Error::Config(format!("--{name} must be positive, got {v}")))
        }
    }

    fn writer(&self) -> Result<Option<fs::File>> {
        self.out.as_deref().map(create).transpose()
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn io_err(e: io::Error) -> Error {
    Error::io("<output>", e)
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.12e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn exit_code(e: &Error) -> i32 {
    match e.category() {
        Category::Config => 1,
        Category::Data => 2,
        Category::Numeric => 3,
    }
}

/// Parses `args` (including the program name) and runs the command; returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let (mut opts, f): (Opts, fn(&Opts, &mut dyn Write, &mut dyn Write) -> Result<()>) = match cmd {
        Command::VarianceBench(o) => (o, cmd_variance_bench),
        Command::Estimate(o) => (o, cmd_estimate),
        Command::McTrain(o) => (o, cmd_mc_train),
        Command::GpTrain(o) => (o, cmd_gp_train),
        Command::Pmf(o) => (o, cmd_pmf),
    };
    if let Some(path) = opts.config.clone() {
        opts.merge(read_config(&path)?)?;
    }
    f(&opts, stdout, stderr)
}

/// Writes to `--out` when given, otherwise to `stdout`.
fn with_output(o: &Opts, stdout: &mut dyn Write, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    match o.writer()? {
        Some(mut f) => {
            let mut w = io::BufWriter::new(&mut f);
            body(&mut w).and_then(|_| w.flush()).map_err(io_err)
        }
        None => body(stdout).map_err(io_err),
    }
}

/// One row of the variance benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub function: String,
    pub distribution: String,
    pub n: usize,
    /// `+∞` when some coefficient has zero survival probability.
    pub variance: f64,
}

/// Chebyshev-weighted variance rows for each `(function, distribution, N)`.
///
/// The series is computed to degree 256 and trimmed once its coefficients
/// fall to `1e-15` of the largest, so quadrature noise never enters the
/// re-weighted tail.
pub fn variance_bench_rows(
    funcs: &[(SpectralFunction, Interval)],
    dists: &[DistChoice],
    ns: &[usize],
    rho: Option<f64>,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (f, iv) in funcs {
        let series = f.series(*iv, BENCH_DEGREE)?.trimmed(1e-15, 8);
        let frho = match rho {
            Some(r) => Some(r),
            None => f.auto_rho(*iv).ok(),
        };
        for choice in dists {
            for &n in ns {
                let variance = if choice.is_deterministic() && !f.is_polynomial() {
                    f64::INFINITY
                } else {
                    let dist = choice.build(n, frho)?;
                    match chebyshev_weighted_variance(&series, &dist, series.coeffs().len()) {
                        Ok(v) => v,
                        Err(Error::InfiniteVariance(_)) => f64::INFINITY,
                        Err(e) => return Err(e),
                    }
                };
                rows.push(BenchRow {
                    function: f.to_string(),
                    distribution: choice.to_string(),
                    n,
                    variance,
                });
            }
        }
    }
    Ok(rows)
}

fn cmd_variance_bench(o: &Opts, stdout: &mut dyn Write, _stderr: &mut dyn Write) -> Result<()> {
    let funcs: Vec<(SpectralFunction, Interval)> = match &o.func {
        Some(s) => {
            let f: SpectralFunction = s.parse()?;
            let iv = match (o.a, o.b) {
                (None, None) => f.default_interval(),
                (Some(a), Some(b)) => Interval::new(a, b)?,
                _ => return Err(Error::Config("give both --a and --b or neither".into())),
            };
            f.check_domain(iv).map_err(|e| Error::Config(e.to_string()))?;
            vec![(f, iv)]
        }
        None => [SpectralFunction::Log, SpectralFunction::Sqrt, SpectralFunction::Exp]
            .into_iter()
            .map(|f| {
                let iv = f.default_interval();
                (f, iv)
            })
            .collect(),
    };
    let dist_list = o.dist.as_deref().unwrap_or("opt,pois,neg(2),neg(5),neg(10),det");
    let dists = dist_list
        .split(',')
        .map(|s| DistChoice::parse_with_default(s, o.neg_r()))
        .collect::<Result<Vec<_>>>()?;
    let rho = o.rho_value()?;
    if dists.contains(&DistChoice::Optimal) && rho.is_none() {
        for (f, iv) in &funcs {
            f.auto_rho(*iv).map_err(|e| {
                Error::Config(format!("the optimal distribution needs rho for {f} and auto selection failed ({e}); pass --rho"))
            })?;
        }
    }
    let ns: Vec<usize> = match o.n {
        Some(n) => vec![o.positive("N", n)?],
        None => (1..=20).map(|k| 5 * k).collect(),
    };
    let rows = variance_bench_rows(&funcs, &dists, &ns, rho)?;
    with_output(o, stdout, |w| {
        writeln!(w, "function,distribution,N,weighted_variance")?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.function, r.distribution, r.n, fmt_f(r.variance))?;
        }
        Ok(())
    })
}

fn cmd_pmf(o: &Opts, stdout: &mut dyn Write, _stderr: &mut dyn Write) -> Result<()> {
    let n = o.positive("N", o.n.unwrap_or(10))?;
    let choice = o.dist_choice("opt")?;
    let f = o.func("log")?;
    let iv = match (o.a, o.b) {
        (Some(a), Some(b)) => Interval::new(a, b)?,
        _ => f.default_interval(),
    };
    let rho = o.resolve_rho(&choice, || f.auto_rho(iv))?;
    let dist = choice.build(n, rho)?;
    let upto = o.degree.unwrap_or_else(|| (3 * n).max(dist.support_max().unwrap_or(0)));
    with_output(o, stdout, |mut w| dist.write_pmf_csv(upto, &mut w))
}

/// Interval for `estimate`: flags, else `[−b, b]` (or an error for functions
/// singular at zero) with `b` the power-method bound on `|λ|max`.
fn estimate_interval(o: &Opts, f: &SpectralFunction, m: &crate::probes::CsrMatrix) -> Result<Interval> {
    let b = match o.b {
        Some(b) => b,
        None => power_safety(power_method_rayleigh(m, POWER_ITERS, derive_seed(o.seed(), &[TAG_INTERVAL]))?.abs()),
    };
    let a = match o.a {
        Some(a) => a,
        None if f.singularity().is_some() => {
            return Err(Error::Config(format!(
                "{f} needs a positive lower spectral bound; pass --a"
            )))
        }
        None => -b,
    };
    let iv = Interval::new(a, b).map_err(|e| Error::Config(e.to_string()))?;
    f.check_domain(iv).map_err(|e| Error::Config(e.to_string()))?;
    Ok(iv)
}

fn cmd_estimate(o: &Opts, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let path = o.matrix.as_deref().ok_or_else(|| Error::Config("estimate needs --matrix".into()))?;
    let f = o.func("log")?;
    // A polynomial is represented exactly at its own degree, so the
    // deterministic estimator is unbiased there.
    let poly = f.polynomial_degree();
    let choice = o.dist_choice(if poly.is_some() { "det" } else { "opt" })?;
    let n = o.positive("N", o.n.unwrap_or(15))?;
    let probes = o.positive("M", o.m.unwrap_or(10))?;
    let degree = o.degree.or(poly.filter(|_| o.n.is_none())).unwrap_or(n);
    let rho_explicit = o.rho_value()?;
    let m = load_symmetric_matrix(path)?;
    let iv = estimate_interval(o, &f, &m)?;
    let rho = o.resolve_rho(&choice, || f.auto_rho(iv))?;
    let approx = ChebApprox::new(f.clone(), iv, 64)?;
    let op = WithInterval::new(&m, iv);
    let plan = ProbePlan::new(derive_seed(o.seed(), &[TAG_PROBES]), probes)?;
    let (est, fixed_degree) = if choice.is_deterministic() {
        (estimate_spectral_sum_fixed(&op, &approx, degree, &plan)?, degree)
    } else {
        let dist = choice.build(n, rho)?;
        (estimate_spectral_sum_unbiased(&op, &approx, &dist, &plan)?, n)
    };
    let d = crate::probes::LinearOperator::dim(&m) as f64;
    let bias = match f.best_truncation_bound(iv, fixed_degree) {
        Some((e, _)) => d * e,
        None => f64::INFINITY,
    };
    writeln!(stderr, "interval = [{}, {}]", fmt_f(iv.a()), fmt_f(iv.b())).map_err(io_err)?;
    if let Some(r) = rho.or(rho_explicit) {
        writeln!(stderr, "rho = {}", fmt_f(r)).map_err(io_err)?;
    }
    writeln!(stderr, "std_error = {}", fmt_f(est.std_error())).map_err(io_err)?;
    writeln!(stderr, "matvecs = {}", est.matvecs).map_err(io_err)?;
    with_output(o, stdout, |w| {
        writeln!(w, "estimate,degree,M,bias_bound")?;
        writeln!(w, "{},{},{},{}", fmt_f(est.value), est.degree, probes, fmt_f(bias))
    })
}

/// Optimizer settings shared by the training commands.
struct TrainSettings {
    opt: OptimizerConfig,
    eval_every: usize,
}

fn train_settings(o: &Opts, default_step_sgd: f64, default_step_svrg: f64, default_m: usize) -> Result<TrainSettings> {
    let epochs = o.positive("epochs", o.epochs.unwrap_or(20))?;
    let inner = o.positive("inner-iters", o.inner_iters.unwrap_or(50))?;
    let probes = o.positive("M", o.m.unwrap_or(default_m))?;
    let eval_every = o.eval_every.unwrap_or(inner);
    let eval = Some(EvalConfig {
        every: eval_every,
        seed: derive_seed(o.seed(), &[TAG_EVAL]),
    });
    let master_seed = derive_seed(o.seed(), &[TAG_RUN]);
    let opt = match o.optimizer.as_deref().unwrap_or("sgd") {
        "sgd" => {
            let initial = o.positive("step", o.step.unwrap_or(default_step_sgd))?;
            let ratio = o.step_decay.unwrap_or(0.97);
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::Config(format!("--step-decay must lie in (0, 1], got {ratio}")));
            }
            OptimizerConfig::Sgd(SGDConfig {
                iterations: epochs * inner,
                epoch_len: inner,
                probes,
                step_rule: StepRule::ExpDecay { initial, ratio },
                master_seed,
                eval,
            })
        }
        "svrg" => OptimizerConfig::Svrg(SVRGConfig {
            epochs,
            inner,
            eta: o.positive("step", o.step.unwrap_or(default_step_svrg))?,
            probes,
            master_seed,
            eval,
        }),
        other => return Err(Error::Config(format!("unknown optimizer '{other}' (expected sgd or svrg)"))),
    };
    Ok(TrainSettings { opt, eval_every })
}

/// Collects trajectory and metrics rows from optimizer callbacks.
struct Recorder {
    start: Instant,
    timing: bool,
    trajectory: Vec<String>,
    metrics: Vec<String>,
}

impl Recorder {
    fn new(timing: bool) -> Self {
        Recorder {
            start: Instant::now(),
            timing,
            trajectory: Vec::new(),
            metrics: Vec::new(),
        }
    }

    fn wallclock(&self) -> String {
        if self.timing {
            format!("{:.3}", self.start.elapsed().as_secs_f64() * 1e3)
        } else {
            String::new()
        }
    }

    fn record(&mut self, si: &StepInfo, metric: impl FnOnce(&[f64]) -> Result<f64>) -> Result<()> {
        let wall = self.wallclock();
        self.trajectory.push(format!(
            "{},{},{},{},{},{},{}",
            si.phase,
            si.epoch,
            si.iter,
            fmt_opt(si.objective),
            fmt_opt(si.grad_norm),
            si.degree.map(|d| d.to_string()).unwrap_or_default(),
            wall
        ));
        if let (Some(obj), true) = (si.objective, si.phase != Phase::SvrgInner) {
            let m = metric(si.theta)?;
            self.metrics.push(format!("{},{},{},{}", si.iter, fmt_f(obj), fmt_f(m), wall));
        }
        Ok(())
    }

    fn write(&self, o: &Opts, stdout: &mut dyn Write) -> Result<()> {
        if let Some(path) = &o.trajectory {
            let mut w = io::BufWriter::new(create(path)?);
            writeln!(w, "phase,epoch,iter,objective_estimate,grad_norm,degree_n,wallclock_ms").map_err(io_err)?;
            for line in &self.trajectory {
                writeln!(w, "{line}").map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        with_output(o, stdout, |w| {
            writeln!(w, "iter,objective,rmse_or_nll,wallclock_ms")?;
            for line in &self.metrics {
                writeln!(w, "{line}")?;
            }
            Ok(())
        })
    }
}

/// Runs `train` while recording; the first callback error aborts the run
/// with that error.
fn recorded<R>(
    rec: &mut Recorder,
    metric: impl Fn(&[f64]) -> Result<f64>,
    train: impl FnOnce(&mut dyn FnMut(&StepInfo)) -> Result<R>,
) -> Result<R> {
    let mut failure: Option<Error> = None;
    let out = train(&mut |si: &StepInfo| {
        if failure.is_none() {
            if let Err(e) = rec.record(si, &metric) {
                failure = Some(e);
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => out,
    }
}

fn cmd_mc_train(o: &Opts, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let train_path = o.train.as_deref().ok_or_else(|| Error::Config("mc-train needs --train".into()))?;
    let choice = o.dist_choice("opt")?;
    let n = o.positive("N", o.n.unwrap_or(15))?;
    let lambda = o.lambda.unwrap_or(1.0);
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("--lambda must be non-negative, got {lambda}")));
    }
    if let Some(eps) = o.epsilon {
        o.positive("epsilon", eps)?;
    }
    let rank = o.positive("rank", o.rank.unwrap_or(5))?;
    let frac = o.train_frac.unwrap_or(0.9);
    let settings = train_settings(o, 0.03, 0.2, 2)?;
    o.rho_value()?;
    let split_seed = derive_seed(o.seed(), &[TAG_SPLIT]);
    let set = match o.test.as_deref() {
        None => load_movielens(train_path, RatingFormat::from_path(train_path), frac, split_seed)?,
        Some(test_path) => {
            let tr = load_movielens(train_path, RatingFormat::from_path(train_path), 1.0, split_seed)?;
            let te = load_movielens(test_path, RatingFormat::from_path(test_path), 1.0, split_seed)?;
            let (set, dropped) = with_test_set(&tr, &te)?;
            if dropped > 0 {
                writeln!(stderr, "dropped {dropped} test ratings with unseen users or items").map_err(io_err)?;
            }
            set
        }
    };
    let problem = CompletionProblem::for_ratings(&set, o.epsilon, lambda)?;
    let eval = CompletionEval::new(problem, &set, rank);
    let theta0 = initial_factor(&problem, derive_seed(o.seed(), &[TAG_INIT]));
    let rho = o.resolve_rho(&choice, || {
        completion_auto_rho(&problem, &theta0, derive_seed(o.seed(), &[TAG_INTERVAL]))
    })?;
    let dist: DegreeDistribution = choice.build(n, rho)?;
    let mut rec = Recorder::new(o.timing);
    let res = recorded(&mut rec, |t| Ok(eval.test_rmse(t)), |cb| {
        completion_train(&eval, dist, &settings.opt, &theta0, cb)
    })?;
    rec.write(o, stdout)?;
    if let Some(path) = &o.model {
        let mut w = io::BufWriter::new(create(path)?);
        write_matrix(&res.completed, &mut w).and_then(|_| w.flush()).map_err(io_err)?;
    }
    writeln!(
        stderr,
        "{}: {} users x {} items, epsilon {}, eval every {} iterations",
        settings.opt.name(),
        problem.rows,
        problem.cols,
        fmt_f(problem.epsilon),
        settings.eval_every
    )
    .map_err(io_err)?;
    writeln!(
        stderr,
        "test RMSE {} (initial {}), train RMSE {}, objective {}, matvecs {}",
        fmt_f(res.test_rmse),
        fmt_f(res.initial_test_rmse),
        fmt_f(res.train_rmse),
        fmt_f(res.objective),
        res.matvecs
    )
    .map_err(io_err)?;
    Ok(())
}

fn parse_theta(s: &str) -> Result<[f64; 3]> {
    let v = s
        .split(',')
        .map(|t| parse_value::<f64>("theta", t))
        .collect::<Result<Vec<f64>>>()?;
    match v.as_slice() {
        [a, b, c] if v.iter().all(|x| *x > 0.0 && x.is_finite()) => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!("--theta needs three positive values, got '{s}'"))),
    }
}

fn cmd_gp_train(o: &Opts, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let path = o.train.as_deref().ok_or_else(|| Error::Config("gp-train needs --train".into()))?;
    let theta0 = parse_theta(o.theta.as_deref().unwrap_or("1,1,1"))?;
    let choice = o.dist_choice("opt")?;
    let n = o.positive("N", o.n.unwrap_or(60))?;
    let settings = train_settings(o, 0.002, 0.002, 4)?;
    o.rho_value()?;
    let gp = load_gp_data(path, theta0)?;
    let rho = o.resolve_rho(&choice, || {
        SpectralFunction::Log.auto_rho(kernel_interval(&gp, &theta0, derive_seed(o.seed(), &[TAG_INTERVAL]))?)
    })?;
    let dist = choice.build(n, rho)?;
    let mut rec = Recorder::new(o.timing);
    let nll = |phi: &[f64]| gp_negloglik_at(&gp, &[phi[0].exp(), phi[1].exp(), phi[2].exp()]);
    let res = recorded(&mut rec, nll, |cb| gp_train(&gp, dist, &settings.opt, cb))?;
    rec.write(o, stdout)?;
    if let Some(mp) = &o.model {
        let mut w = io::BufWriter::new(create(mp)?);
        writeln!(w, "theta1,theta2,theta3,nll")
            .and_then(|_| {
                writeln!(
                    w,
                    "{},{},{},{}",
                    fmt_f(res.theta[0]),
                    fmt_f(res.theta[1]),
                    fmt_f(res.theta[2]),
                    fmt_f(res.nll)
                )
            })
            .and_then(|_| w.flush())
            .map_err(io_err)?;
    }
    writeln!(
        stderr,
        "{}: theta = ({}, {}, {}), NLL {}, matvecs {}",
        settings.opt.name(),
        fmt_f(res.theta[0]),
        fmt_f(res.theta[1]),
        fmt_f(res.theta[2]),
        fmt_f(res.nll),
        res.matvecs
    )
    .map_err(io_err)?;
    Ok(())
}
