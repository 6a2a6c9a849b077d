//! Argument parsing and dispatch for the `ffrg` binary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ffrg::compare::{convergence_experiment, ExperimentConfig};
use ffrg::genfunc::{default_window, e_diagnostic, fit_tail, log_grid, TailMode};
use ffrg::mcsim::{simulate_with, summary_line, FlowSnapshots, SimOptions};
use ffrg::smol::{integrate, PhiSeries, SolverOptions};
use ffrg::trace_io::{self, FORMAT_VERSION};
use ffrg::{Error, ErrorClass, EvolutionTrace, LambdaRule, Regime, RegimeSpec, SizeDistribution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Numerical => EXIT_NUMERICAL,
        ErrorClass::Io => EXIT_IO,
    }
}

#[derive(Parser, Debug)]
#[command(name = "ffrg", version, about = "Mean-field forest-fire random graph: simulate, solve, analyze, compare")]
#[command(after_help = "Time is measured on the edge-arrival clock (each vertex pair connects at rate 1/n).\n\
Set FFRG_WORKERS to bound the worker pool used by `compare`.")]
pub struct Cli {
    /// Log verbosity: -v for info, -vv for debug
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Exact Monte Carlo run of the n-vertex chain
    Simulate(SimulateArgs),
    /// Integrate a limiting Smoluchowski system
    Solve(SolveArgs),
    /// Tail fits, burning flux and generating-function diagnostics on a trace
    Analyze(AnalyzeArgs),
    /// Monte Carlo against the limit over a sweep of n and seeds
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("lightning").required(true).args(["lambda", "lambda_exp"]))]
pub struct SimulateArgs {
    /// Number of vertices (count, ≥ 2)
    #[arg(long)]
    pub n: u64,
    /// Fixed lightning rate per vertex (1/time, ≥ 0)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Lightning exponent a in λ(n) = n^(−a) (dimensionless, in (0,1))
    #[arg(long = "lambda-exp")]
    pub lambda_exp: Option<f64>,
    /// Horizon (time units)
    #[arg(long = "T")]
    pub horizon: f64,
    /// RNG seed (u64); drawn from system entropy and printed when omitted
    #[arg(long)]
    pub seed: Option<u64>,
    /// Spacing between snapshots (time units); defaults to T/100
    #[arg(long = "record-every")]
    pub record_every: Option<f64>,
    /// Output trace directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep the exact flow counters only in the final snapshot (smaller output)
    #[arg(long)]
    pub final_flow_only: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegimeArg {
    /// No lightning (regime I)
    Pure,
    /// Fixed λ, only the gel burns (regime II)
    Ii,
    /// Critical, λ(n) → 0 slower than 1/n (regime III)
    Iii,
    /// Fixed λ > 0, every cluster burns (regime IV)
    Iv,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Pure => Regime::PureSmoluchowski,
            RegimeArg::Ii => Regime::RegimeII,
            RegimeArg::Iii => Regime::RegimeIII,
            RegimeArg::Iv => Regime::RegimeIV,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntegratorArg {
    Rosenbrock4,
    Rk4,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    /// Truncation: largest tracked cluster size (count)
    #[arg(long = "K")]
    pub k_max: usize,
    /// Maximum step size (time units)
    #[arg(long)]
    pub dt: f64,
    /// Horizon (time units)
    #[arg(long = "T")]
    pub horizon: f64,
    /// Lightning rate for regimes ii and iv (1/time, > 0)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// RNG seed for regime ii gel burns (u64); drawn and printed when omitted
    #[arg(long)]
    pub seed: Option<u64>,
    /// Spacing between recorded samples (time units); defaults to T/100
    #[arg(long = "record-every")]
    pub record_every: Option<f64>,
    /// Initial data: `monodisperse`, a trace directory (its last sample), or a `k,v` CSV file
    #[arg(long, default_value = "monodisperse")]
    pub init: String,
    /// Time integrator
    #[arg(long, value_enum, default_value = "rosenbrock4")]
    pub integrator: IntegratorArg,
    /// Output trace directory; `phi.csv` is written inside it for regimes with a burning flux
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Input trace directory
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Sample time to analyze (time units); defaults to the last sample
    #[arg(long)]
    pub t: Option<f64>,
    /// Fit a power law to the tail sums of the selected sample
    #[arg(long)]
    pub fit_tail: bool,
    /// Fit window as `kmin,kmax` (cluster sizes); defaults to [K^0.3, K^0.6]
    #[arg(long, value_parser = parse_window)]
    pub window: Option<(usize, usize)>,
    /// Pin the tail exponent at −1/2 instead of fitting it
    #[arg(long)]
    pub pinned: bool,
    /// Write `t, phi_flux, phi_tailfit` for every sample to this CSV file
    #[arg(long)]
    pub phi: Option<PathBuf>,
    /// E-diagnostic on a log grid `lo,hi,count` of x in (0,1]
    #[arg(long = "e-diagnostic", value_parser = parse_grid)]
    pub e_diagnostic: Option<(f64, f64, usize)>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Experiment configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the report table and per-row traces
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (count); FFRG_WORKERS overrides
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected kmin,kmax")?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad kmin {a:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad kmax {b:?}"))?;
    if a == 0 || b <= a {
        return Err("need 1 ≤ kmin < kmax".into());
    }
    Ok((a, b))
}

fn parse_grid(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [lo, hi, count] = parts[..] else {
        return Err("expected lo,hi,count".into());
    };
    let lo: f64 = lo.parse().map_err(|_| format!("bad lo {lo:?}"))?;
    let hi: f64 = hi.parse().map_err(|_| format!("bad hi {hi:?}"))?;
    let count: usize = count.parse().map_err(|_| format!("bad count {count:?}"))?;
    if !(lo > 0.0 && lo < hi && hi <= 1.0 && count >= 2) {
        return Err("need 0 < lo < hi ≤ 1 and count ≥ 2".into());
    }
    Ok((lo, hi, count))
}

/// What a run resolved to after parsing: the command, its spec, and where output goes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: &'static str,
    pub spec: Option<RegimeSpec>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub verbosity: u8,
    pub format: &'static str,
}

/// A seed, and whether it had to be drawn.
fn resolve_seed(seed: Option<u64>) -> (u64, bool) {
    match seed {
        Some(s) => (s, false),
        None => (rand::random::<u64>(), true),
    }
}

impl RunConfig {
    pub fn from_cli(cli: &Cli) -> ffrg::Result<Self> {
        let base = |command| RunConfig {
            command,
            spec: None,
            input: None,
            output: None,
            verbosity: cli.verbose,
            format: FORMAT_VERSION,
        };
        Ok(match &cli.command {
            Command::Simulate(a) => {
                let rule = match (a.lambda, a.lambda_exp) {
                    (Some(l), None) => LambdaRule::Fixed(l),
                    (None, Some(e)) => LambdaRule::Exponent(e),
                    _ => return Err(Error::config("lambda", "give exactly one of --lambda and --lambda-exp")),
                };
                let every = a.record_every.unwrap_or(a.horizon / 100.0);
                let spec = RegimeSpec::finite_n(a.n, rule, a.horizon, every, a.seed.unwrap_or(0));
                spec.validate()?;
                RunConfig { spec: Some(spec), output: a.out.clone(), ..base("simulate") }
            }
            Command::Solve(a) => {
                let every = a.record_every.unwrap_or(a.horizon / 100.0);
                let mut spec = RegimeSpec::ode(a.regime.into(), a.k_max, a.horizon, a.dt, every);
                if let Some(l) = a.lambda {
                    if a.regime == RegimeArg::Pure || a.regime == RegimeArg::Iii {
                        return Err(Error::config("lambda", "regimes pure and iii take no lightning rate"));
                    }
                    spec = spec.with_lambda(l);
                }
                spec.seed = a.seed.unwrap_or(0);
                spec.validate()?;
                RunConfig { spec: Some(spec), output: a.out.clone(), ..base("solve") }
            }
            Command::Analyze(a) => RunConfig { input: Some(a.input.clone()), ..base("analyze") },
            Command::Compare(a) => {
                RunConfig { input: Some(a.config.clone()), output: Some(a.out.clone()), ..base("compare") }
            }
        })
    }
}

/// Parses `argv` (program name first), runs the command, and returns the exit status.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim_start_matches("error: ").trim());
            return EXIT_CONFIG;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();

    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(e.class())
        }
    }
}

/// Runs a parsed command and returns what it prints on success.
pub fn run(cli: &Cli) -> ffrg::Result<String> {
    let config = RunConfig::from_cli(cli)?;
    log::info!("{} ({})", config.command, config.format);
    match &cli.command {
        Command::Simulate(a) => simulate_cmd(a, config),
        Command::Solve(a) => solve_cmd(a, config),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    }
}

fn simulate_cmd(a: &SimulateArgs, config: RunConfig) -> ffrg::Result<String> {
    let (seed, drawn) = resolve_seed(a.seed);
    if drawn {
        eprintln!("seed: {seed} (drawn from system entropy)");
    }
    let spec = config.spec.expect("simulate has a spec").with_seed(seed);
    let snapshots = if a.final_flow_only { FlowSnapshots::Final } else { FlowSnapshots::All };
    let trace = simulate_with(&spec, None, SimOptions { flow_snapshots: snapshots, verify_flow: true })?;
    if let Some(dir) = &config.output {
        trace_io::write_trace(dir, &trace)?;
    }
    Ok(format!("{}\n", summary_line(&trace)))
}

fn load_initial(init: &str, k_max: usize) -> ffrg::Result<SizeDistribution<f64>> {
    if init == "monodisperse" {
        return Ok(SizeDistribution::monodisperse(k_max));
    }
    let path = Path::new(init);
    if path.is_dir() {
        let trace: EvolutionTrace<f64> = trace_io::read_trace(path)?;
        return trace.last().map(|s| s.dist.clone()).ok_or(Error::Format("initial trace has no samples".into()));
    }
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("init: {} does not exist", path.display()),
        )));
    }
    trace_io::read_distribution(path)
}

fn phi_tables(trace: &EvolutionTrace<f64>, window: (usize, usize)) -> (PhiSeries<f64>, PhiSeries<f64>) {
    let flux = PhiSeries::from_flux(trace);
    let mut tail = PhiSeries::from_tail_fit(trace, window);
    let keep: Vec<bool> = tail.times.iter().map(|t| flux.times.contains(t)).collect();
    let mut it = keep.iter();
    tail.values.retain(|_| *it.next().unwrap());
    tail.times.retain(|t| flux.times.contains(t));
    (flux, tail)
}

fn solve_cmd(a: &SolveArgs, config: RunConfig) -> ffrg::Result<String> {
    let mut spec = config.spec.expect("solve has a spec");
    if a.regime == RegimeArg::Ii {
        let (seed, drawn) = resolve_seed(a.seed);
        if drawn {
            eprintln!("seed: {seed} (drawn from system entropy)");
        }
        spec.seed = seed;
    }
    let v0 = load_initial(&a.init, a.k_max)?;
    let integrator = match a.integrator {
        IntegratorArg::Rosenbrock4 => ffrg::smol::Integrator::Rosenbrock4,
        IntegratorArg::Rk4 => ffrg::smol::Integrator::Rk4,
    };
    let opts = SolverOptions { integrator, ..SolverOptions::default() };
    let trace = integrate(&spec, &v0, opts)?;
    if let Some(dir) = &config.output {
        trace_io::write_trace(dir, &trace)?;
        if a.regime != RegimeArg::Pure {
            let (flux, tail) = phi_tables(&trace, default_window(a.k_max));
            trace_io::write_phi_table(&dir.join("phi.csv"), &flux, &tail)?;
        }
    }
    let s = trace.last().expect("trace has samples");
    let mut out = format!(
        "t={} m0={:.6} m1={:.6} theta={:.6} r={:.6}",
        s.t,
        s.dist.m0(),
        s.dist.m1(),
        s.dist.theta(),
        s.burnt
    );
    if let Some(phi) = s.phi {
        let _ = write!(out, " phi={phi:.6}");
    }
    let _ = writeln!(out, " seed={}", spec.seed);
    Ok(out)
}

fn analyze_cmd(a: &AnalyzeArgs) -> ffrg::Result<String> {
    let trace: EvolutionTrace<f64> = trace_io::read_trace(&a.input)?;
    let sample = match a.t {
        Some(t) => trace.at(t).ok_or(Error::config("t", format!("no sample at or before t={t}")))?,
        None => trace.last().ok_or(Error::Format("trace has no samples".into()))?,
    };
    let k_max = sample.dist.truncation();
    let window = a.window.unwrap_or_else(|| default_window(k_max));
    let mut out = String::new();
    let d = &sample.dist;
    let _ = writeln!(
        out,
        "t={} m0={:.6} m1={:.6} m2={:.6} theta={:.6} max_cluster={:.6} r={:.6}",
        sample.t,
        d.m0(),
        d.m1(),
        d.m2(),
        d.theta(),
        sample.max_cluster,
        sample.burnt
    );
    if a.fit_tail {
        let mode = if a.pinned { TailMode::PinnedHalf } else { TailMode::Free };
        let fit = fit_tail(d, window.0, window.1, mode)?;
        let _ = write!(
            out,
            "tail window=[{},{}] b={:.6} A={:.6} residual={:.3e} curvature={:.4} exponential={}",
            fit.k_min, fit.k_max, fit.exponent, fit.amplitude, fit.residual, fit.curvature, fit.exponential_curvature
        );
        if let Some(phi) = fit.phi {
            let _ = write!(out, " phi={phi:.6}");
        }
        out.push('\n');
    }
    if let Some((lo, hi, count)) = a.e_diagnostic {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for x in log_grid(lo, hi, count) {
            let e = e_diagnostic(d, x)?;
            min = min.min(e.e);
            max = max.max(e.e);
            let _ = writeln!(out, "E x={x:.6e} E={:.6} bracket={:.6}", e.e, e.bracket);
        }
        let _ = writeln!(out, "E range=[{min:.6},{max:.6}]");
    }
    if let Some(path) = &a.phi {
        let (flux, tail) = phi_tables(&trace, window);
        trace_io::write_phi_table(path, &flux, &tail)?;
    }
    Ok(out)
}

fn compare_cmd(a: &CompareArgs) -> ffrg::Result<String> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::config("config", e.message().replace('\n', " ")))?;
    if a.workers.is_some() {
        config.workers = a.workers;
    }
    let traces = a.out.join("traces");
    std::fs::create_dir_all(&traces)?;
    let report = convergence_experiment(&config, Some(&traces))?;
    trace_io::write_atomic(&a.out.join("report.csv"), report.to_table().as_bytes())?;
    let mut out = String::new();
    for s in &report.per_n {
        let _ = writeln!(out, "n={} mean={:.6e} max={:.6e} rows={}", s.n, s.mean, s.max, s.ok_rows);
    }
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(out, "row n={} seed={} failed: {}", r.n, r.seed, r.error.as_deref().unwrap_or(""));
    }
    if let Some(m) = report.monotone {
        let _ = writeln!(out, "monotone_in_n={m}");
    }
    Ok(out)
}
