//! Monte Carlo against the limiting systems: convergence sweeps in `n`,
//! separation of the lightning regimes, and burnt-mass sanity checks.
//!
//! Tolerances used on these reports are empirical (a few standard deviations
//! of the run-to-run spread at the stated `n`); the theory gives no rates.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genfunc::{borel, er_giant_density, fit_tail, stationary_subcritical, TailFit, TailMode};
use crate::mcsim::{simulate_on_grid, simulate_with, FlowSnapshots, SimOptions};
use crate::model::{EvolutionTrace, LambdaRule, Regime, RegimeSpec, SizeDistribution};
use crate::scalar::Scalar;
use crate::smol::{integrate_on_grid, SolverOptions};
use crate::trace_io;

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "FFRG_WORKERS";

/// First line of every written report.
pub const REPORT_HEADER: &str =
    "tolerances applied to these numbers are empirical (3-5 sigma of run-to-run spread), not derived rates";

/// `max_{k ≤ k_report} |a_k − b_k|`, reading entries past a truncation as zero.
pub fn distance<S: Scalar>(a: &SizeDistribution<S>, b: &SizeDistribution<S>, k_report: usize) -> S {
    (1..=k_report).map(|k| (a.get(k) - b.get(k)).abs()).fold(S::zero(), S::max)
}

/// Worker count from [`WORKERS_ENV`], falling back to `default`.
pub fn workers_from_env(default: Option<usize>) -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&w| w > 0)
        .or(default)
}

/// Deterministic limit the sweep is measured against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    /// Closed-form Borel law (no lightning).
    Borel,
    /// Numerical solution of an ODE regime from monodisperse data.
    Ode {
        regime: Regime,
        k_max: usize,
        dt: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<f64>,
    },
}

impl Reference {
    /// The limit matching a lightning rule: Borel for `λ = 0`, the critical
    /// system for `λ(n) = n^{−a}`, the subcritical system for a fixed `λ > 0`.
    pub fn for_rule(rule: LambdaRule, k_max: usize, dt: f64) -> Self {
        match rule {
            LambdaRule::Fixed(0.0) => Reference::Borel,
            LambdaRule::Fixed(l) => Reference::Ode { regime: Regime::RegimeIV, k_max, dt, lambda: Some(l) },
            LambdaRule::Exponent(_) => Reference::Ode { regime: Regime::RegimeIII, k_max, dt, lambda: None },
        }
    }

    /// Reference distributions at each checkpoint.
    pub fn evaluate(&self, checkpoints: &[f64], k_report: usize) -> Result<Vec<SizeDistribution<f64>>> {
        match *self {
            Reference::Borel => checkpoints
                .iter()
                .map(|&t| SizeDistribution::with_gel((1..=k_report).map(|k| borel(t, k)).collect()))
                .collect(),
            Reference::Ode { regime, k_max, dt, lambda } => {
                let horizon = checkpoints.last().copied().unwrap_or(0.0);
                let mut spec = RegimeSpec::ode(regime, k_max, horizon, dt, horizon.max(dt));
                if let Some(l) = lambda {
                    spec = spec.with_lambda(l);
                }
                let mut grid = vec![0.0];
                grid.extend(checkpoints.iter().copied().filter(|&t| t > 0.0));
                let trace = integrate_on_grid(&spec, &SizeDistribution::monodisperse(k_max), SolverOptions::default(), &grid)?;
                checkpoints
                    .iter()
                    .map(|&t| trace.at(t).map(|s| s.dist.clone()).ok_or(Error::config("checkpoints", "not on the reference grid")))
                    .collect()
            }
        }
    }
}

/// A convergence sweep over vertex counts and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub ns: Vec<u64>,
    pub lambda: LambdaRule,
    /// Horizon `T`; the last checkpoint must not exceed it.
    pub horizon: f64,
    pub checkpoints: Vec<f64>,
    /// Seeds per `n`; row `i` of an `n` uses `base_seed + i`.
    pub seeds: u64,
    #[serde(default, with = "crate::model::seed_repr")]
    pub base_seed: u64,
    #[serde(default = "default_k_report")]
    pub k_report: usize,
    pub reference: Reference,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_k_report() -> usize {
    10
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() {
            return Err(Error::config("ns", "at least one vertex count is required"));
        }
        if self.seeds == 0 {
            return Err(Error::config("seeds", "at least one seed per n is required"));
        }
        if self.k_report == 0 {
            return Err(Error::config("k_report", "must be ≥ 1"));
        }
        if self.checkpoints.is_empty() || self.checkpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("checkpoints", "need a strictly increasing, non-empty list"));
        }
        if self.checkpoints[0] < 0.0 || *self.checkpoints.last().unwrap() > self.horizon {
            return Err(Error::config("checkpoints", "must lie in [0, T]"));
        }
        for &n in &self.ns {
            RegimeSpec::finite_n(n, self.lambda, self.horizon, self.horizon.max(1e-9), 0).validate()?;
        }
        Ok(())
    }
}

/// One simulation of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub n: u64,
    pub seed: u64,
    /// `sup_{k ≤ k_report} |v_{n,k}(t) − v_k(t)|` per checkpoint.
    pub distances: Vec<f64>,
    /// Total burnt mass `r(T)` per vertex.
    pub burnt: f64,
    /// Scaled coagulation count `q(T) = 2·#merges / n`.
    pub q: f64,
    pub trace_path: Option<PathBuf>,
    pub error: Option<String>,
}

impl ReportRow {
    /// Largest distance over checkpoints.
    pub fn sup_distance(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NSummary {
    pub n: u64,
    pub mean: f64,
    pub max: f64,
    pub ok_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub per_n: Vec<NSummary>,
    /// Mean distance decreases in `n` with at most one adjacent inversion;
    /// `None` when only one `n` was run.
    pub monotone: Option<bool>,
    /// Least-squares slope of `ln mean` against `ln n`; `None` with fewer than two `n`.
    pub rate_exponent: Option<f64>,
}

impl ConvergenceReport {
    fn assemble(config: ExperimentConfig, rows: Vec<ReportRow>) -> Self {
        let mut ns = config.ns.clone();
        ns.sort_unstable();
        ns.dedup();
        let per_n: Vec<NSummary> = ns
            .iter()
            .map(|&n| {
                let d: Vec<f64> = rows.iter().filter(|r| r.n == n && r.error.is_none()).map(ReportRow::sup_distance).collect();
                let mean = if d.is_empty() { f64::NAN } else { d.iter().sum::<f64>() / d.len() as f64 };
                NSummary { n, mean, max: d.iter().copied().fold(f64::NAN, f64::max), ok_rows: d.len() }
            })
            .collect();
        let monotone = (per_n.len() > 1).then(|| {
            let inversions = per_n.windows(2).filter(|w| !(w[1].mean < w[0].mean)).count();
            inversions <= 1 && per_n.iter().all(|s| s.ok_rows > 0)
        });
        let pts: Vec<(f64, f64)> = per_n
            .iter()
            .filter(|s| s.mean > 0.0)
            .map(|s| ((s.n as f64).ln(), s.mean.ln()))
            .collect();
        let rate_exponent = (pts.len() > 1).then(|| {
            let m = pts.len() as f64;
            let xm = pts.iter().map(|p| p.0).sum::<f64>() / m;
            let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
            let sxy: f64 = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
            sxy / sxx
        });
        Self { config, rows, per_n, monotone, rate_exponent }
    }

    /// Mean sup-distance at vertex count `n`.
    pub fn mean_at(&self, n: u64) -> Option<f64> {
        self.per_n.iter().find(|s| s.n == n).map(|s| s.mean)
    }

    /// The report as a table: a comment header, then one row per simulation.
    pub fn to_table(&self) -> String {
        let mut out = format!("# {REPORT_HEADER}\n");
        out += &format!(
            "# lambda={:?} T={} checkpoints={:?} k_report={} reference={:?}\n",
            self.config.lambda, self.config.horizon, self.config.checkpoints, self.config.k_report, self.config.reference
        );
        for s in &self.per_n {
            out += &format!("# n={} mean={:.6e} max={:.6e} rows={}\n", s.n, s.mean, s.max, s.ok_rows);
        }
        if let Some(m) = self.monotone {
            out += &format!("# monotone_in_n={m}\n");
        }
        if let Some(b) = self.rate_exponent {
            out += &format!("# measured_rate_exponent={b:.4}\n");
        }
        out += "n,seed,sup_distance,burnt,q,trace,error\n";
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                r.n,
                r.seed,
                trace_io::fmt_float(r.sup_distance()),
                trace_io::fmt_float(r.burnt),
                trace_io::fmt_float(r.q),
                r.trace_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            );
        }
        out
    }
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w);
    }
    b.build().map_err(|e| Error::config("workers", e.to_string()))
}

/// Runs the sweep. The reference is computed first; a failing row is recorded
/// in the report without stopping the others. With `out_dir`, each row's trace
/// is written under it.
pub fn convergence_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ConvergenceReport> {
    config.validate()?;
    let reference = config.reference.evaluate(&config.checkpoints, config.k_report)?;
    let jobs: Vec<(u64, u64)> =
        config.ns.iter().flat_map(|&n| (0..config.seeds).map(move |i| (n, config.base_seed + i))).collect();
    let workers = workers_from_env(config.workers);
    let run = |&(n, seed): &(u64, u64)| -> ReportRow {
        let mut row = ReportRow { n, seed, distances: Vec::new(), burnt: 0.0, q: 0.0, trace_path: None, error: None };
        match run_row(config, &reference, n, seed, out_dir) {
            Ok((d, burnt, q, path)) => {
                row.distances = d;
                row.burnt = burnt;
                row.q = q;
                row.trace_path = path;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    };
    let rows: Vec<ReportRow> = pool(workers)?.install(|| jobs.par_iter().map(run).collect());
    Ok(ConvergenceReport::assemble(config.clone(), rows))
}

type RowOutcome = (Vec<f64>, f64, f64, Option<PathBuf>);

fn run_row(
    config: &ExperimentConfig,
    reference: &[SizeDistribution<f64>],
    n: u64,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<RowOutcome> {
    let spec = RegimeSpec::finite_n(n, config.lambda, config.horizon, config.horizon.max(1e-9), seed);
    let mut grid = vec![0.0];
    grid.extend(config.checkpoints.iter().copied().filter(|&t| t > 0.0));
    if *grid.last().unwrap() < config.horizon {
        grid.push(config.horizon);
    }
    let opts = SimOptions { flow_snapshots: FlowSnapshots::Final, verify_flow: true };
    let trace = simulate_on_grid(&spec, None, opts, &grid)?;
    let distances = config
        .checkpoints
        .iter()
        .zip(reference)
        .map(|(&t, r)| {
            let s = trace.at(t).ok_or(Error::config("checkpoints", "missing snapshot"))?;
            Ok(distance(&s.dist, r, config.k_report))
        })
        .collect::<Result<Vec<f64>>>()?;
    let last = trace.last().expect("trace has a final sample");
    let q = last.flow.as_ref().map(|f| 2.0 * f.merge_count() as f64 / n as f64).unwrap_or(f64::NAN);
    let path = match out_dir {
        Some(dir) => {
            let p = dir.join(format!("n{n}_seed{seed}"));
            trace_io::write_trace(&p, &trace)?;
            Some(p)
        }
        None => None,
    };
    Ok((distances, last.burnt, q, path))
}

/// Checks `q(T)/T ≤ 1 + 5/√n` and `r(T) ≤ 2 + q(T)` on a finite-n trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSanity {
    pub q: f64,
    pub r: f64,
    pub q_over_t: f64,
    pub q_bound: f64,
    pub ok: bool,
}

pub fn flow_sanity(trace: &EvolutionTrace<f64>) -> Option<FlowSanity> {
    let n = trace.spec.n? as f64;
    let last = trace.last()?;
    let flow = last.flow.as_ref()?;
    let q = 2.0 * flow.merge_count() as f64 / n;
    let r = flow.r_total() as f64 / n;
    let t = last.t;
    let q_bound = 1.0 + 5.0 / n.sqrt();
    let q_over_t = if t > 0.0 { q / t } else { 0.0 };
    Some(FlowSanity { q, r, q_over_t, q_bound, ok: q_over_t <= q_bound && r <= 2.0 + q })
}

/// Settings for [`regime_separation`].
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationConfig {
    pub n: u64,
    /// Time of the critical and no-lightning readouts.
    pub horizon: f64,
    pub subcritical_lambda: f64,
    /// Time of the subcritical readout.
    pub subcritical_horizon: f64,
    /// Exponent `a` of the critical rule `λ = n^{−a}`.
    pub critical_exponent: f64,
    pub seed: u64,
    /// Tail-fit window on the Monte Carlo distribution.
    pub window: (usize, usize),
    pub workers: Option<usize>,
}

impl SeparationConfig {
    pub fn new(n: u64, horizon: f64) -> Self {
        Self {
            n,
            horizon,
            subcritical_lambda: 0.5,
            subcritical_horizon: 10.0,
            critical_exponent: 0.5,
            seed: 0,
            window: (10, 200),
            workers: None,
        }
    }
}

/// Readout of one lightning regime.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeOutcome {
    pub label: &'static str,
    pub lambda: f64,
    pub t: f64,
    pub max_cluster: f64,
    pub burnt: f64,
    pub v1: f64,
    /// Free-exponent tail fit; `None` when the window has no mass.
    pub tail: Option<TailFit<f64>>,
    pub sanity: Option<FlowSanity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationSummary {
    pub no_lightning: RegimeOutcome,
    pub critical: RegimeOutcome,
    pub subcritical: RegimeOutcome,
    /// Erdős–Rényi giant density at the readout time.
    pub giant_oracle: f64,
    /// Stationary subcritical `v_1`.
    pub subcritical_v1_oracle: f64,
}

/// Three runs at `λ ∈ {0, n^{−a}, λ_sub}` on the same `n`.
pub fn regime_separation(cfg: &SeparationConfig) -> Result<SeparationSummary> {
    let runs = [
        ("no-lightning", LambdaRule::Fixed(0.0), cfg.horizon, cfg.seed),
        ("critical", LambdaRule::Exponent(cfg.critical_exponent), cfg.horizon, cfg.seed + 1),
        ("subcritical", LambdaRule::Fixed(cfg.subcritical_lambda), cfg.subcritical_horizon, cfg.seed + 2),
    ];
    let one = |&(label, rule, t, seed): &(&'static str, LambdaRule, f64, u64)| -> Result<RegimeOutcome> {
        let spec = RegimeSpec::finite_n(cfg.n, rule, t, t.max(1e-9), seed);
        let trace = simulate_with(&spec, None, SimOptions { flow_snapshots: FlowSnapshots::Final, verify_flow: true })?;
        let last = trace.last().expect("final sample");
        let (lo, hi) = cfg.window;
        Ok(RegimeOutcome {
            label,
            lambda: rule.at(cfg.n),
            t,
            max_cluster: last.max_cluster,
            burnt: last.burnt,
            v1: last.dist.get(1),
            tail: fit_tail(&last.dist, lo, hi, TailMode::Free).ok(),
            sanity: flow_sanity(&trace),
        })
    };
    let mut out: Vec<RegimeOutcome> = pool(workers_from_env(cfg.workers))?
        .install(|| runs.par_iter().map(one).collect::<Result<Vec<_>>>())?;
    let subcritical = out.pop().expect("three runs");
    let critical = out.pop().expect("three runs");
    let no_lightning = out.pop().expect("three runs");
    Ok(SeparationSummary {
        no_lightning,
        critical,
        subcritical,
        giant_oracle: er_giant_density(cfg.horizon),
        subcritical_v1_oracle: stationary_subcritical(1, cfg.subcritical_lambda),
    })
}
