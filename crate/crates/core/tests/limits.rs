use ffrg::genfunc::{borel, fit_tail, stationary_critical, stationary_subcritical, TailMode};
use ffrg::mcsim::{simulate_with, FlowSnapshots, SimOptions};
use ffrg::model::reconstruct_from_flow;
use ffrg::smol::{gelation_time, integrate, SolverOptions};
use ffrg::{LambdaRule, Regime, RegimeSpec, SizeDistribution, SizeDistributionF32};

#[test]
fn pure_coagulation_follows_borel_before_gelation() {
    let spec = RegimeSpec::ode(Regime::PureSmoluchowski, 400, 0.8, 0.01, 0.8);
    let trace = integrate(&spec, &SizeDistribution::<f64>::monodisperse(400), SolverOptions::default()).unwrap();
    let last = trace.last().unwrap();
    for k in 1..=30 {
        let exact: f64 = borel(0.8, k);
        assert!((last.dist.get(k) - exact).abs() < 1e-6, "k = {k}");
    }
}

#[test]
fn single_precision_runs_the_same_system() {
    let spec = RegimeSpec::ode(Regime::PureSmoluchowski, 200, 0.5, 0.01, 0.5);
    let v0 = SizeDistributionF32::monodisperse(200);
    assert_eq!(gelation_time(&v0).unwrap(), 1.0f32);
    let trace = integrate(&spec, &v0, SolverOptions::default()).unwrap();
    let last = trace.last().unwrap();
    assert!((last.dist.get(1) - borel::<f32>(0.5, 1)).abs() < 1e-4);
    assert!((last.dist.total() - 1.0).abs() < 1e-4);
}

#[test]
fn critical_system_settles_on_stationary_law() {
    let spec = RegimeSpec::ode(Regime::RegimeIII, 4_000, 30.0, 0.02, 30.0);
    let trace = integrate(&spec, &SizeDistribution::<f64>::monodisperse(4_000), SolverOptions::default()).unwrap();
    let last = trace.last().unwrap();
    for k in 1..=10 {
        let exact: f64 = stationary_critical(k);
        assert!(((last.dist.get(k) - exact) / exact).abs() < 0.02, "k = {k}");
    }
    let fit = fit_tail(&last.dist, 10, 200, TailMode::Free).unwrap();
    assert!((fit.exponent + 0.5).abs() < 0.1, "{fit:?}");
}

#[test]
fn subcritical_system_settles_on_stationary_law() {
    let lambda = 0.5;
    let spec = RegimeSpec::ode(Regime::RegimeIV, 200, 30.0, 0.01, 30.0).with_lambda(lambda);
    let trace = integrate(&spec, &SizeDistribution::<f64>::monodisperse(200), SolverOptions::default()).unwrap();
    let last = trace.last().unwrap();
    for k in 1..=10 {
        let exact: f64 = stationary_subcritical(k, lambda);
        assert!((last.dist.get(k) - exact).abs() < 1e-4, "k = {k}");
    }
}

#[test]
fn counters_rebuild_every_snapshot() {
    let n = 3_000;
    let spec = RegimeSpec::finite_n(n, LambdaRule::Fixed(0.05), 3.0, 0.25, 9);
    let opts = SimOptions { flow_snapshots: FlowSnapshots::All, verify_flow: false };
    let trace = simulate_with(&spec, None, opts).unwrap();
    let v0 = &trace.samples()[0].dist;
    for s in trace.samples() {
        let rebuilt = reconstruct_from_flow(v0, s.flow.as_ref().unwrap(), n).unwrap();
        assert_eq!(rebuilt.as_slice(), s.dist.as_slice(), "t = {}", s.t);
    }
}
