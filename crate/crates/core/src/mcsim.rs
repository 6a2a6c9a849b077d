//! Exact continuous-time simulation of the n-vertex forest-fire chain.
//!
//! Edges arrive between every unordered pair of distinct vertices at rate `1/n`,
//! so the pair clock runs at `(n−1)/2`. A pair inside one cluster is a rejected
//! internal edge; any other pair merges two clusters, which reproduces the
//! coagulation rates `V_i(V_j − j·1{i=j}) / ((1+1{i=j}) n)` exactly. Lightning
//! hits each vertex at rate `λ`, giving a burn clock of `λn`; a hit shatters the
//! struck cluster into singletons, and hits on singletons are no-ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::cluster::{ClusterState, Slot};
use crate::error::{Error, Result};
use crate::model::{
    reconstruct_masses, record_times, EvolutionTrace, FlowRecord, Regime, RegimeSpec, Sample,
    SizeDistribution,
};

/// RNG used for all finite-n runs.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Clock rates of the chain in a given state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    /// Rate of drawing an unordered pair of distinct vertices, `(n−1)/2`.
    pub pair_rate: f64,
    /// Rate of lightning hits, `λn`.
    pub burn_rate: f64,
    /// Pair rate after removing internal edges: `(n² − Σ_k k V_k) / (2n)`.
    pub effective_coagulation_rate: f64,
}

impl Rates {
    pub fn total(&self) -> f64 {
        self.pair_rate + self.burn_rate
    }
}

pub fn total_rates(state: &ClusterState, lambda: f64) -> Rates {
    let n = state.n() as f64;
    let nn = (state.n() as u128) * (state.n() as u128);
    let distinct = (nn - state.same_cluster_pairs() as u128) as f64;
    Rates {
        pair_rate: (n - 1.0) / 2.0,
        burn_rate: lambda * n,
        effective_coagulation_rate: distinct / (2.0 * n),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Clusters in slots `a` (size `size_a`) and `b` (size `size_b`) merged into slot `a`.
    Coagulate { a: Slot, b: Slot, size_a: usize, size_b: usize },
    /// Lightning struck the cluster in `slot`; sizes above 1 shatter into singletons.
    Burn { slot: Slot, size: usize },
    /// Both endpoints of the arriving edge already share a cluster.
    RejectedInternalEdge,
}

impl EventKind {
    /// True for events that leave the configuration unchanged.
    pub fn is_noop(&self) -> bool {
        matches!(self, EventKind::RejectedInternalEdge | EventKind::Burn { size: 1, .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    /// Exponential waiting time preceding the event.
    pub dt: f64,
}

/// Draws the waiting time to the next clock ring.
pub fn waiting_time<R: Rng + ?Sized>(rates: &Rates, rng: &mut R) -> f64 {
    let total = rates.total();
    if total <= 0.0 {
        return f64::INFINITY;
    }
    let e: f64 = Exp1.sample(rng);
    e / total
}

/// Chooses and applies the event at a clock ring, updating the flow counters.
pub fn fire<R: Rng + ?Sized>(
    state: &mut ClusterState,
    flow: &mut FlowRecord,
    rates: &Rates,
    rng: &mut R,
) -> Result<EventKind> {
    let n = state.n();
    let total = rates.total();
    let is_pair = rng.random::<f64>() * total < rates.pair_rate;
    if is_pair {
        let u = rng.random_range(0..n);
        let mut w = rng.random_range(0..n - 1);
        if w >= u {
            w += 1;
        }
        let a = state.cluster_of_vertex(u);
        let b = state.cluster_of_vertex(w);
        if a == b {
            return Ok(EventKind::RejectedInternalEdge);
        }
        let size_a = state.size(a);
        let size_b = state.size(b);
        if size_a == 0 || size_b == 0 {
            return Err(Error::StateCorruption("sampled an empty slot".into()));
        }
        state.merge(a, b);
        flow.record_merge(size_a, size_b);
        Ok(EventKind::Coagulate { a, b, size_a, size_b })
    } else {
        let u = rng.random_range(0..n);
        let slot = state.cluster_of_vertex(u);
        let size = state.shatter(slot);
        if size == 0 {
            return Err(Error::StateCorruption("sampled an empty slot".into()));
        }
        flow.record_burn(size);
        Ok(EventKind::Burn { slot, size })
    }
}

/// One jump of the chain: exponential waiting time, then the event.
pub fn step<R: Rng + ?Sized>(
    state: &mut ClusterState,
    flow: &mut FlowRecord,
    lambda: f64,
    rng: &mut R,
) -> Result<Event> {
    let rates = total_rates(state, lambda);
    let dt = waiting_time(&rates, rng);
    let kind = fire(state, flow, &rates, rng)?;
    Ok(Event { kind, dt })
}

/// Which flow snapshots to keep in the trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowSnapshots {
    All,
    Final,
    None,
}

#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    pub flow_snapshots: FlowSnapshots,
    /// Check the flow identity against the live state at every snapshot.
    pub verify_flow: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { flow_snapshots: FlowSnapshots::All, verify_flow: true }
    }
}

/// Runs the chain from `n` singletons.
pub fn simulate(spec: &RegimeSpec) -> Result<EvolutionTrace<f64>> {
    simulate_with(spec, None, SimOptions::default())
}

/// Runs the chain from an optional initial configuration.
///
/// Snapshots use the last state strictly before each record time; the final
/// snapshot is taken at exactly `T`.
pub fn simulate_with(
    spec: &RegimeSpec,
    initial: Option<ClusterState>,
    opts: SimOptions,
) -> Result<EvolutionTrace<f64>> {
    simulate_on_grid(spec, initial, opts, &record_times(spec.horizon, spec.record_every))
}

/// Like [`simulate_with`], with snapshots at the given strictly increasing
/// times instead of the spec's regular grid.
pub fn simulate_on_grid(
    spec: &RegimeSpec,
    initial: Option<ClusterState>,
    opts: SimOptions,
    grid: &[f64],
) -> Result<EvolutionTrace<f64>> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 {
        return Err(Error::config("checkpoints", "record times must be non-negative and strictly increasing"));
    }
    if spec.regime != Regime::FiniteN {
        return Err(Error::config("regime", "simulate needs the finite-n regime"));
    }
    spec.validate()?;
    let n = spec.n.expect("validated");
    let lambda = spec.lambda_value().expect("validated");
    let mut state = match initial {
        Some(s) if s.n() == n => s,
        Some(s) => return Err(Error::config("n", format!("initial state has n = {}, spec has {n}", s.n()))),
        None => ClusterState::monodisperse(n),
    };
    let mut rng = rng_from_seed(spec.seed);
    let mut flow = FlowRecord::new();
    let v0 = state.masses();
    let mut trace = EvolutionTrace::new(spec.clone());

    let mut t = 0.0f64;
    let mut prev: Option<(f64, u64)> = None;
    let mut rates = total_rates(&state, lambda);
    let mut next_event = t + waiting_time(&rates, &mut rng);
    let last_index = grid.len() - 1;

    for (i, &tr) in grid.iter().enumerate() {
        while next_event < tr {
            t = next_event;
            fire(&mut state, &mut flow, &rates, &mut rng)?;
            rates = total_rates(&state, lambda);
            next_event = t + waiting_time(&rates, &mut rng);
        }
        if opts.verify_flow {
            let rebuilt = reconstruct_masses(&v0, &flow, n)?;
            if rebuilt != state.masses() {
                return Err(Error::FlowMismatch { k: 0, reason: format!("flow disagrees with state at t={tr}") });
            }
        }
        let burnt_mass = flow.r_total();
        let phi = prev.map(|(tp, rp)| (burnt_mass - rp) as f64 / n as f64 / (tr - tp));
        prev = Some((tr, burnt_mass));
        let keep_flow = match opts.flow_snapshots {
            FlowSnapshots::All => true,
            FlowSnapshots::Final => i == last_index,
            FlowSnapshots::None => false,
        };
        trace.push(Sample {
            t: tr,
            dist: SizeDistribution::from_masses(&state.masses(), n),
            flow: keep_flow.then(|| flow.clone()),
            burnt: burnt_mass as f64 / n as f64,
            phi,
            max_cluster: state.max_cluster() as f64 / n as f64,
        })?;
    }
    Ok(trace)
}

/// One-line run summary: final moments, largest cluster and burnt mass.
pub fn summary_line(trace: &EvolutionTrace<f64>) -> String {
    let Some(s) = trace.last() else {
        return "empty trace".into();
    };
    format!(
        "t={} m0={:.6} m1={:.6} m2={:.6} max_cluster={:.6} r={:.6} seed={}",
        s.t,
        s.dist.m0(),
        s.dist.m1(),
        s.dist.m2(),
        s.max_cluster,
        s.burnt,
        trace.spec.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LambdaRule;

    #[test]
    fn rates_on_three_singletons() {
        let s = ClusterState::monodisperse(3);
        let r = total_rates(&s, 0.0);
        assert_eq!(r.pair_rate, 1.0);
        assert_eq!(r.effective_coagulation_rate, 1.0);
        assert_eq!(r.burn_rate, 0.0);
    }

    #[test]
    fn single_cluster_cannot_coagulate() {
        let s = ClusterState::from_sizes(7, &[7]).unwrap();
        let r = total_rates(&s, 0.25);
        assert_eq!(r.effective_coagulation_rate, 0.0);
        assert_eq!(r.burn_rate, 0.25 * 7.0);
    }

    #[test]
    fn two_vertices_always_merge() {
        let mut rng = rng_from_seed(3);
        for _ in 0..100 {
            let mut s = ClusterState::monodisperse(2);
            let mut f = FlowRecord::new();
            let ev = step(&mut s, &mut f, 0.0, &mut rng).unwrap();
            assert!(matches!(ev.kind, EventKind::Coagulate { size_a: 1, size_b: 1, .. }));
            assert_eq!(s.masses(), vec![0, 2]);
        }
    }

    #[test]
    fn lone_cluster_only_burns() {
        let mut rng = rng_from_seed(5);
        let mut s = ClusterState::from_sizes(5, &[5]).unwrap();
        let mut f = FlowRecord::new();
        let ev = loop {
            let ev = step(&mut s, &mut f, 1.0, &mut rng).unwrap();
            if !ev.kind.is_noop() {
                break ev;
            }
        };
        assert!(matches!(ev.kind, EventKind::Burn { size: 5, .. }));
        assert_eq!(s.masses(), vec![5]);
        assert_eq!(f.r(5), 5);
    }

    #[test]
    fn zero_horizon_gives_initial_state() {
        let spec = RegimeSpec::finite_n(10_000, LambdaRule::Fixed(0.3), 0.0, 0.1, 1);
        let tr = simulate(&spec).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr.samples()[0].dist, SizeDistribution::monodisperse(1));
        assert!(tr.samples()[0].flow.as_ref().unwrap().is_empty());
    }

    #[test]
    fn runs_are_reproducible() {
        let spec = RegimeSpec::finite_n(2_000, LambdaRule::Exponent(0.5), 2.0, 0.5, 77);
        assert_eq!(simulate(&spec).unwrap(), simulate(&spec).unwrap());
    }

    #[test]
    fn rejects_other_regimes() {
        let spec = RegimeSpec::ode(Regime::RegimeIII, 10, 1.0, 0.1, 0.1);
        assert!(simulate(&spec).is_err());
    }
}
