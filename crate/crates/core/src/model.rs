//! Domain types shared by the simulator, the solvers and the analysis layer,
//! plus exact reconstruction of a finite-n state from its coagulation/burning flow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Slack allowed on `Σ v_k + θ ≤ 1` before a distribution is rejected.
/// Single precision gets `√K` rounding units per entry on top.
pub const EPS_MASS: f64 = 1e-9;

fn mass_slack<S: Scalar>(len: usize) -> S {
    S::lit(EPS_MASS).max(S::epsilon() * S::of(4 + len).sqrt() * S::lit(4.0))
}

/// Mass fractions `v_k` of vertices in clusters of size `k = 1..=K`, plus gel mass `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeDistribution<S> {
    v: Vec<S>,
    theta: S,
}

impl<S: Scalar> SizeDistribution<S> {
    /// Builds a distribution from dense fractions (index 0 holds `v_1`) and an explicit gel mass.
    pub fn new(v: Vec<S>, theta: S) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::InvalidDistribution("empty size vector".into()));
        }
        if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < S::zero()) {
            return Err(Error::InvalidDistribution(format!("v_{} = {}", i + 1, x)));
        }
        if !theta.is_finite() || theta < S::zero() {
            return Err(Error::InvalidDistribution(format!("theta = {theta}")));
        }
        let total: S = v.iter().copied().sum::<S>() + theta;
        if total > S::one() + mass_slack::<S>(v.len()) {
            return Err(Error::InvalidDistribution(format!("total mass {total} exceeds 1")));
        }
        Ok(Self { v, theta })
    }

    /// Gel mass is whatever is missing from the finite sizes: `θ = max(0, 1 − Σ v_k)`.
    pub fn with_gel(v: Vec<S>) -> Result<Self> {
        let total: S = v.iter().copied().sum();
        let theta = (S::one() - total).max(S::zero());
        Self::new(v, theta)
    }

    /// All mass in singletons, truncated at `k_max`.
    pub fn monodisperse(k_max: usize) -> Self {
        let mut v = vec![S::zero(); k_max.max(1)];
        v[0] = S::one();
        Self { v, theta: S::zero() }
    }

    /// Finite-n state from exact vertex masses `V_k` (index 0 holds `V_1`).
    pub fn from_masses(masses: &[u64], n: u64) -> Self {
        let scale = S::one() / S::lit(n as f64);
        let mut v: Vec<S> = masses.iter().map(|&m| S::lit(m as f64) * scale).collect();
        if v.is_empty() {
            v.push(S::zero());
        }
        Self { v, theta: S::zero() }
    }

    /// Truncation index `K`.
    pub fn truncation(&self) -> usize {
        self.v.len()
    }

    /// `v_k` for 1-based `k`; zero outside `1..=K`.
    pub fn get(&self, k: usize) -> S {
        if k == 0 {
            return S::zero();
        }
        self.v.get(k - 1).copied().unwrap_or_else(S::zero)
    }

    pub fn as_slice(&self) -> &[S] {
        &self.v
    }

    pub fn into_vec(self) -> Vec<S> {
        self.v
    }

    pub fn theta(&self) -> S {
        self.theta
    }

    /// `Σ_{k≤K} v_k`.
    pub fn total(&self) -> S {
        self.v.iter().copied().sum()
    }

    /// `Σ k^p v_k` over the stored sizes.
    pub fn moment(&self, p: i32) -> S {
        self.v
            .iter()
            .enumerate()
            .map(|(i, &x)| S::of(i + 1).powi(p) * x)
            .sum()
    }

    pub fn m0(&self) -> S {
        self.total()
    }

    pub fn m1(&self) -> S {
        self.moment(1)
    }

    pub fn m2(&self) -> S {
        self.moment(2)
    }

    pub fn m3(&self) -> S {
        self.moment(3)
    }

    /// Suffix sums: element `k-1` is `Σ_{k≤l≤K} v_l`.
    pub fn tail_sums(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.v.len()];
        let mut acc = S::zero();
        for i in (0..self.v.len()).rev() {
            acc += self.v[i];
            out[i] = acc;
        }
        out
    }

    /// `Σ_{l≥k} v_l` within the truncation.
    pub fn tail_sum(&self, k: usize) -> S {
        self.v.iter().skip(k.saturating_sub(1)).copied().sum()
    }

    pub fn is_conservative(&self, tol: S) -> bool {
        self.theta <= tol && (self.total() - S::one()).abs() <= tol
    }

    /// Largest `k` with `v_k > 0`, or 0 for the zero vector.
    pub fn support_max(&self) -> usize {
        self.v.iter().rposition(|&x| x > S::zero()).map_or(0, |i| i + 1)
    }
}

/// Cumulative coagulation and burning counters of a finite-n run, as raw integers.
///
/// `q` is keyed by `(min(k,l), max(k,l))` and already carries the factor
/// `1 + 1{k=l}`, so a single `(k,k)` merge adds 2. `r` holds `k` times the number
/// of burnt `k`-clusters; singleton burns are never recorded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlowRecord {
    q: BTreeMap<(usize, usize), u64>,
    r: BTreeMap<usize, u64>,
}

impl FlowRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_merge(&mut self, a: usize, b: usize) {
        let key = (a.min(b), a.max(b));
        *self.q.entry(key).or_insert(0) += if a == b { 2 } else { 1 };
    }

    pub fn record_burn(&mut self, k: usize) {
        if k >= 2 {
            *self.r.entry(k).or_insert(0) += k as u64;
        }
    }

    /// Inserts a raw counter value; used by trace readers.
    pub fn set_q(&mut self, k: usize, l: usize, value: u64) {
        if value > 0 {
            self.q.insert((k.min(l), k.max(l)), value);
        }
    }

    pub fn set_r(&mut self, k: usize, value: u64) {
        if value > 0 {
            self.r.insert(k, value);
        }
    }

    /// Symmetric `Q_{k,l}`.
    pub fn q(&self, k: usize, l: usize) -> u64 {
        self.q.get(&(k.min(l), k.max(l))).copied().unwrap_or(0)
    }

    pub fn r(&self, k: usize) -> u64 {
        self.r.get(&k).copied().unwrap_or(0)
    }

    /// Stored `(k, l, Q_{k,l})` with `k ≤ l`, in key order.
    pub fn q_entries(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.q.iter().map(|(&(k, l), &c)| (k, l, c))
    }

    pub fn r_entries(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.r.iter().map(|(&k, &c)| (k, c))
    }

    /// `Q_k = Σ_l Q_{k,l}`.
    pub fn q_k(&self, k: usize) -> u64 {
        self.q
            .iter()
            .filter(|((a, b), _)| *a == k || *b == k)
            .map(|(_, &c)| c)
            .sum()
    }

    /// `Σ_{k,l} Q_{k,l}` over ordered pairs; equals twice the number of merges.
    pub fn q_total(&self) -> u64 {
        self.q
            .iter()
            .map(|(&(a, b), &c)| if a == b { c } else { 2 * c })
            .sum()
    }

    /// Total burnt mass `R = Σ_k R_k`.
    pub fn r_total(&self) -> u64 {
        self.r.values().sum()
    }

    pub fn merge_count(&self) -> u64 {
        self.q_total() / 2
    }

    /// True when every counter of `self` is at most the matching counter of `later`.
    pub fn is_dominated_by(&self, later: &FlowRecord) -> bool {
        self.q.iter().all(|(key, &c)| later.q.get(key).is_some_and(|&d| d >= c))
            && self.r.iter().all(|(key, &c)| later.r.get(key).is_some_and(|&d| d >= c))
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty() && self.r.is_empty()
    }

    /// Largest cluster size any counter refers to (including merge products).
    fn max_index(&self) -> usize {
        let qmax = self.q.keys().map(|&(a, b)| a + b).max().unwrap_or(0);
        let rmax = self.r.keys().copied().max().unwrap_or(0);
        qmax.max(rmax)
    }
}

/// Exact vertex masses implied by an initial configuration and a flow:
/// `V_k(t) = V_k(0) + (k/2) Σ_{l<k} Q_{l,k−l} − k Q_k − R_k + 1{k=1} R`.
///
/// `v0` holds `V_k(0)` at index `k-1`. Fails if any reconstructed mass is negative,
/// not a multiple of `k`, or the total differs from `n`.
pub fn reconstruct_masses(v0: &[u64], flow: &FlowRecord, n: u64) -> Result<Vec<u64>> {
    let len = v0.len().max(flow.max_index()).max(1);
    let mut acc: Vec<i128> = vec![0; len];
    for (i, &m) in v0.iter().enumerate() {
        acc[i] = m as i128;
    }
    for (&(a, b), &c) in &flow.q {
        let c = c as i128;
        // Ordered-pair gain into a+b: both (a,b) and (b,a) for a≠b, single (a,a) otherwise.
        let s = a + b;
        let ordered = if a == b { c } else { 2 * c };
        acc[s - 1] += (s as i128) * ordered / 2;
        acc[a - 1] -= (a as i128) * c;
        // Q_{a,a} enters Q_a once.
        if a != b {
            acc[b - 1] -= (b as i128) * c;
        }
    }
    let mut burnt: i128 = 0;
    for (&k, &c) in &flow.r {
        if k == 1 {
            return Err(Error::FlowMismatch { k, reason: "nonzero r_1".into() });
        }
        acc[k - 1] -= c as i128;
        burnt += c as i128;
    }
    acc[0] += burnt;

    let mut out = Vec::with_capacity(len);
    let mut total: i128 = 0;
    for (i, &m) in acc.iter().enumerate() {
        let k = i + 1;
        if m < 0 {
            return Err(Error::FlowMismatch { k, reason: format!("negative mass {m}") });
        }
        if m % k as i128 != 0 {
            return Err(Error::FlowMismatch { k, reason: format!("mass {m} not a multiple of {k}") });
        }
        total += m;
        out.push(m as u64);
    }
    if total != n as i128 {
        return Err(Error::FlowMismatch { k: 0, reason: format!("total mass {total} != n = {n}") });
    }
    while out.len() > 1 && out.last() == Some(&0) {
        out.pop();
    }
    Ok(out)
}

/// Lattice masses `n·v_k` of a finite-n distribution; fails if any is not an integer.
pub fn lattice_masses<S: Scalar>(v: &SizeDistribution<S>, n: u64) -> Result<Vec<u64>> {
    let nf = n as f64;
    v.as_slice()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let m = x.as_f64() * nf;
            let r = m.round();
            if (m - r).abs() > 1e-6 || r < 0.0 {
                Err(Error::FlowMismatch { k: i + 1, reason: format!("n·v_k = {m} is not an integer") })
            } else {
                Ok(r as u64)
            }
        })
        .collect()
}

/// Size distribution generated by `flow` from `v0` on `n` vertices.
pub fn reconstruct_from_flow<S: Scalar>(
    v0: &SizeDistribution<S>,
    flow: &FlowRecord,
    n: u64,
) -> Result<SizeDistribution<S>> {
    let masses = lattice_masses(v0, n)?;
    let out = reconstruct_masses(&masses, flow, n)?;
    Ok(SizeDistribution::from_masses(&out, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    FiniteN,
    PureSmoluchowski,
    RegimeII,
    RegimeIII,
    RegimeIV,
}

/// Lightning rate per vertex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    Fixed(f64),
    /// `λ(n) = n^{-a}`.
    Exponent(f64),
}

impl LambdaRule {
    pub fn at(&self, n: u64) -> f64 {
        match *self {
            LambdaRule::Fixed(l) => l,
            LambdaRule::Exponent(a) => (n as f64).powf(-a),
        }
    }
}

/// Which system to run and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    /// Vertex count (finite-n runs only).
    pub n: Option<u64>,
    pub lambda: Option<LambdaRule>,
    /// Truncation `K` (ODE regimes).
    pub k_max: usize,
    /// Horizon `T` in units of the edge-arrival clock.
    pub horizon: f64,
    pub dt: f64,
    #[serde(with = "seed_repr")]
    pub seed: u64,
    pub record_every: f64,
}

impl RegimeSpec {
    pub fn finite_n(n: u64, lambda: LambdaRule, horizon: f64, record_every: f64, seed: u64) -> Self {
        Self {
            regime: Regime::FiniteN,
            n: Some(n),
            lambda: Some(lambda),
            k_max: 2,
            horizon,
            dt: 1.0,
            seed,
            record_every,
        }
    }

    pub fn ode(regime: Regime, k_max: usize, horizon: f64, dt: f64, record_every: f64) -> Self {
        Self { regime, n: None, lambda: None, k_max, horizon, dt, seed: 0, record_every }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(LambdaRule::Fixed(lambda));
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Lightning rate at this spec's vertex count (or the fixed constant for ODE regimes).
    pub fn lambda_value(&self) -> Option<f64> {
        let rule = self.lambda?;
        match (rule, self.n) {
            (LambdaRule::Fixed(l), _) => Some(l),
            (rule, Some(n)) => Some(rule.at(n)),
            (LambdaRule::Exponent(_), None) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::config("T", format!("horizon must be finite and ≥ 0, got {}", self.horizon)));
        }
        if !(self.record_every.is_finite() && self.record_every > 0.0) {
            return Err(Error::config("record_every", format!("must be > 0, got {}", self.record_every)));
        }
        if let Some(LambdaRule::Exponent(a)) = self.lambda {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::config("lambda-exp", format!("exponent a must lie in (0,1), got {a}")));
            }
        }
        if let Some(LambdaRule::Fixed(l)) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::config("lambda", format!("must be finite and ≥ 0, got {l}")));
            }
        }
        match self.regime {
            Regime::FiniteN => {
                match self.n {
                    Some(n) if n >= 2 => {}
                    _ => return Err(Error::config("n", "finite-n runs need n ≥ 2")),
                }
                if self.lambda.is_none() {
                    return Err(Error::config("lambda", "finite-n runs need a lightning rule"));
                }
            }
            ode => {
                if self.k_max < 2 {
                    return Err(Error::config("K", format!("truncation must be ≥ 2, got {}", self.k_max)));
                }
                if !(self.dt.is_finite() && self.dt > 0.0) {
                    return Err(Error::config("dt", format!("must be > 0, got {}", self.dt)));
                }
                if matches!(ode, Regime::RegimeII | Regime::RegimeIV) {
                    let l = match self.lambda {
                        Some(LambdaRule::Fixed(l)) if l > 0.0 => l,
                        _ => return Err(Error::config("lambda", "regimes II and IV need a fixed λ > 0")),
                    };
                    if ode == Regime::RegimeII && l * self.dt > 0.01 {
                        return Err(Error::config("dt", format!("regime II needs λ·dt ≤ 0.01, got {}", l * self.dt)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeds as TOML values: integers while they fit in `i64`, decimal strings above.
pub mod seed_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<Z: Serializer>(seed: &u64, s: Z) -> Result<Z::Ok, Z::Error> {
        if *seed <= i64::MAX as u64 {
            s.serialize_u64(*seed)
        } else {
            s.serialize_str(&seed.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(v),
            Repr::Str(s) => s.trim().parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One time-stamped snapshot of an evolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub t: S,
    pub dist: SizeDistribution<S>,
    /// Exact counters, present for finite-n runs that keep flow snapshots.
    pub flow: Option<FlowRecord>,
    /// Cumulative burnt mass `r(t)` per vertex (for ODE regimes, `∫ φ`).
    pub burnt: S,
    /// Burning flux estimate at `t`.
    pub phi: Option<S>,
    /// Largest cluster as a fraction of `n`; the gel mass for ODE regimes.
    pub max_cluster: S,
}

/// Ordered list of snapshots produced by one run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionTrace<S> {
    pub spec: RegimeSpec,
    samples: Vec<Sample<S>>,
}

impl<S: Scalar> EvolutionTrace<S> {
    pub fn new(spec: RegimeSpec) -> Self {
        Self { spec, samples: Vec::new() }
    }

    /// Appends a snapshot; times must be strictly increasing.
    pub fn push(&mut self, sample: Sample<S>) -> Result<()> {
        if let Some(last) = self.samples.last() {
            if !(sample.t > last.t) {
                return Err(Error::Format(format!(
                    "sample time {} does not follow {}",
                    sample.t, last.t
                )));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[Sample<S>] {
        &self.samples
    }

    pub fn first(&self) -> Option<&Sample<S>> {
        self.samples.first()
    }

    pub fn last(&self) -> Option<&Sample<S>> {
        self.samples.last()
    }

    /// Last sample at or before `t`.
    pub fn at(&self, t: S) -> Option<&Sample<S>> {
        let tol = S::lit(1e-9) * (S::one() + t.abs());
        self.samples.iter().take_while(|s| s.t <= t + tol).last()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sampling grid `0, h, 2h, …` strictly below `horizon`, followed by `horizon` itself.
pub fn record_times(horizon: f64, every: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    if horizon <= 0.0 {
        return out;
    }
    let mut i = 1u64;
    loop {
        let t = i as f64 * every;
        if t >= horizon - 1e-12 * horizon.max(1.0) {
            break;
        }
        out.push(t);
        i += 1;
    }
    out.push(horizon);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_leaves_state_unchanged() {
        let v0 = SizeDistribution::<f64>::from_masses(&[6, 2, 3], 11);
        let out = reconstruct_from_flow(&v0, &FlowRecord::new(), 11).unwrap();
        assert_eq!(out, v0);
    }

    #[test]
    fn single_singleton_merge_on_four_vertices() {
        let mut flow = FlowRecord::new();
        flow.record_merge(1, 1);
        assert_eq!(flow.q(1, 1), 2);
        assert_eq!(reconstruct_masses(&[4], &flow, 4).unwrap(), vec![2, 2]);
    }

    #[test]
    fn merge_then_burn_returns_to_monodisperse() {
        let mut flow = FlowRecord::new();
        flow.record_merge(1, 1);
        flow.record_burn(2);
        assert_eq!(flow.r(2), 2);
        assert_eq!(reconstruct_masses(&[4], &flow, 4).unwrap(), vec![4]);
    }

    #[test]
    fn unequal_merge_is_symmetric() {
        let mut flow = FlowRecord::new();
        flow.record_merge(1, 1);
        flow.record_merge(2, 1);
        assert_eq!(flow.q(1, 2), flow.q(2, 1));
        assert_eq!(flow.q_k(1), 3);
        assert_eq!(flow.q_total(), 4);
        assert_eq!(reconstruct_masses(&[5], &flow, 5).unwrap(), vec![2, 0, 3]);
    }

    #[test]
    fn singleton_burns_are_not_recorded() {
        let mut flow = FlowRecord::new();
        flow.record_burn(1);
        assert!(flow.is_empty());
    }

    #[test]
    fn inconsistent_flow_is_rejected() {
        let mut flow = FlowRecord::new();
        flow.record_burn(3);
        assert!(matches!(
            reconstruct_masses(&[4], &flow, 4),
            Err(Error::FlowMismatch { k: 3, .. })
        ));
    }

    #[test]
    fn moments_and_tails() {
        let v = SizeDistribution::new(vec![0.5, 0.5], 0.0).unwrap();
        assert_eq!(v.m1(), 1.5);
        assert_eq!(v.m2(), 0.5 + 2.0);
        assert_eq!(v.tail_sums(), vec![1.0, 0.5]);
        assert_eq!(v.tail_sum(2), 0.5);
        assert_eq!(v.get(7), 0.0);
    }

    #[test]
    fn invalid_distributions() {
        assert!(SizeDistribution::new(vec![-0.1f64, 0.2], 0.0).is_err());
        assert!(SizeDistribution::new(vec![0.7f64, 0.4], 0.0).is_err());
        assert!(SizeDistribution::new(vec![0.5f64], -0.1).is_err());
        assert!(SizeDistribution::<f64>::new(vec![], 0.0).is_err());
        let g = SizeDistribution::with_gel(vec![0.25f64, 0.25]).unwrap();
        assert_eq!(g.theta(), 0.5);
    }

    #[test]
    fn spec_validation() {
        let bad = RegimeSpec::finite_n(1000, LambdaRule::Exponent(1.5), 1.0, 0.1, 0);
        assert!(matches!(bad.validate(), Err(Error::Config { field: "lambda-exp", .. })));
        let ok = RegimeSpec::finite_n(1000, LambdaRule::Exponent(0.5), 1.0, 0.1, 0);
        ok.validate().unwrap();
        assert!((ok.lambda_value().unwrap() - 1000f64.powf(-0.5)).abs() < 1e-15);
        assert!(RegimeSpec::ode(Regime::RegimeIII, 1, 1.0, 0.1, 0.1).validate().is_err());
        assert!(RegimeSpec::ode(Regime::RegimeIII, 10, 1.0, 0.0, 0.1).validate().is_err());
        assert!(RegimeSpec::ode(Regime::RegimeII, 10, 1.0, 0.1, 0.1).with_lambda(1.0).validate().is_err());
        RegimeSpec::ode(Regime::RegimeII, 10, 1.0, 0.01, 0.1).with_lambda(1.0).validate().unwrap();
    }

    #[test]
    fn grid_ends_exactly_at_horizon() {
        assert_eq!(record_times(0.0, 0.1), vec![0.0]);
        let g = record_times(1.0, 0.25);
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = record_times(1.0, 0.3);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(g.len(), 5);
    }

    #[test]
    fn trace_rejects_non_increasing_times() {
        let mut tr = EvolutionTrace::<f64>::new(RegimeSpec::ode(Regime::PureSmoluchowski, 4, 1.0, 0.1, 0.5));
        let s = Sample {
            t: 0.0,
            dist: SizeDistribution::monodisperse(4),
            flow: None,
            burnt: 0.0,
            phi: None,
            max_cluster: 0.0,
        };
        tr.push(s.clone()).unwrap();
        assert!(tr.push(s).is_err());
    }
}
