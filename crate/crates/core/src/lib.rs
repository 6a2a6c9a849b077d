//! Laboratory for the mean-field forest-fire random graph.
//!
//! * [`mcsim`] simulates the exact `n`-vertex chain (coagulation by random
//!   edges, shattering of struck clusters) with integer flow bookkeeping.
//! * [`smol`] integrates the limiting Smoluchowski-type systems of the four
//!   lightning regimes.
//! * [`genfunc`] holds the closed forms (Borel, stationary laws) and the
//!   generating-function and tail-fit diagnostics.
//! * [`compare`] runs Monte Carlo against the limits.

pub mod cluster;
pub mod compare;
pub mod error;
pub mod fenwick;
pub mod genfunc;
pub mod mcsim;
pub mod model;
pub mod scalar;
pub mod smol;
pub mod trace_io;

pub use error::{Error, ErrorClass, Result};
pub use model::{EvolutionTrace, FlowRecord, LambdaRule, Regime, RegimeSpec, Sample, SizeDistribution};
pub use scalar::Scalar;

pub type SizeDistributionF64 = SizeDistribution<f64>;
pub type SizeDistributionF32 = SizeDistribution<f32>;
pub type EvolutionTraceF64 = EvolutionTrace<f64>;
pub type EvolutionTraceF32 = EvolutionTrace<f32>;
pub type SampleF64 = Sample<f64>;
pub type PhiSeriesF64 = smol::PhiSeries<f64>;
pub type TailFitF64 = genfunc::TailFit<f64>;
