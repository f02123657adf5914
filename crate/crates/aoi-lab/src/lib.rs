//! Planning library for AoI-minimal UAV data-collection tours over clustered
//! sensor networks.
//!
//! A single rotary-wing UAV departs from a depot, visits one hovering point
//! inside each cluster's service disk, collects the buffered status packets of
//! every sensor in that cluster from the cluster head, and returns.  The
//! quantity being minimised is the *total age of information* (AoI): the sum,
//! over every packet, of the time between its generation and the tour's end.
//!
//! The crate is organised as a pipeline:
//!
//! * [`scenario`] — problem instances (cluster layout, radio/rotor parameter
//!   sets) and the candidate hovering-point grids carved out of each service
//!   disk.
//! * [`channel`] — probabilistic line-of-sight air-to-ground link budget and
//!   the maximum service radius that still meets an SNR threshold.
//! * [`kinematics`] — flight/hover durations and rotary-wing propulsion
//!   energy.
//! * [`aoi`] — the objective: per-node and total AoI of a concrete tour.
//! * [`router`] — hovering-point selection for a fixed visiting order: a
//!   layered search graph, weighted A*, an exact dynamic program, and a
//!   brute-force global optimum for small instances.
//! * [`numerics`] — a minimal reverse-mode autodiff tape, Adam, and a binary
//!   checkpoint container.
//! * [`policy`] — an attention-based sequence model that proposes visiting
//!   orders (greedy / sampling / beam decoding).
//! * [`training`] — policy-gradient training of the policy against a greedy
//!   rollout baseline.
//! * [`baselines`] — simulated annealing, a genetic algorithm, nearest
//!   neighbour and random baselines.
//! * [`harness`] — batch experiment drivers shared by the CLI: scenario
//!   generation, training, evaluation sweeps and result tables.

pub mod aoi;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod geom;
pub mod harness;
pub mod kinematics;
pub mod numerics;
pub mod policy;
pub mod router;
pub mod scenario;
pub mod training;

pub use aoi::{AoiReport, Tour};
pub use baselines::{GaConfig, SaConfig};
pub use error::{Error, Result};
pub use geom::Point3;
pub use harness::{PlotAxis, ResultRow, RunSpec, SolverChoice};
pub use kinematics::TimeEnergyLedger;
pub use policy::{DecodedOrder, ModelConfig, PolicyParams, SampleSelection};
pub use router::SearchResult;
pub use scenario::{CandidateGrid, EnvParams, GroundCluster, Scenario, UavParams};
pub use training::{TrainConfig, TrainOutcome, Trainer};
