//! Shared fixtures for the criterion benchmarks.

use aoi_lab::channel;
use aoi_lab::scenario::{generate_scenario_with, CandidateGrid, EnvParams, Scenario, UavParams};

/// A seeded instance with its candidate hovering-point grids.
pub fn instance(seed: u64, m: usize, l_sub: usize) -> (Scenario, Vec<CandidateGrid>) {
    let env = EnvParams {
        l_sub,
        ..EnvParams::default()
    };
    let scenario = generate_scenario_with(
        seed,
        m,
        3000.0,
        &[5, 10, 15, 20, 25, 30],
        env,
        UavParams::default(),
    )
    .expect("valid benchmark instance");
    let radius = channel::service_radius(&scenario.env).expect("feasible radius");
    let grids = scenario.build_grids(radius).expect("grids cover the disks");
    (scenario, grids)
}
