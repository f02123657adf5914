//! UAV timing and energy: flight legs, hover/data-collection durations,
//! rotary-wing propulsion power, and per-tour time/energy ledgers.

use crate::aoi::Tour;
use crate::channel::{self, LinkGeometry};
use crate::error::Result;
use crate::geom::Point3;
use crate::scenario::{CandidateGrid, EnvParams, Scenario, UavParams};

/// Straight-line flight time between two points at cruise speed, s.
pub fn fly_time(a: Point3, b: Point3, uav: &UavParams) -> f64 {
    a.dist(&b) / uav.speed
}

/// Rotary-wing propulsion power at forward speed `v`, W.
///
/// Three components: blade profile power (grows with v²), induced power
/// (falls with speed), and parasite drag (grows with v³).  The induced term
/// is `p1·(sqrt(1+b²) − b)^½` with `b = v²/(2v0²)`; for small rotor induced
/// velocity `b` is enormous at cruise speed and the textbook form cancels
/// catastrophically, so it is evaluated as the algebraically identical
/// `p1 / sqrt(b + sqrt(1+b²))`.
pub fn propulsion_power(v: f64, uav: &UavParams) -> f64 {
    let blade = uav.p0 * (1.0 + 3.0 * v * v / (uav.u_tip * uav.u_tip));
    let b = v * v / (2.0 * uav.v0 * uav.v0);
    let induced = uav.p1 / (b + (1.0 + b * b).sqrt()).sqrt();
    let drag = 0.5 * uav.d0 * uav.rho * uav.s0 * uav.delta * v * v * v;
    blade + induced + drag
}

/// Time spent hovering over one cluster, s: the sensors' sequential sampling
/// slots plus the cluster head's uplink of every packet.
pub fn hover_time(n_nodes: u32, rate_bps: f64, env: &EnvParams) -> f64 {
    let n = f64::from(n_nodes);
    n * env.slot_seconds + n * env.packet_bits / rate_bps
}

/// Energy drawn while hovering over one cluster, J: hover propulsion for the
/// full stop plus receiver power during the uplink portion only.
pub fn hover_energy(n_nodes: u32, rate_bps: f64, env: &EnvParams, uav: &UavParams) -> f64 {
    let n = f64::from(n_nodes);
    let uplink = n * env.packet_bits / rate_bps;
    uav.hover_power() * hover_time(n_nodes, rate_bps, env) + uav.p_com * uplink
}

/// Energy of one flight leg at cruise speed, J.
pub fn fly_energy(a: Point3, b: Point3, uav: &UavParams) -> f64 {
    propulsion_power(uav.speed, uav) * fly_time(a, b, uav)
}

/// Per-visit timing of a concrete tour.
#[derive(Debug, Clone, PartialEq)]
pub struct TourTimes {
    /// Hover duration at each visit, in visiting order (length M).
    pub hover: Vec<f64>,
    /// Flight legs in order: start→first stop, stop→stop, last stop→start
    /// (length M+1; index g is the leg leaving visit g, with visit 0 = start).
    pub legs: Vec<f64>,
}

/// Computes hover durations and flight legs for a tour.  Hover time at each
/// stop uses the uplink rate at the chosen hovering point.
pub fn tour_times(tour: &Tour, scenario: &Scenario, grids: &[CandidateGrid]) -> Result<TourTimes> {
    tour.validate(scenario, grids)?;
    let m = tour.order.len();
    let mut hover = Vec::with_capacity(m);
    let mut legs = Vec::with_capacity(m + 1);
    let mut prev = scenario.start;
    for &cluster in &tour.order {
        let p = tour.point_of_cluster(cluster, grids)?;
        legs.push(fly_time(prev, p, &scenario.uav));
        let ch = &scenario.clusters[cluster].ch;
        let geom = LinkGeometry::new(
            crate::geom::Point2::new(p.x, p.y).dist(ch),
            scenario.env.altitude,
        );
        let rate = channel::rate(geom, &scenario.env);
        hover.push(hover_time(scenario.clusters[cluster].node_count, rate, &scenario.env));
        prev = p;
    }
    legs.push(fly_time(prev, scenario.start, &scenario.uav));
    Ok(TourTimes { hover, legs })
}

/// Complete time/energy accounting of a tour, entries in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEnergyLedger {
    /// Flight time per leg, s (length M+1, first entry is start→first stop).
    pub fly_time: Vec<f64>,
    /// Hover time per stop, s (length M).
    pub hover_time: Vec<f64>,
    /// Flight energy per leg, J (length M+1).
    pub fly_energy: Vec<f64>,
    /// Hover + communication energy per stop, J (length M).
    pub hover_energy: Vec<f64>,
    /// Mission energy from the first hovering point onwards, J: all hover
    /// energy plus all flight legs except the outbound start→first-stop leg.
    pub effective_energy: f64,
    /// Whole-mission energy including the first leg, J.
    pub total_energy: f64,
}

impl TimeEnergyLedger {
    /// Builds the ledger for a tour.  Summation follows visiting order so
    /// repeated runs produce bit-identical totals.
    pub fn for_tour(tour: &Tour, scenario: &Scenario, grids: &[CandidateGrid]) -> Result<Self> {
        let times = tour_times(tour, scenario, grids)?;
        let cruise_power = propulsion_power(scenario.uav.speed, &scenario.uav);
        let fly_energy: Vec<f64> = times.legs.iter().map(|t| cruise_power * t).collect();

        let mut hover_energy = Vec::with_capacity(tour.order.len());
        for (i, &cluster) in tour.order.iter().enumerate() {
            let n = f64::from(scenario.clusters[cluster].node_count);
            let uplink = times.hover[i] - n * scenario.env.slot_seconds;
            hover_energy
                .push(scenario.uav.hover_power() * times.hover[i] + scenario.uav.p_com * uplink);
        }

        let mut effective = 0.0;
        for e in &hover_energy {
            effective += e;
        }
        for e in &fly_energy[1..] {
            effective += e;
        }
        let total = effective + fly_energy[0];

        Ok(TimeEnergyLedger {
            fly_time: times.legs,
            hover_time: times.hover,
            fly_energy,
            hover_energy,
            effective_energy: effective,
            total_energy: total,
        })
    }

    /// Total flight time after the first stop, s.
    pub fn fly_time_after_first(&self) -> f64 {
        self.fly_time[1..].iter().sum()
    }

    /// Total hover time, s.
    pub fn total_hover_time(&self) -> f64 {
        self.hover_time.iter().sum()
    }
}

/// Mission energy from the first hovering point to the return, J.
///
/// Summed directly from per-stop and per-leg primitives (independently of
/// [`TimeEnergyLedger`]): every hover energy plus every flight leg except
/// start→first-stop.
pub fn effective_energy(tour: &Tour, scenario: &Scenario, grids: &[CandidateGrid]) -> Result<f64> {
    tour.validate(scenario, grids)?;
    let points = tour.visit_points(scenario, grids)?;
    let mut total = 0.0;
    for (i, &cluster) in tour.order.iter().enumerate() {
        let ch = &scenario.clusters[cluster].ch;
        let geom = LinkGeometry::new(
            crate::geom::Point2::new(points[i].x, points[i].y).dist(ch),
            scenario.env.altitude,
        );
        let rate = channel::rate(geom, &scenario.env);
        total += hover_energy(
            scenario.clusters[cluster].node_count,
            rate,
            &scenario.env,
            &scenario.uav,
        );
    }
    for w in points.windows(2) {
        total += fly_energy(w[0], w[1], &scenario.uav);
    }
    total += fly_energy(*points.last().expect("tour nonempty"), scenario.start, &scenario.uav);
    Ok(total)
}
