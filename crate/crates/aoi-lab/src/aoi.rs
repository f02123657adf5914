//! The objective: age of information of every packet at mission end.
//!
//! Each sensor's packet is timestamped at the start of its sampling slot; its
//! age when the UAV lands is everything that happens afterwards: the rest of
//! the hover at its own cluster, then every later hover and flight leg.  The
//! leg from the start point to the first stop happens *before* any packet
//! exists, so it never ages anything.
//!
//! Two algebraic routes to the total are implemented: the literal double sum
//! over clusters and nodes ([`total_aoi_direct`]), and a regrouped
//! edge-additive form ([`total_aoi`]) in which each hover/leg is weighted by
//! the number of packets already on board — the form the search modules
//! exploit.  Their agreement is enforced by test, not assumed.

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::kinematics::{tour_times, TimeEnergyLedger, TourTimes};
use crate::scenario::{CandidateGrid, Scenario};

/// A complete candidate solution: the order clusters are visited in and the
/// hovering point chosen for each cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tour {
    /// Cluster indices in visiting order (a permutation of `0..M`); the start
    /// point implicitly brackets the sequence on both ends.
    pub order: Vec<usize>,
    /// `point_choice[cluster]` indexes into that cluster's candidate grid.
    pub point_choice: Vec<usize>,
}

impl Tour {
    pub fn new(order: Vec<usize>, point_choice: Vec<usize>) -> Self {
        Tour {
            order,
            point_choice,
        }
    }

    /// Number of clusters visited.
    pub fn m(&self) -> usize {
        self.order.len()
    }

    /// The chosen hovering point of one cluster.
    pub fn point_of_cluster(&self, cluster: usize, grids: &[CandidateGrid]) -> Result<Point3> {
        let choice = *self.point_choice.get(cluster).ok_or_else(|| {
            Error::Index(format!(
                "cluster {cluster} outside tour with {} clusters",
                self.point_choice.len()
            ))
        })?;
        let grid = grids.get(cluster).ok_or_else(|| {
            Error::Index(format!("no candidate grid for cluster {cluster}"))
        })?;
        grid.points.get(choice).copied().ok_or_else(|| {
            Error::Index(format!(
                "point {choice} outside grid of cluster {cluster} ({} points)",
                grid.points.len()
            ))
        })
    }

    /// Chosen hovering points in visiting order.
    pub fn visit_points(
        &self,
        _scenario: &Scenario,
        grids: &[CandidateGrid],
    ) -> Result<Vec<Point3>> {
        self.order
            .iter()
            .map(|&c| self.point_of_cluster(c, grids))
            .collect()
    }

    /// Checks that the order is a permutation of all clusters and every
    /// chosen point exists in its cluster's grid.
    pub fn validate(&self, scenario: &Scenario, grids: &[CandidateGrid]) -> Result<()> {
        let m = scenario.m();
        if self.order.len() != m {
            return Err(Error::contract(format!(
                "tour visits {} clusters, scenario has {m}",
                self.order.len()
            )));
        }
        if self.point_choice.len() != m {
            return Err(Error::contract(format!(
                "tour chooses {} points, scenario has {m} clusters",
                self.point_choice.len()
            )));
        }
        if grids.len() != m {
            return Err(Error::contract(format!(
                "{} candidate grids for {m} clusters",
                grids.len()
            )));
        }
        let mut seen = vec![false; m];
        for &c in &self.order {
            if c >= m {
                return Err(Error::Index(format!("cluster index {c} out of range 0..{m}")));
            }
            if seen[c] {
                return Err(Error::contract(format!("cluster {c} visited twice")));
            }
            seen[c] = true;
        }
        for (cluster, &choice) in self.point_choice.iter().enumerate() {
            if choice >= grids[cluster].points.len() {
                return Err(Error::Index(format!(
                    "point {choice} outside grid of cluster {cluster} ({} points)",
                    grids[cluster].points.len()
                )));
            }
        }
        Ok(())
    }
}

/// Full evaluation of one tour.
#[derive(Debug, Clone, PartialEq)]
pub struct AoiReport {
    /// `per_node_aoi[t-1][n-1]` is the final age of node n's packet in the
    /// cluster visited at step t (both 1-based in the math sense).
    pub per_node_aoi: Vec<Vec<f64>>,
    /// Sum of every packet's age, s.
    pub total_aoi: f64,
    /// Age of the oldest packet: first node served at the first stop, s.
    pub oldest_aoi: f64,
    pub ledger: TimeEnergyLedger,
}

/// Age of a packet generated at `generated_at` when observed at `now`
/// (zero before generation).
pub fn instantaneous_aoi(now: f64, generated_at: f64) -> f64 {
    (now - generated_at).max(0.0)
}

/// Running totals of packets on board: `W[g-1]` is the number of nodes in the
/// first g visited clusters.  While the UAV hovers at stop g or flies leg
/// g→g+1, exactly `W[g-1]` packets are aging — the quantity that makes the
/// objective edge-additive.
pub fn cumulative_weights(order: &[usize], scenario: &Scenario) -> Result<Vec<u64>> {
    let mut weights = Vec::with_capacity(order.len());
    let mut acc = 0u64;
    for &c in order {
        let cl = scenario
            .clusters
            .get(c)
            .ok_or_else(|| Error::Index(format!("cluster index {c} out of range")))?;
        acc += u64::from(cl.node_count);
        weights.push(acc);
    }
    Ok(weights)
}

/// Order-independent constant subtracted by the regrouped objective:
/// `τ·Σ_m N_m(N_m−1)/2` accounts for the staggered packet timestamps inside
/// each cluster.
pub(crate) fn slot_offset(scenario: &Scenario) -> f64 {
    let pairs: u64 = scenario
        .clusters
        .iter()
        .map(|c| {
            let n = u64::from(c.node_count);
            n * (n - 1) / 2
        })
        .sum();
    scenario.env.slot_seconds * pairs as f64
}

fn node_aoi_from_times(
    times: &TourTimes,
    scenario: &Scenario,
    order: &[usize],
    t: usize,
    n: usize,
) -> Result<f64> {
    let m = order.len();
    if t < 1 || t > m {
        return Err(Error::Index(format!("visit step {t} outside 1..={m}")));
    }
    let cluster = order[t - 1];
    let n_t = scenario.clusters[cluster].node_count as usize;
    if n < 1 || n > n_t {
        return Err(Error::Index(format!(
            "node {n} outside 1..={n_t} of cluster {cluster}"
        )));
    }
    let mut acc = 0.0;
    for g in t..=m {
        acc += times.hover[g - 1] + times.legs[g];
    }
    Ok(acc - (n as f64 - 1.0) * scenario.env.slot_seconds)
}

/// Final age of one packet: node `n` (1-based) of the cluster visited at step
/// `t` (1-based).  Everything from that cluster's hover onward ages the
/// packet, minus the head start of later-sampled nodes.
pub fn node_aoi(
    tour: &Tour,
    scenario: &Scenario,
    grids: &[CandidateGrid],
    t: usize,
    n: usize,
) -> Result<f64> {
    let times = tour_times(tour, scenario, grids)?;
    node_aoi_from_times(&times, scenario, &tour.order, t, n)
}

/// Total AoI via the regrouped edge-additive form:
/// `Σ_g W_g·(hover_g + leg_{g→g+1}) − τ·Σ_m N_m(N_m−1)/2`.
pub fn total_aoi(tour: &Tour, scenario: &Scenario, grids: &[CandidateGrid]) -> Result<f64> {
    let times = tour_times(tour, scenario, grids)?;
    Ok(total_aoi_from_times(&times, scenario, &tour.order))
}

/// The regrouped total from precomputed times (used by the search modules).
pub(crate) fn total_aoi_from_times(
    times: &TourTimes,
    scenario: &Scenario,
    order: &[usize],
) -> f64 {
    let weights = cumulative_weights(order, scenario).expect("order validated");
    let mut acc = 0.0;
    for g in 1..=order.len() {
        acc += weights[g - 1] as f64 * (times.hover[g - 1] + times.legs[g]);
    }
    acc - slot_offset(scenario)
}

/// Total AoI via the literal double sum over clusters and nodes — the
/// independent cross-check route for the regrouped form.
pub fn total_aoi_direct(
    tour: &Tour,
    scenario: &Scenario,
    grids: &[CandidateGrid],
) -> Result<f64> {
    let times = tour_times(tour, scenario, grids)?;
    let m = tour.order.len();
    let mut total = 0.0;
    for t in 1..=m {
        let n_t = scenario.clusters[tour.order[t - 1]].node_count as usize;
        for n in 1..=n_t {
            total += node_aoi_from_times(&times, scenario, &tour.order, t, n)?;
        }
    }
    Ok(total)
}

/// Age of the oldest packet: the first node sampled at the first stop.
/// Equals all hovering time plus all flying time after the first stop.
pub fn oldest_packet_aoi(
    tour: &Tour,
    scenario: &Scenario,
    grids: &[CandidateGrid],
) -> Result<f64> {
    let times = tour_times(tour, scenario, grids)?;
    node_aoi_from_times(&times, scenario, &tour.order, 1, 1)
}

/// Evaluates a tour completely: per-node ages, total, oldest, and the
/// time/energy ledger.
pub fn evaluate(tour: &Tour, scenario: &Scenario, grids: &[CandidateGrid]) -> Result<AoiReport> {
    let ledger = TimeEnergyLedger::for_tour(tour, scenario, grids)?;
    let times = TourTimes {
        hover: ledger.hover_time.clone(),
        legs: ledger.fly_time.clone(),
    };
    let m = tour.order.len();
    let mut per_node = Vec::with_capacity(m);
    // Shared suffix per cluster, then the per-node slot stagger.
    let mut suffix = 0.0;
    let mut suffixes = vec![0.0; m];
    for g in (1..=m).rev() {
        suffix += times.hover[g - 1] + times.legs[g];
        suffixes[g - 1] = suffix;
    }
    for t in 1..=m {
        let n_t = scenario.clusters[tour.order[t - 1]].node_count as usize;
        let row: Vec<f64> = (1..=n_t)
            .map(|n| suffixes[t - 1] - (n as f64 - 1.0) * scenario.env.slot_seconds)
            .collect();
        per_node.push(row);
    }
    let total = total_aoi_from_times(&times, scenario, &tour.order);
    let oldest = per_node[0][0];
    Ok(AoiReport {
        per_node_aoi: per_node,
        total_aoi: total,
        oldest_aoi: oldest,
        ledger,
    })
}
