//! Hovering-point selection for a fixed visiting order.
//!
//! With the order fixed, the objective decomposes over a layered directed
//! graph: layer 0 is the start point, layers 1..=M hold the candidate grids
//! of the visited clusters in order, layer M+1 is the return to start.  An
//! edge (g,p)→(g+1,q) costs the weighted flight plus the weighted hover at q,
//! where the weight is the number of packets already on board — so any
//! start→goal path cost, plus an order-independent constant, *is* the tour's
//! total AoI.
//!
//! Three solvers: weighted A* (`f = g + ω·h` with an admissible, consistent
//! heuristic), an exact forward dynamic program over the layers, and a
//! brute-force optimum over all M! orders for small instances.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use itertools::Itertools;

use crate::aoi::{self, Tour};
use crate::channel::{self, LinkGeometry};
use crate::error::{Error, Result};
use crate::geom::{Point2, Point3};
use crate::kinematics;
use crate::scenario::{CandidateGrid, Scenario};

/// The layered search graph for one visiting order.
#[derive(Debug, Clone)]
pub struct LayeredGraph {
    /// Cluster index per mission layer (length M; layer g holds order[g-1]).
    pub order: Vec<usize>,
    /// Points per layer; layers 0 and M+1 are the start point alone.
    points: Vec<Vec<Point3>>,
    /// Hover time per point per layer (zero at start/goal layers).
    hover: Vec<Vec<f64>>,
    /// Packets-on-board weight while leaving layer g (W_0 = 0; W_{M+1}=W_M).
    weights: Vec<f64>,
    /// Added to any start→goal path cost to obtain the tour's total AoI.
    pub constant_offset: f64,
    speed: f64,
    // Heuristic tables: per-layer bounding disk of the actual points plus a
    // suffix of weighted minimal hover and center-to-center flight bounds.
    centers: Vec<Point3>,
    radii: Vec<f64>,
    suffix: Vec<f64>,
}

impl LayeredGraph {
    /// Total number of layers, M+2.
    pub fn num_layers(&self) -> usize {
        self.points.len()
    }

    /// Number of candidate points in one layer.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.points[layer].len()
    }

    pub fn point(&self, layer: usize, idx: usize) -> Point3 {
        self.points[layer][idx]
    }

    /// Weighted hover cost of entering a node, s.
    pub fn node_cost(&self, layer: usize, idx: usize) -> f64 {
        self.weights[layer] * self.hover[layer][idx]
    }

    /// Cost of the edge (layer, from) → (layer+1, to): weighted flight plus
    /// the weighted hover at the target node.
    pub fn edge_cost(&self, layer: usize, from: usize, to: usize) -> f64 {
        let fly = kinematics_fly(self.points[layer][from], self.points[layer + 1][to], self.speed);
        self.weights[layer] * fly + self.node_cost(layer + 1, to)
    }

    /// Admissible, consistent lower bound on the remaining cost to the goal.
    ///
    /// From (g,p): the weighted flight to the next layer can't beat the
    /// distance to that layer's bounding disk; each later layer costs at
    /// least its weighted minimal hover plus the weighted disk-to-disk
    /// flight bound.
    pub fn heuristic(&self, layer: usize, idx: usize) -> f64 {
        let last = self.num_layers() - 1;
        if layer >= last {
            return 0.0;
        }
        let p = self.points[layer][idx];
        let next = layer + 1;
        let gap = (p.dist(&self.centers[next]) - self.radii[next]).max(0.0);
        self.weights[layer] * gap / self.speed + self.suffix[next]
    }

    /// Maps chosen per-layer point indices back to a tour.
    pub fn to_tour(&self, chosen: &[usize]) -> Result<Tour> {
        let m = self.order.len();
        if chosen.len() != m + 2 {
            return Err(Error::contract(format!(
                "expected {} per-layer choices, got {}",
                m + 2,
                chosen.len()
            )));
        }
        let mut point_choice = vec![0usize; m];
        for g in 1..=m {
            point_choice[self.order[g - 1]] = chosen[g];
        }
        Ok(Tour::new(self.order.clone(), point_choice))
    }
}

fn kinematics_fly(a: Point3, b: Point3, speed: f64) -> f64 {
    a.dist(&b) / speed
}

/// Builds the layered graph for one visiting order.
///
/// Hover times are evaluated per candidate point from the uplink rate at
/// that point, exactly as the tour evaluator does.
pub fn build_layered_graph(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    order: &[usize],
) -> Result<LayeredGraph> {
    let m = scenario.m();
    if order.len() != m {
        return Err(Error::contract(format!(
            "order covers {} clusters, scenario has {m}",
            order.len()
        )));
    }
    let mut seen = vec![false; m];
    for &c in order {
        if c >= m {
            return Err(Error::Index(format!("cluster index {c} out of range 0..{m}")));
        }
        if seen[c] {
            return Err(Error::contract(format!("cluster {c} appears twice in order")));
        }
        seen[c] = true;
    }
    if grids.len() != m {
        return Err(Error::contract(format!(
            "{} candidate grids for {m} clusters",
            grids.len()
        )));
    }

    let mut points = Vec::with_capacity(m + 2);
    let mut hover = Vec::with_capacity(m + 2);
    points.push(vec![scenario.start]);
    hover.push(vec![0.0]);
    for &cluster in order {
        let grid = &grids[cluster];
        if grid.is_empty() {
            return Err(Error::Infeasible(format!(
                "cluster {cluster} has an empty candidate grid"
            )));
        }
        let ch = &scenario.clusters[cluster].ch;
        let n = scenario.clusters[cluster].node_count;
        let mut layer_hover = Vec::with_capacity(grid.len());
        for p in &grid.points {
            let geom = LinkGeometry::new(Point2::new(p.x, p.y).dist(ch), scenario.env.altitude);
            let rate = channel::rate(geom, &scenario.env);
            layer_hover.push(kinematics::hover_time(n, rate, &scenario.env));
        }
        points.push(grid.points.clone());
        hover.push(layer_hover);
    }
    points.push(vec![scenario.start]);
    hover.push(vec![0.0]);

    let cum = aoi::cumulative_weights(order, scenario)?;
    let mut weights = Vec::with_capacity(m + 2);
    weights.push(0.0);
    weights.extend(cum.iter().map(|&w| w as f64));
    weights.push(*weights.last().expect("nonempty"));

    // Bounding disk of each layer's actual points: centroid + max distance.
    let mut centers = Vec::with_capacity(m + 2);
    let mut radii = Vec::with_capacity(m + 2);
    for layer in &points {
        let inv = 1.0 / layer.len() as f64;
        let c = layer.iter().fold(Point3::default(), |acc, p| {
            Point3::new(acc.x + p.x * inv, acc.y + p.y * inv, acc.z + p.z * inv)
        });
        let r = layer.iter().map(|p| p.dist(&c)).fold(0.0, f64::max);
        centers.push(c);
        radii.push(r);
    }

    // suffix[j] = Σ_{g=j}^{M} W_g·(min hover in layer g + flight bound g→g+1).
    let speed = scenario.uav.speed;
    let mut suffix = vec![0.0; m + 2];
    for g in (1..=m).rev() {
        let min_hover = hover[g].iter().copied().fold(f64::INFINITY, f64::min);
        let hop = (centers[g].dist(&centers[g + 1]) - radii[g] - radii[g + 1]).max(0.0) / speed;
        suffix[g] = suffix[g + 1] + weights[g] * (min_hover + hop);
    }

    Ok(LayeredGraph {
        order: order.to_vec(),
        points,
        hover,
        weights,
        constant_offset: -aoi::slot_offset(scenario),
        speed,
        centers,
        radii,
        suffix,
    })
}

/// Outcome of one layered search.
#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Chosen point index per layer (start and goal included).
    pub chosen: Vec<usize>,
    /// Total AoI of the reconstructed tour (path cost + constant offset), s.
    pub total_aoi: f64,
    /// Number of nodes taken off the frontier and expanded.
    pub expanded_nodes: usize,
    /// Predecessor point index per (layer, point), for path reconstruction.
    pub came_from: Vec<Vec<Option<usize>>>,
}

impl SearchResult {
    /// The tour this search settled on.
    pub fn tour(&self, graph: &LayeredGraph) -> Result<Tour> {
        graph.to_tour(&self.chosen)
    }
}

/// Frontier entry; orders by f-value, then lower layer, then insertion order,
/// making pops deterministic.
struct Entry {
    f: f64,
    cost: f64,
    layer: usize,
    node: usize,
    seq: u64,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.f
            .total_cmp(&other.f)
            .then(self.layer.cmp(&other.layer))
            .then(self.seq.cmp(&other.seq))
    }
}

/// Weighted A* over the layered graph: best-first on `f = g + ω·h`.
///
/// The frontier is a binary min-heap with lazy deletion; a node is
/// re-expanded whenever a cheaper path to it is found, so with ω=1 the result
/// is exact and for ω>1 the cost is within ω of optimal (admissible h).
pub fn weighted_astar(graph: &LayeredGraph, omega: f64) -> Result<SearchResult> {
    weighted_astar_traced(graph, omega).map(|(r, _)| r)
}

/// Plans hovering points for a fixed visiting order: builds the layered
/// graph, runs weighted A*, and returns the tour with its total age.
pub fn plan_with_order(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    order: &[usize],
    omega: f64,
) -> Result<(Tour, f64)> {
    let graph = build_layered_graph(scenario, grids, order)?;
    let result = weighted_astar(&graph, omega)?;
    let tour = result.tour(&graph)?;
    Ok((tour, result.total_aoi))
}

/// As [`weighted_astar`], also returning the popped f-values in order — used
/// to verify the monotone-frontier property under a consistent heuristic.
pub fn weighted_astar_traced(
    graph: &LayeredGraph,
    omega: f64,
) -> Result<(SearchResult, Vec<f64>)> {
    if !(omega >= 1.0) {
        return Err(Error::param(format!("omega must be ≥ 1, got {omega}")));
    }
    let last = graph.num_layers() - 1;
    let mut cost: Vec<Vec<f64>> = (0..=last)
        .map(|g| vec![f64::INFINITY; graph.layer_len(g)])
        .collect();
    let mut came_from: Vec<Vec<Option<usize>>> =
        (0..=last).map(|g| vec![None; graph.layer_len(g)]).collect();

    let mut frontier = BinaryHeap::new();
    let mut seq = 0u64;
    cost[0][0] = 0.0;
    frontier.push(std::cmp::Reverse(Entry {
        f: omega * graph.heuristic(0, 0),
        cost: 0.0,
        layer: 0,
        node: 0,
        seq,
    }));

    let mut expanded = 0usize;
    let mut popped_f = Vec::new();
    while let Some(std::cmp::Reverse(e)) = frontier.pop() {
        if e.cost > cost[e.layer][e.node] {
            continue; // stale entry superseded by a cheaper path
        }
        popped_f.push(e.f);
        expanded += 1;
        if e.layer == last {
            let chosen = reconstruct(&came_from, last, e.node);
            return Ok((
                SearchResult {
                    chosen,
                    total_aoi: e.cost + graph.constant_offset,
                    expanded_nodes: expanded,
                    came_from,
                },
                popped_f,
            ));
        }
        for q in 0..graph.layer_len(e.layer + 1) {
            let ng = e.cost + graph.edge_cost(e.layer, e.node, q);
            if ng < cost[e.layer + 1][q] {
                cost[e.layer + 1][q] = ng;
                came_from[e.layer + 1][q] = Some(e.node);
                seq += 1;
                frontier.push(std::cmp::Reverse(Entry {
                    f: ng + omega * graph.heuristic(e.layer + 1, q),
                    cost: ng,
                    layer: e.layer + 1,
                    node: q,
                    seq,
                }));
            }
        }
    }
    Err(Error::contract(
        "frontier exhausted without reaching the goal layer".to_string(),
    ))
}

fn reconstruct(came_from: &[Vec<Option<usize>>], last: usize, goal_node: usize) -> Vec<usize> {
    let mut chosen = vec![0usize; last + 1];
    chosen[last] = goal_node;
    let mut node = goal_node;
    for layer in (1..=last).rev() {
        node = came_from[layer][node].expect("path reconstruction hit a gap");
        chosen[layer - 1] = node;
    }
    chosen
}

/// Exact layer-by-layer dynamic program: the verification oracle for the
/// weighted search.  Ties keep the lowest point index, so results are
/// deterministic.
pub fn exact_dp(graph: &LayeredGraph) -> SearchResult {
    let last = graph.num_layers() - 1;
    let mut best: Vec<Vec<f64>> = (0..=last)
        .map(|g| vec![f64::INFINITY; graph.layer_len(g)])
        .collect();
    let mut parent: Vec<Vec<Option<usize>>> =
        (0..=last).map(|g| vec![None; graph.layer_len(g)]).collect();
    best[0][0] = 0.0;
    for g in 0..last {
        for from in 0..graph.layer_len(g) {
            if !best[g][from].is_finite() {
                continue;
            }
            for to in 0..graph.layer_len(g + 1) {
                let c = best[g][from] + graph.edge_cost(g, from, to);
                if c < best[g + 1][to] {
                    best[g + 1][to] = c;
                    parent[g + 1][to] = Some(from);
                }
            }
        }
    }
    let chosen = reconstruct(&parent, last, 0);
    let expanded: usize = (0..=last).map(|g| graph.layer_len(g)).sum();
    SearchResult {
        chosen,
        total_aoi: best[last][0] + graph.constant_offset,
        expanded_nodes: expanded,
        came_from: parent,
    }
}

/// Exact minimal remaining cost from every node to the goal, by backward
/// dynamic programming.  Used to certify heuristic admissibility.
pub fn exact_cost_to_go(graph: &LayeredGraph) -> Vec<Vec<f64>> {
    let last = graph.num_layers() - 1;
    let mut ctg: Vec<Vec<f64>> = (0..=last)
        .map(|g| vec![f64::INFINITY; graph.layer_len(g)])
        .collect();
    ctg[last][0] = 0.0;
    for g in (0..last).rev() {
        for from in 0..graph.layer_len(g) {
            let mut m = f64::INFINITY;
            for to in 0..graph.layer_len(g + 1) {
                let c = graph.edge_cost(g, from, to) + ctg[g + 1][to];
                if c < m {
                    m = c;
                }
            }
            ctg[g][from] = m;
        }
    }
    ctg
}

/// Brute-force global optimum of the full problem: every visiting order
/// (lexicographic), each solved exactly by the layered DP.  Intended as an
/// oracle; refuses instances beyond `order_cap` clusters.
pub fn exact_global(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    order_cap: usize,
) -> Result<(Tour, f64)> {
    let m = scenario.m();
    if m > order_cap {
        return Err(Error::param(format!(
            "exhaustive search over {m}! orders refused (cap {order_cap}); \
             use a heuristic solver for larger instances"
        )));
    }
    let mut best: Option<(Tour, f64)> = None;
    for order in (0..m).permutations(m) {
        let graph = build_layered_graph(scenario, grids, &order)?;
        let result = exact_dp(&graph);
        let better = match &best {
            None => true,
            Some((_, cost)) => result.total_aoi < *cost,
        };
        if better {
            best = Some((result.tour(&graph)?, result.total_aoi));
        }
    }
    best.ok_or_else(|| Error::contract("no visiting order enumerated".to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::generate_scenario;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, m: usize, l_sub: usize) -> (Scenario, Vec<CandidateGrid>) {
        let mut s = generate_scenario(seed, m, 3000.0, &[5, 10, 15, 20, 25, 30]).unwrap();
        s.env.l_sub = l_sub;
        let radius = channel::service_radius(&s.env).unwrap();
        let grids = s.build_grids(radius).unwrap();
        (s, grids)
    }

    fn shuffled_order(seed: u64, m: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        order
    }

    #[test]
    fn forced_single_path() {
        let (mut s, _) = instance(5, 1, 1);
        s.env.l_sub = 1;
        let grids = s.build_grids(300.0).unwrap();
        let graph = build_layered_graph(&s, &grids, &[0]).unwrap();
        let astar = weighted_astar(&graph, 1.0).unwrap();
        let dp = exact_dp(&graph);
        assert_eq!(astar.chosen, vec![0, 0, 0]);
        assert_relative_eq!(astar.total_aoi, dp.total_aoi, max_relative = 1e-12);

        let tour = astar.tour(&graph).unwrap();
        let direct = aoi::total_aoi(&tour, &s, &grids).unwrap();
        assert_relative_eq!(astar.total_aoi, direct, max_relative = 1e-9);
    }

    #[test]
    fn graph_structure_and_errors() {
        let (s, grids) = instance(8, 3, 2);
        let graph = build_layered_graph(&s, &grids, &[2, 0, 1]).unwrap();
        assert_eq!(graph.num_layers(), 5);
        assert_eq!(graph.layer_len(0), 1);
        assert_eq!(graph.layer_len(4), 1);

        // Leaving the start carries weight 0: the edge cost is the hover at
        // the target alone, independent of flight distance.
        for q in 0..graph.layer_len(1) {
            assert_relative_eq!(
                graph.edge_cost(0, 0, q),
                graph.node_cost(1, q),
                max_relative = 1e-12
            );
        }

        // Order must be a permutation.
        assert!(build_layered_graph(&s, &grids, &[0, 0, 1]).is_err());
        assert!(build_layered_graph(&s, &grids, &[0, 1]).is_err());
        assert!(build_layered_graph(&s, &grids, &[0, 1, 5]).is_err());

        // Empty grid is an infeasibility.
        let mut bad = grids.clone();
        bad[1].points.clear();
        assert!(matches!(
            build_layered_graph(&s, &bad, &[2, 0, 1]),
            Err(Error::Infeasible(_))
        ));
    }

    /// Exhaustive point-assignment enumeration oracle: the DP and A* minimum
    /// over the layered graph equals the minimum tour objective over all
    /// per-cluster point choices.
    #[test]
    fn dp_matches_assignment_enumeration() {
        for seed in 0..10u64 {
            let (s, grids) = instance(seed, 4, 2);
            let order = shuffled_order(seed, 4);
            let graph = build_layered_graph(&s, &grids, &order).unwrap();
            let dp = exact_dp(&graph);
            let astar = weighted_astar(&graph, 1.0).unwrap();

            let sizes: Vec<usize> = (0..4).map(|c| grids[c].points.len()).collect();
            let mut best = f64::INFINITY;
            let mut idx = vec![0usize; 4];
            loop {
                let tour = Tour::new(order.clone(), idx.clone());
                let cost = aoi::total_aoi(&tour, &s, &grids).unwrap();
                if cost < best {
                    best = cost;
                }
                // Odometer over the assignment product space.
                let mut k = 0;
                loop {
                    idx[k] += 1;
                    if idx[k] < sizes[k] {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                    if k == 4 {
                        break;
                    }
                }
                if k == 4 {
                    break;
                }
            }
            assert_relative_eq!(dp.total_aoi, best, max_relative = 1e-9);
            assert_relative_eq!(astar.total_aoi, best, max_relative = 1e-9);
        }
    }

    #[test]
    fn astar_ties_dp_and_respects_omega_bound() {
        for seed in 0..30u64 {
            let m = 2 + (seed % 9) as usize;
            let (s, grids) = instance(seed, m, 5);
            let order = shuffled_order(seed, m);
            let graph = build_layered_graph(&s, &grids, &order).unwrap();
            let dp = exact_dp(&graph);
            let exact = weighted_astar(&graph, 1.0).unwrap();
            assert_relative_eq!(exact.total_aoi, dp.total_aoi, max_relative = 1e-9);

            let inflated = weighted_astar(&graph, 1.2).unwrap();
            assert!(inflated.total_aoi >= dp.total_aoi - 1e-9);
            // The ω-suboptimality bound applies to the path cost (the AoI
            // after removing the negative constant offset).
            let path = inflated.total_aoi - graph.constant_offset;
            let opt_path = dp.total_aoi - graph.constant_offset;
            assert!(path <= 1.2 * opt_path + 1e-9);

            // Reconstructed tour re-evaluates to the reported cost.
            let tour = inflated.tour(&graph).unwrap();
            let check = aoi::total_aoi(&tour, &s, &grids).unwrap();
            assert_relative_eq!(inflated.total_aoi, check, max_relative = 1e-9);
        }
    }

    #[test]
    fn heuristic_is_admissible_and_goal_zero() {
        for seed in 0..20u64 {
            let m = 1 + (seed % 8) as usize;
            let (s, grids) = instance(seed, m, 3);
            let order = shuffled_order(seed.wrapping_mul(31), m);
            let graph = build_layered_graph(&s, &grids, &order).unwrap();
            let ctg = exact_cost_to_go(&graph);
            for g in 0..graph.num_layers() {
                for i in 0..graph.layer_len(g) {
                    let h = graph.heuristic(g, i);
                    assert!(
                        h <= ctg[g][i] * (1.0 + 1e-12) + 1e-9,
                        "h({g},{i})={h} exceeds cost-to-go {}",
                        ctg[g][i]
                    );
                }
            }
            let last = graph.num_layers() - 1;
            assert_eq!(graph.heuristic(last, 0), 0.0);
        }
    }

    /// With every layer a single point, the heuristic collapses the bounding
    /// disks to the points themselves and equals the exact remaining cost.
    #[test]
    fn heuristic_exact_on_singleton_layers() {
        let (mut s, _) = instance(3, 4, 1);
        s.env.l_sub = 1;
        let grids = s.build_grids(250.0).unwrap();
        let graph = build_layered_graph(&s, &grids, &[1, 3, 0, 2]).unwrap();
        let ctg = exact_cost_to_go(&graph);
        for g in 0..graph.num_layers() {
            for i in 0..graph.layer_len(g) {
                assert_relative_eq!(graph.heuristic(g, i), ctg[g][i], max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn monotone_frontier_with_consistent_heuristic() {
        for seed in 0..10u64 {
            let m = 2 + (seed % 6) as usize;
            let (s, grids) = instance(seed, m, 4);
            let order = shuffled_order(seed, m);
            let graph = build_layered_graph(&s, &grids, &order).unwrap();
            let (_, popped) = weighted_astar_traced(&graph, 1.0).unwrap();
            for w in popped.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9,
                    "frontier f-values regressed: {} then {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn omega_validation() {
        let (s, grids) = instance(1, 2, 2);
        let graph = build_layered_graph(&s, &grids, &[0, 1]).unwrap();
        assert!(matches!(weighted_astar(&graph, 0.5), Err(Error::Parameter(_))));
        assert!(weighted_astar(&graph, 1.0).is_ok());
    }

    /// Joint enumeration oracle: global optimum over orders × assignments.
    #[test]
    fn exact_global_matches_joint_enumeration() {
        for seed in 0..8u64 {
            let (s, grids) = instance(seed, 3, 2);
            let (tour, cost) = exact_global(&s, &grids, 7).unwrap();
            assert_relative_eq!(
                cost,
                aoi::total_aoi(&tour, &s, &grids).unwrap(),
                max_relative = 1e-9
            );

            let mut best = f64::INFINITY;
            for order in (0..3).permutations(3) {
                let sizes: Vec<usize> = (0..3).map(|c| grids[c].points.len()).collect();
                let mut idx = vec![0usize; 3];
                loop {
                    let t = Tour::new(order.clone(), idx.clone());
                    let c = aoi::total_aoi(&t, &s, &grids).unwrap();
                    if c < best {
                        best = c;
                    }
                    let mut k = 0;
                    loop {
                        idx[k] += 1;
                        if idx[k] < sizes[k] {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                        if k == 3 {
                            break;
                        }
                    }
                    if k == 3 {
                        break;
                    }
                }
            }
            assert_relative_eq!(cost, best, max_relative = 1e-9);
        }
    }

    #[test]
    fn exact_global_cap_and_degenerate() {
        let (s, grids) = instance(2, 1, 2);
        let (tour, _) = exact_global(&s, &grids, 7).unwrap();
        assert_eq!(tour.order, vec![0]);

        let (s8, grids8) = instance(2, 8, 1);
        assert!(matches!(
            exact_global(&s8, &grids8, 7),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn exact_global_lower_bounds_random_tours() {
        let (s, grids) = instance(9, 4, 2);
        let (_, opt) = exact_global(&s, &grids, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let order = {
                let mut o: Vec<usize> = (0..4).collect();
                for i in (1..4).rev() {
                    o.swap(i, rng.random_range(0..=i));
                }
                o
            };
            let choice = (0..4)
                .map(|c| rng.random_range(0..grids[c].points.len()))
                .collect();
            let t = Tour::new(order, choice);
            let c = aoi::total_aoi(&t, &s, &grids).unwrap();
            assert!(c >= opt - 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        /// A* at ω=1 is exact on arbitrary small instances.
        #[test]
        fn prop_astar_exact(seed in 0u64..500, m in 1usize..6) {
            let (s, grids) = instance(seed, m, 3);
            let order = shuffled_order(seed, m);
            let graph = build_layered_graph(&s, &grids, &order).unwrap();
            let dp = exact_dp(&graph);
            let astar = weighted_astar(&graph, 1.0).unwrap();
            prop_assert!(((astar.total_aoi - dp.total_aoi) / dp.total_aoi).abs() < 1e-9);
        }
    }
}
