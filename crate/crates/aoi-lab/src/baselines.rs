//! Classical solvers used as comparison anchors for the learned policy:
//! simulated annealing and a genetic algorithm over the joint
//! (order, hovering-point) space, a nearest-neighbor constructive heuristic,
//! and uniform-random orders.  Every solver returns a feasible [`Tour`] and
//! its exact total age as reported by the [`crate::aoi`] evaluator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aoi::{self, Tour};
use crate::channel::{self, LinkGeometry};
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::kinematics;
use crate::router;
use crate::scenario::{CandidateGrid, Scenario};

/// Simulated-annealing schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SaConfig {
    /// Initial temperature.
    pub t0: f64,
    /// Geometric cooling factor applied once per iteration.
    pub cooling: f64,
    pub max_iter: usize,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            t0: 100.0,
            cooling: 0.99,
            max_iter: 1000,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0) || !self.t0.is_finite() {
            return Err(Error::param(format!("sa.t0 must be positive, got {}", self.t0)));
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return Err(Error::param(format!(
                "sa.cooling must lie in (0, 1), got {}",
                self.cooling
            )));
        }
        Ok(())
    }
}

/// Genetic-algorithm knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    /// Individuals per generation; `None` uses the total number of candidate
    /// hovering points across all clusters (minimum 2).
    pub population_size: Option<usize>,
    /// Generations.
    pub max_iter: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: None,
            max_iter: 10_000,
            crossover_rate: 0.1,
            mutation_rate: 0.8,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(format!("ga.{name} must lie in [0, 1], got {v}")));
            }
        }
        if let Some(p) = self.population_size {
            if p < 2 {
                return Err(Error::param(format!(
                    "ga.population_size must be ≥ 2, got {p}"
                )));
            }
        }
        Ok(())
    }
}

fn tour_cost(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    order: &[usize],
    points: &[usize],
) -> Result<f64> {
    aoi::total_aoi(
        &Tour::new(order.to_vec(), points.to_vec()),
        scenario,
        grids,
    )
}

fn random_solution(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..scenario.m()).collect();
    order.shuffle(rng);
    let points = grids
        .iter()
        .map(|g| rng.random_range(0..g.points.len()))
        .collect();
    (order, points)
}

// ----------------------------------------------------------------------
// Simulated annealing
// ----------------------------------------------------------------------

/// Simulated annealing over the joint (order, point) space: Metropolis
/// acceptance `exp(−Δ/T)`, geometric cooling, best-ever solution returned.
/// The neighborhood flips a coin between reversing a random order segment
/// and redrawing one cluster's hovering-point index.
pub fn solve_sa(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    config: &SaConfig,
    seed: u64,
) -> Result<(Tour, f64)> {
    sa_impl(scenario, grids, config, seed).map(|(t, c, _)| (t, c))
}

fn sa_impl(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    config: &SaConfig,
    seed: u64,
) -> Result<(Tour, f64, Vec<f64>)> {
    config.validate()?;
    let m = scenario.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut order, mut points) = random_solution(scenario, grids, &mut rng);
    let mut cost = tour_cost(scenario, grids, &order, &points)?;
    let mut best = (order.clone(), points.clone(), cost);
    let mut temp = config.t0;
    let mut trace = Vec::with_capacity(config.max_iter);

    for _ in 0..config.max_iter {
        let mut n_order = order.clone();
        let mut n_points = points.clone();
        // Half the proposals change the order, half move one hovering point;
        // a single cluster admits only point moves.
        if m >= 2 && rng.random::<bool>() {
            let a = rng.random_range(0..m);
            let b = loop {
                let b = rng.random_range(0..m);
                if b != a {
                    break b;
                }
            };
            let (lo, hi) = (a.min(b), a.max(b));
            n_order[lo..=hi].reverse();
        } else {
            let c = rng.random_range(0..m);
            n_points[c] = rng.random_range(0..grids[c].points.len());
        }
        let n_cost = tour_cost(scenario, grids, &n_order, &n_points)?;
        let delta = n_cost - cost;
        if delta <= 0.0 || rng.random::<f64>() < (-delta / temp).exp() {
            order = n_order;
            points = n_points;
            cost = n_cost;
            if cost < best.2 {
                best = (order.clone(), points.clone(), cost);
            }
        }
        temp *= config.cooling;
        trace.push(best.2);
    }
    Ok((Tour::new(best.0, best.1), best.2, trace))
}

// ----------------------------------------------------------------------
// Genetic algorithm
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Individual {
    order: Vec<usize>,
    points: Vec<usize>,
    cost: f64,
}

/// Elitist generational GA over (order, point-index) chromosomes: tournament
/// selection (k = 2), order crossover on the permutation plus uniform
/// crossover on the point indices, swap / reset mutation, one elite carried
/// over unchanged each generation.
pub fn solve_ga(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    config: &GaConfig,
    seed: u64,
) -> Result<(Tour, f64)> {
    ga_impl(scenario, grids, config, seed, None).map(|(t, c, _)| (t, c))
}

/// Order crossover: a random segment of `p1` is kept in place, the remaining
/// positions are filled with the missing elements in the cyclic order they
/// appear in `p2`, starting after the segment.
fn order_crossover(p1: &[usize], p2: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = p1.len();
    if m < 2 {
        return p1.to_vec();
    }
    let a = rng.random_range(0..m);
    let b = rng.random_range(0..m);
    let (lo, hi) = (a.min(b), a.max(b));
    let mut child = vec![usize::MAX; m];
    let mut used = vec![false; m];
    for i in lo..=hi {
        child[i] = p1[i];
        used[p1[i]] = true;
    }
    let mut fill = (hi + 1) % m;
    for k in 0..m {
        let candidate = p2[(hi + 1 + k) % m];
        if !used[candidate] {
            child[fill] = candidate;
            used[candidate] = true;
            fill = (fill + 1) % m;
        }
    }
    child
}

fn ga_impl(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    config: &GaConfig,
    seed: u64,
    initial: Option<Vec<(Vec<usize>, Vec<usize>)>>,
) -> Result<(Tour, f64, Vec<f64>)> {
    config.validate()?;
    let m = scenario.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pop_size = config
        .population_size
        .unwrap_or_else(|| grids.iter().map(|g| g.points.len()).sum())
        .max(2);

    let seeds: Vec<(Vec<usize>, Vec<usize>)> = match initial {
        Some(list) => list,
        None => (0..pop_size)
            .map(|_| random_solution(scenario, grids, &mut rng))
            .collect(),
    };
    let mut population: Vec<Individual> = seeds
        .into_iter()
        .map(|(order, points)| {
            let cost = tour_cost(scenario, grids, &order, &points)?;
            Ok(Individual {
                order,
                points,
                cost,
            })
        })
        .collect::<Result<_>>()?;
    if population.is_empty() {
        return Err(Error::contract("empty initial population"));
    }

    let best_of = |pop: &[Individual]| {
        pop.iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.cost.total_cmp(&b.cost))
            .map(|(i, _)| i)
            .expect("nonempty population")
    };
    let mut best = population[best_of(&population)].clone();
    let mut trace = Vec::with_capacity(config.max_iter);

    for _ in 0..config.max_iter {
        let elite = population[best_of(&population)].clone();
        let mut next = Vec::with_capacity(pop_size);
        next.push(elite);
        while next.len() < pop_size {
            let pick = |rng: &mut ChaCha8Rng| {
                let a = rng.random_range(0..population.len());
                let b = rng.random_range(0..population.len());
                if population[a].cost <= population[b].cost {
                    a
                } else {
                    b
                }
            };
            let p1 = pick(&mut rng);
            let p2 = pick(&mut rng);
            let (mut order, mut points) = if rng.random::<f64>() < config.crossover_rate {
                let order = order_crossover(&population[p1].order, &population[p2].order, &mut rng);
                let points = population[p1]
                    .points
                    .iter()
                    .zip(&population[p2].points)
                    .map(|(&x, &y)| if rng.random::<bool>() { x } else { y })
                    .collect();
                (order, points)
            } else {
                (population[p1].order.clone(), population[p1].points.clone())
            };
            if m >= 2 && rng.random::<f64>() < config.mutation_rate {
                let a = rng.random_range(0..m);
                let b = rng.random_range(0..m);
                order.swap(a, b);
            }
            if rng.random::<f64>() < config.mutation_rate {
                let c = rng.random_range(0..m);
                points[c] = rng.random_range(0..grids[c].points.len());
            }
            let cost = tour_cost(scenario, grids, &order, &points)?;
            next.push(Individual {
                order,
                points,
                cost,
            });
        }
        population = next;
        let gen_best = &population[best_of(&population)];
        if gen_best.cost < best.cost {
            best = gen_best.clone();
        }
        trace.push(best.cost);
    }
    Ok((Tour::new(best.order, best.points), best.cost, trace))
}

// ----------------------------------------------------------------------
// Constructive / random anchors
// ----------------------------------------------------------------------

/// Greedy construction: repeatedly appends the cluster that adds the least
/// weighted time, measured at the disk-center hovering points (flight from
/// the current position weighted by the load already on board, hover
/// weighted by the load including the new cluster).  The resulting order's
/// hovering points are then chosen optimally by the exact per-order dynamic
/// program.
pub fn solve_nearest_neighbor(
    scenario: &Scenario,
    grids: &[CandidateGrid],
) -> Result<(Tour, f64)> {
    let m = scenario.m();
    let env = &scenario.env;
    let centers: Vec<Point3> = scenario
        .clusters
        .iter()
        .map(|c| c.disk_center(env.altitude))
        .collect();
    let overhead_rate = channel::rate(LinkGeometry::new(0.0, env.altitude), env);
    let hover_center: Vec<f64> = scenario
        .clusters
        .iter()
        .map(|c| kinematics::hover_time(c.node_count, overhead_rate, env))
        .collect();

    let mut order = Vec::with_capacity(m);
    let mut visited = vec![false; m];
    let mut pos = scenario.start;
    let mut load = 0u64;
    for _ in 0..m {
        let mut pick: Option<(usize, f64)> = None;
        for c in 0..m {
            if visited[c] {
                continue;
            }
            let fly = kinematics::fly_time(pos, centers[c], &scenario.uav);
            let extra = load as f64 * fly
                + (load + u64::from(scenario.clusters[c].node_count)) as f64 * hover_center[c];
            if pick.map_or(true, |(_, best)| extra < best) {
                pick = Some((c, extra));
            }
        }
        let (c, _) = pick.expect("an unvisited cluster remains");
        visited[c] = true;
        order.push(c);
        pos = centers[c];
        load += u64::from(scenario.clusters[c].node_count);
    }
    refine_order(scenario, grids, &order)
}

/// A uniformly random visiting order whose hovering points are chosen
/// optimally by the exact per-order dynamic program.
pub fn solve_random(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    seed: u64,
) -> Result<(Tour, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenario.m()).collect();
    order.shuffle(&mut rng);
    refine_order(scenario, grids, &order)
}

/// Optimal hovering points for a fixed order (exact dynamic program).
fn refine_order(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    order: &[usize],
) -> Result<(Tour, f64)> {
    let graph = router::build_layered_graph(scenario, grids, order)?;
    let result = router::exact_dp(&graph);
    let tour = result.tour(&graph)?;
    Ok((tour, result.total_aoi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario_with, EnvParams, UavParams};
    use approx::assert_relative_eq;

    fn test_instance(seed: u64, m: usize, l_sub: usize) -> (Scenario, Vec<CandidateGrid>) {
        let env = EnvParams {
            l_sub,
            ..EnvParams::default()
        };
        let scenario =
            generate_scenario_with(seed, m, 3000.0, &[5, 10, 15, 20, 25, 30], env, UavParams::default())
                .unwrap();
        let radius = channel::service_radius(&scenario.env).unwrap();
        let grids = scenario.build_grids(radius).unwrap();
        (scenario, grids)
    }

    fn quick_ga() -> GaConfig {
        GaConfig {
            max_iter: 60,
            ..GaConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SaConfig::default().validate().is_ok());
        assert!(GaConfig::default().validate().is_ok());
        let bad = SaConfig {
            cooling: 1.0,
            ..SaConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        let bad = SaConfig {
            t0: 0.0,
            ..SaConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GaConfig {
            mutation_rate: 1.2,
            ..GaConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GaConfig {
            population_size: Some(1),
            ..GaConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sa_zero_iterations_returns_the_initial_solution() {
        let (scenario, grids) = test_instance(3, 4, 2);
        let config = SaConfig {
            max_iter: 0,
            ..SaConfig::default()
        };
        let (tour, cost) = solve_sa(&scenario, &grids, &config, 11).unwrap();
        // Replay the construction: same seed, same initial draw.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (order, points) = random_solution(&scenario, &grids, &mut rng);
        assert_eq!(tour.order, order);
        assert_eq!(tour.point_choice, points);
        let direct = tour_cost(&scenario, &grids, &order, &points).unwrap();
        assert_eq!(cost, direct);
    }

    #[test]
    fn sa_best_so_far_is_monotone_and_feasible() {
        let (scenario, grids) = test_instance(4, 5, 2);
        let (tour, cost, trace) =
            sa_impl(&scenario, &grids, &SaConfig::default(), 7).unwrap();
        assert_eq!(trace.len(), 1000);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "best-so-far increased: {} → {}", w[0], w[1]);
        }
        assert_eq!(cost, *trace.last().unwrap());
        tour.validate(&scenario, &grids).unwrap();
        let recomputed = aoi::total_aoi(&tour, &scenario, &grids).unwrap();
        assert_relative_eq!(recomputed, cost, max_relative = 1e-9);
    }

    #[test]
    fn sa_and_ga_are_reproducible() {
        let (scenario, grids) = test_instance(5, 4, 2);
        let sa1 = solve_sa(&scenario, &grids, &SaConfig::default(), 21).unwrap();
        let sa2 = solve_sa(&scenario, &grids, &SaConfig::default(), 21).unwrap();
        assert_eq!(sa1.0, sa2.0);
        assert_eq!(sa1.1.to_bits(), sa2.1.to_bits());
        let ga1 = solve_ga(&scenario, &grids, &quick_ga(), 22).unwrap();
        let ga2 = solve_ga(&scenario, &grids, &quick_ga(), 22).unwrap();
        assert_eq!(ga1.0, ga2.0);
        assert_eq!(ga1.1.to_bits(), ga2.1.to_bits());
        let r1 = solve_random(&scenario, &grids, 23).unwrap();
        let r2 = solve_random(&scenario, &grids, 23).unwrap();
        assert_eq!(r1.0, r2.0);
    }

    #[test]
    fn metaheuristics_never_beat_the_enumeration_optimum() {
        for seed in [31u64, 32, 33, 34, 35] {
            let (scenario, grids) = test_instance(seed, 4, 2);
            let (_, opt) = router::exact_global(&scenario, &grids, 5).unwrap();
            let (_, sa) = solve_sa(&scenario, &grids, &SaConfig::default(), seed).unwrap();
            let (_, ga) = solve_ga(&scenario, &grids, &quick_ga(), seed).unwrap();
            let (_, nn) = solve_nearest_neighbor(&scenario, &grids).unwrap();
            let (_, rnd) = solve_random(&scenario, &grids, seed).unwrap();
            for (name, cost) in [("sa", sa), ("ga", ga), ("nn", nn), ("random", rnd)] {
                assert!(
                    cost >= opt - 1e-9,
                    "{name} reported {cost} below the optimum {opt} on seed {seed}"
                );
            }
        }
    }

    #[test]
    fn ga_elitism_preserves_a_planted_optimum() {
        let (scenario, grids) = test_instance(41, 4, 2);
        let (opt_tour, opt_cost) = router::exact_global(&scenario, &grids, 5).unwrap();
        let clones = vec![(opt_tour.order.clone(), opt_tour.point_choice.clone()); 8];
        let config = GaConfig {
            population_size: Some(8),
            max_iter: 40,
            ..GaConfig::default()
        };
        let (tour, cost, trace) =
            ga_impl(&scenario, &grids, &config, 9, Some(clones)).unwrap();
        assert_relative_eq!(cost, opt_cost, max_relative = 1e-12);
        tour.validate(&scenario, &grids).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn ga_best_so_far_is_monotone_from_random_start() {
        let (scenario, grids) = test_instance(42, 5, 2);
        let (tour, cost, trace) = ga_impl(&scenario, &grids, &quick_ga(), 5, None).unwrap();
        assert_eq!(trace.len(), 60);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(cost, *trace.last().unwrap());
        tour.validate(&scenario, &grids).unwrap();
        let recomputed = aoi::total_aoi(&tour, &scenario, &grids).unwrap();
        assert_relative_eq!(recomputed, cost, max_relative = 1e-9);
    }

    #[test]
    fn order_crossover_produces_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p1: Vec<usize> = vec![0, 1, 2, 3, 4, 5, 6];
        let p2: Vec<usize> = vec![6, 5, 4, 3, 2, 1, 0];
        for _ in 0..200 {
            let child = order_crossover(&p1, &p2, &mut rng);
            let mut sorted = child.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..7).collect::<Vec<_>>(), "child {child:?}");
        }
        assert_eq!(order_crossover(&[0], &[0], &mut rng), vec![0]);
    }

    #[test]
    fn single_cluster_all_solvers_agree() {
        let (scenario, grids) = test_instance(51, 1, 2);
        let (_, opt) = router::exact_global(&scenario, &grids, 5).unwrap();
        let (_, sa) = solve_sa(&scenario, &grids, &SaConfig::default(), 1).unwrap();
        let (_, ga) = solve_ga(&scenario, &grids, &quick_ga(), 2).unwrap();
        let (_, nn) = solve_nearest_neighbor(&scenario, &grids).unwrap();
        let (_, rnd) = solve_random(&scenario, &grids, 3).unwrap();
        for cost in [sa, ga, nn, rnd] {
            assert_relative_eq!(cost, opt, max_relative = 1e-12);
        }
    }

    #[test]
    fn nearest_neighbor_beats_random_on_average() {
        let mut nn_total = 0.0;
        let mut random_total = 0.0;
        for seed in 0..100u64 {
            let (scenario, grids) = test_instance(1000 + seed, 5, 2);
            nn_total += solve_nearest_neighbor(&scenario, &grids).unwrap().1;
            random_total += solve_random(&scenario, &grids, seed).unwrap().1;
        }
        assert!(
            nn_total <= random_total,
            "nearest neighbor mean {} vs random mean {}",
            nn_total / 100.0,
            random_total / 100.0
        );
    }

    #[test]
    fn reported_costs_match_the_evaluator() {
        let (scenario, grids) = test_instance(61, 5, 2);
        let results = vec![
            solve_sa(&scenario, &grids, &SaConfig::default(), 1).unwrap(),
            solve_ga(&scenario, &grids, &quick_ga(), 2).unwrap(),
            solve_nearest_neighbor(&scenario, &grids).unwrap(),
            solve_random(&scenario, &grids, 3).unwrap(),
        ];
        for (tour, cost) in results {
            tour.validate(&scenario, &grids).unwrap();
            let direct = aoi::total_aoi(&tour, &scenario, &grids).unwrap();
            assert_relative_eq!(direct, cost, max_relative = 1e-9);
        }
    }
}
