//! Batch experiment drivers shared by the command-line tool: scenario
//! generation, policy training, evaluation sweeps over cluster count / SNR
//! threshold / node-count policy, single-instance solves, all-solver
//! benchmarks with timing, and plot-data extraction from result tables.
//!
//! Determinism contract: with fixed seeds every command produces
//! byte-identical CSV output except for the trailing `wall_seconds` column,
//! which is measured with a monotonic clock around the solver call only.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::aoi::{self, AoiReport, Tour};
use crate::baselines::{self, GaConfig, SaConfig};
use crate::channel;
use crate::error::{Error, Result};
use crate::policy::{self, PolicyParams, SampleSelection};
use crate::router;
use crate::scenario::{
    self, generate_scenario_with, CandidateGrid, EnvParams, Scenario, UavParams,
};
use crate::training::{self, EpochSummary, TrainConfig, TrainOutcome};

/// Everything the experiment commands can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverChoice {
    /// Attention policy, greedy decode, then bounded-suboptimal point search.
    TwaGreedy,
    /// Attention policy, multi-sample decode keeping the cheapest refined tour.
    TwaSample,
    /// Attention policy, beam-search decode.
    TwaBeam,
    Sa,
    Ga,
    /// Nearest-neighbor greedy construction.
    Nn,
    Random,
    /// Exhaustive order enumeration with exact point selection.
    Exact,
}

impl SolverChoice {
    pub fn name(self) -> &'static str {
        match self {
            SolverChoice::TwaGreedy => "twa-greedy",
            SolverChoice::TwaSample => "twa-sample",
            SolverChoice::TwaBeam => "twa-beam",
            SolverChoice::Sa => "sa",
            SolverChoice::Ga => "ga",
            SolverChoice::Nn => "nn",
            SolverChoice::Random => "random",
            SolverChoice::Exact => "exact",
        }
    }

    /// True for the decoders that need trained policy parameters.
    pub fn needs_policy(self) -> bool {
        matches!(
            self,
            SolverChoice::TwaGreedy | SolverChoice::TwaSample | SolverChoice::TwaBeam
        )
    }

    pub fn all() -> &'static [SolverChoice] {
        &[
            SolverChoice::TwaGreedy,
            SolverChoice::TwaSample,
            SolverChoice::TwaBeam,
            SolverChoice::Sa,
            SolverChoice::Ga,
            SolverChoice::Nn,
            SolverChoice::Random,
            SolverChoice::Exact,
        ]
    }
}

impl FromStr for SolverChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverChoice::all()
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::param(format!(
                    "unknown solver {s:?}; expected one of twa-greedy, twa-sample, twa-beam, \
                     sa, ga, nn, random, exact"
                ))
            })
    }
}

/// Declarative description of an experiment run: which solvers, over which
/// sweep axes, with which decoding and search knobs.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub seed: u64,
    pub solvers: Vec<SolverChoice>,
    /// Sample count / beam width for the policy decoders.
    pub width: usize,
    /// Heuristic inflation for the point search.
    pub omega: f64,
    /// Cluster-count sweep axis.
    pub m_list: Vec<usize>,
    /// SNR-threshold sweep axis, dB.
    pub gamma_th_db_list: Vec<f64>,
    /// Node-count sweep axis: each entry is the choice set node counts are
    /// drawn from (a single-element set pins every cluster to that count).
    pub node_policies: Vec<Vec<u32>>,
    /// Hovering-point grid resolution per service disk.
    pub l_sub: usize,
    /// Side length of the square deployment area, m.
    pub area_side: f64,
    /// Instances per sweep cell.
    pub instances: usize,
    /// Largest cluster count the exhaustive solver accepts.
    pub order_cap: usize,
    pub checkpoint: Option<PathBuf>,
    /// Solve a stored scenario file instead of generating one (single-instance
    /// commands only).
    pub scenario_file: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub sa: SaConfig,
    pub ga: GaConfig,
}

impl RunSpec {
    /// A small, fully-seeded default: one cell (M=5, 20 dB, mixed node
    /// counts), ten instances, classical solvers only.
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunSpec {
            seed: 7,
            solvers: vec![SolverChoice::Nn, SolverChoice::Random],
            width: 16,
            omega: 1.2,
            m_list: vec![5],
            gamma_th_db_list: vec![20.0],
            node_policies: vec![vec![5, 10, 15, 20, 25, 30]],
            l_sub: 5,
            area_side: 3000.0,
            instances: 10,
            order_cap: 7,
            checkpoint: None,
            scenario_file: None,
            out_dir: out_dir.into(),
            sa: SaConfig::default(),
            ga: GaConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.solvers.is_empty() {
            return Err(Error::param("spec.solvers must name at least one solver"));
        }
        if self.width < 1 {
            return Err(Error::param(format!("spec.width must be ≥ 1, got {}", self.width)));
        }
        if !(self.omega >= 1.0) {
            return Err(Error::param(format!("spec.omega must be ≥ 1, got {}", self.omega)));
        }
        if self.m_list.is_empty() || self.gamma_th_db_list.is_empty() || self.node_policies.is_empty()
        {
            return Err(Error::param(
                "spec.m_list, spec.gamma_th_db_list and spec.node_policies must be nonempty",
            ));
        }
        if self.m_list.iter().any(|&m| m < 1) {
            return Err(Error::param("spec.m_list entries must be ≥ 1"));
        }
        if self.instances < 1 {
            return Err(Error::param(format!(
                "spec.instances must be ≥ 1, got {}",
                self.instances
            )));
        }
        if self.l_sub < 1 {
            return Err(Error::param(format!("spec.l_sub must be ≥ 1, got {}", self.l_sub)));
        }
        for policy in &self.node_policies {
            if policy.is_empty() || policy.iter().any(|&n| n < 1) {
                return Err(Error::param(
                    "each entry of spec.node_policies must be a nonempty set of positive counts",
                ));
            }
        }
        self.sa.validate()?;
        self.ga.validate()?;
        Ok(())
    }

    /// Environment parameters for one sweep cell.
    fn env_for(&self, gamma_th_db: f64) -> EnvParams {
        EnvParams {
            snr_threshold: db_to_linear(gamma_th_db),
            l_sub: self.l_sub,
            ..EnvParams::default()
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

// ----------------------------------------------------------------------
// Result table
// ----------------------------------------------------------------------

pub const RESULT_HEADER: &str = "instance_id,solver,m,gamma_th_db,n_policy,total_aoi_s,\
oldest_aoi_s,effective_energy_j,fly_time_s,hover_time_s,wall_seconds";

/// One solver run on one instance.  `fly_time_s` counts flight after the
/// first stop is reached (the legs inside the oldest packet's lifetime, the
/// same span `effective_energy_j` charges for); `wall_seconds` wraps the
/// solver call only and is excluded from reproducibility comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub instance_id: String,
    pub solver: String,
    pub m: usize,
    pub gamma_th_db: f64,
    pub n_policy: String,
    pub total_aoi_s: f64,
    pub oldest_aoi_s: f64,
    pub effective_energy_j: f64,
    pub fly_time_s: f64,
    pub hover_time_s: f64,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.instance_id,
            self.solver,
            self.m,
            self.gamma_th_db,
            self.n_policy,
            self.total_aoi_s,
            self.oldest_aoi_s,
            self.effective_energy_j,
            self.fly_time_s,
            self.hover_time_s,
            self.wall_seconds,
        )
    }
}

/// Header plus one line per row, `\n`-terminated.
pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(RESULT_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

pub fn write_rows_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    std::fs::write(path, rows_to_csv(rows))?;
    Ok(())
}

/// Drops the final (timing) column from every line — the form compared for
/// byte-identical reproducibility.
pub fn csv_without_timing(csv: &str) -> String {
    let mut out = String::with_capacity(csv.len());
    for line in csv.lines() {
        match line.rfind(',') {
            Some(pos) => out.push_str(&line[..pos]),
            None => out.push_str(line),
        }
        out.push('\n');
    }
    out
}

/// Splits the oldest packet's age into its flying and hovering share.
/// Returns `(fly_fraction, hover_fraction)`; the two sum to one because the
/// oldest age is exactly the hover time plus the flight time after the first
/// stop.
pub fn fly_hover_split(report: &AoiReport) -> (f64, f64) {
    let fly = report.ledger.fly_time_after_first();
    let hover = report.ledger.total_hover_time();
    (fly / report.oldest_aoi, hover / report.oldest_aoi)
}

// ----------------------------------------------------------------------
// Seed derivation
// ----------------------------------------------------------------------

/// SplitMix64 finalizer: a bijective avalanche mix.
fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic per-instance seed.  The cell id deliberately excludes the
/// SNR-threshold axis so the same cluster layout is reused across γ_th
/// values and threshold sweeps compare like with like.
pub fn instance_seed(base: u64, cell: u64, index: u64) -> u64 {
    mix(base ^ mix(cell.wrapping_add(0x9E37_79B9_7F4A_7C15)) ^ mix(index.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(1)))
}

fn layout_cell(m_index: usize, policy_index: usize) -> u64 {
    (m_index as u64) | ((policy_index as u64) << 24)
}

fn policy_label(policy: &[u32]) -> String {
    policy
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

// ----------------------------------------------------------------------
// Solver dispatch
// ----------------------------------------------------------------------

/// A solver's answer plus how long the call took.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub tour: Tour,
    pub cost: f64,
    pub wall_seconds: f64,
}

/// Runs one solver on one instance, timing the call only.
pub fn run_solver(
    choice: SolverChoice,
    scenario: &Scenario,
    grids: &[CandidateGrid],
    spec: &RunSpec,
    policy_params: Option<&PolicyParams>,
    seed: u64,
) -> Result<SolveOutcome> {
    let params = if choice.needs_policy() {
        Some(policy_params.ok_or_else(|| {
            Error::param(format!(
                "solver {} requires --checkpoint with trained policy parameters",
                choice.name()
            ))
        })?)
    } else {
        None
    };
    let started = Instant::now();
    let (tour, cost) = match choice {
        SolverChoice::TwaGreedy => {
            let decoded = policy::decode_greedy(params.unwrap(), scenario, grids)?;
            router::plan_with_order(scenario, grids, &decoded.order, spec.omega)?
        }
        SolverChoice::TwaSample => {
            let decoded = policy::decode_sample(
                params.unwrap(),
                scenario,
                grids,
                spec.width,
                mix(seed ^ 0x5A17_5EED_0CA5_CADE),
                SampleSelection::MinTotalAoi { omega: spec.omega },
            )?;
            router::plan_with_order(scenario, grids, &decoded.order, spec.omega)?
        }
        SolverChoice::TwaBeam => {
            let decoded = policy::decode_beam(params.unwrap(), scenario, grids, spec.width)?;
            router::plan_with_order(scenario, grids, &decoded.order, spec.omega)?
        }
        SolverChoice::Sa => baselines::solve_sa(scenario, grids, &spec.sa, seed)?,
        SolverChoice::Ga => baselines::solve_ga(scenario, grids, &spec.ga, seed)?,
        SolverChoice::Nn => baselines::solve_nearest_neighbor(scenario, grids)?,
        SolverChoice::Random => baselines::solve_random(scenario, grids, seed)?,
        SolverChoice::Exact => router::exact_global(scenario, grids, spec.order_cap)?,
    };
    Ok(SolveOutcome {
        tour,
        cost,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Evaluates a finished solve into a result row, re-validating the solver's
/// reported cost against the objective evaluator (relative 1e-9).
pub fn row_for(
    instance_id: &str,
    solver: &str,
    gamma_th_db: f64,
    n_policy: &str,
    scenario: &Scenario,
    grids: &[CandidateGrid],
    outcome: &SolveOutcome,
) -> Result<ResultRow> {
    let report = aoi::evaluate(&outcome.tour, scenario, grids)?;
    let rel = (report.total_aoi - outcome.cost).abs() / report.total_aoi.abs().max(f64::MIN_POSITIVE);
    if rel > 1e-9 {
        return Err(Error::contract(format!(
            "solver {solver} reported cost {} but the evaluator computed {} (relative gap {rel:.3e})",
            outcome.cost, report.total_aoi
        )));
    }
    Ok(ResultRow {
        instance_id: instance_id.to_string(),
        solver: solver.to_string(),
        m: scenario.m(),
        gamma_th_db,
        n_policy: n_policy.to_string(),
        total_aoi_s: report.total_aoi,
        oldest_aoi_s: report.oldest_aoi,
        effective_energy_j: report.ledger.effective_energy,
        fly_time_s: report.ledger.fly_time_after_first(),
        hover_time_s: report.ledger.total_hover_time(),
        wall_seconds: outcome.wall_seconds,
    })
}

// ----------------------------------------------------------------------
// Commands
// ----------------------------------------------------------------------

/// Generates and stores every instance of the sweep; returns the written
/// paths in sweep order.
pub fn cmd_gen(spec: &RunSpec) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.out_dir)?;
    let mut written = Vec::new();
    for_each_cell(spec, |cell| {
        let scenario = cell.build_scenario(spec)?;
        let path = spec.out_dir.join(format!("scenario-{}.json", cell.id));
        scenario::save_scenario(&scenario, &path)?;
        written.push(path);
        Ok(())
    })?;
    Ok(written)
}

/// Runs the training schedule; checkpoints and the metric log land in the
/// configured output directory.
pub fn cmd_train(
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    if config.out_dir.is_none() {
        return Err(Error::param(
            "training requires an output directory for checkpoints (set --out)",
        ));
    }
    training::train_with_progress(config, on_epoch)
}

/// Decodes a checkpoint across the sweep and writes `eval.csv`.
pub fn cmd_eval(spec: &RunSpec) -> Result<(PathBuf, Vec<ResultRow>)> {
    spec.validate()?;
    let checkpoint = spec.checkpoint.as_ref().ok_or_else(|| {
        Error::param("eval requires --checkpoint with trained policy parameters")
    })?;
    let params = PolicyParams::load(checkpoint)?;
    check_policy_compatibility(&params, spec)?;
    let rows = run_sweep(spec, Some(&params))?;
    std::fs::create_dir_all(&spec.out_dir)?;
    let path = spec.out_dir.join("eval.csv");
    write_rows_csv(&path, &rows)?;
    Ok((path, rows))
}

/// Runs every configured solver over the sweep and writes `bench.csv`.
pub fn cmd_bench(spec: &RunSpec) -> Result<(PathBuf, Vec<ResultRow>)> {
    spec.validate()?;
    let params = load_policy_if_needed(spec)?;
    let rows = run_sweep(spec, params.as_ref())?;
    std::fs::create_dir_all(&spec.out_dir)?;
    let path = spec.out_dir.join("bench.csv");
    write_rows_csv(&path, &rows)?;
    Ok((path, rows))
}

/// Solves a single instance — the first sweep cell, or a stored scenario
/// file — with one solver, returning the row plus the full tour and report
/// for verbose display.
pub fn cmd_solve(spec: &RunSpec, choice: SolverChoice) -> Result<(ResultRow, Tour, AoiReport)> {
    spec.validate()?;
    let params = if choice.needs_policy() {
        let checkpoint = spec.checkpoint.as_ref().ok_or_else(|| {
            Error::param(format!(
                "solver {} requires --checkpoint with trained policy parameters",
                choice.name()
            ))
        })?;
        let params = PolicyParams::load(checkpoint)?;
        check_policy_compatibility(&params, spec)?;
        Some(params)
    } else {
        None
    };

    let (scenario, id, gamma_db, n_label) = match &spec.scenario_file {
        Some(path) => {
            let scenario = scenario::load_scenario(path)?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scenario".to_string());
            let gamma_db = linear_to_db(scenario.env.snr_threshold);
            (scenario, id, gamma_db, "file".to_string())
        }
        None => {
            let cell = first_cell(spec);
            (cell.build_scenario(spec)?, cell.id.clone(), cell.gamma_th_db, cell.n_label.clone())
        }
    };
    if let Some(p) = &params {
        if p.config().l_sub != scenario.env.l_sub {
            return Err(Error::param(format!(
                "checkpoint grid resolution l_sub={} does not match the instance's l_sub={}",
                p.config().l_sub,
                scenario.env.l_sub
            )));
        }
    }
    let radius = channel::service_radius(&scenario.env)?;
    let grids = scenario.build_grids(radius)?;
    let seed = instance_seed(spec.seed, 0, 0);
    let outcome = run_solver(choice, &scenario, &grids, spec, params.as_ref(), seed)?;
    let row = row_for(&id, choice.name(), gamma_db, &n_label, &scenario, &grids, &outcome)?;
    let report = aoi::evaluate(&outcome.tour, &scenario, &grids)?;
    Ok((row, outcome.tour, report))
}

/// Mean cost and wall time per solver, in the order solvers first appear.
pub fn timing_summary(rows: &[ResultRow]) -> Vec<(String, usize, f64, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: std::collections::HashMap<&str, (usize, f64, f64)> =
        std::collections::HashMap::new();
    for row in rows {
        if !acc.contains_key(row.solver.as_str()) {
            order.push(row.solver.clone());
        }
        let slot = acc.entry(row.solver.as_str()).or_insert((0, 0.0, 0.0));
        slot.0 += 1;
        slot.1 += row.total_aoi_s;
        slot.2 += row.wall_seconds;
    }
    order
        .into_iter()
        .map(|name| {
            let (n, cost, wall) = acc[name.as_str()];
            (name, n, cost / n as f64, wall / n as f64)
        })
        .collect()
}

fn load_policy_if_needed(spec: &RunSpec) -> Result<Option<PolicyParams>> {
    if !spec.solvers.iter().any(|s| s.needs_policy()) {
        return Ok(None);
    }
    let checkpoint = spec.checkpoint.as_ref().ok_or_else(|| {
        Error::param(
            "the selected solvers include a policy decoder; supply --checkpoint",
        )
    })?;
    let params = PolicyParams::load(checkpoint)?;
    check_policy_compatibility(&params, spec)?;
    Ok(Some(params))
}

/// The checkpoint's input-scaling contract must match the instances it will
/// see; mismatches are configuration contradictions, reported field by field.
fn check_policy_compatibility(params: &PolicyParams, spec: &RunSpec) -> Result<()> {
    let config = params.config();
    if config.l_sub != spec.l_sub {
        return Err(Error::param(format!(
            "checkpoint l_sub={} contradicts spec l_sub={}",
            config.l_sub, spec.l_sub
        )));
    }
    if config.area_scale != spec.area_side {
        return Err(Error::param(format!(
            "checkpoint area_scale={} contradicts spec area_side={}",
            config.area_scale, spec.area_side
        )));
    }
    for policy in &spec.node_policies {
        if let Some(&max) = policy.iter().max() {
            if f64::from(max) > config.n_scale {
                return Err(Error::param(format!(
                    "node policy {} exceeds the checkpoint's count scale n_scale={}",
                    policy_label(policy),
                    config.n_scale
                )));
            }
        }
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Sweep iteration
// ----------------------------------------------------------------------

/// One instance of the sweep: everything needed to rebuild its scenario.
struct SweepCell {
    id: String,
    m: usize,
    gamma_th_db: f64,
    node_policy: Vec<u32>,
    n_label: String,
    layout_seed: u64,
}

impl SweepCell {
    fn build_scenario(&self, spec: &RunSpec) -> Result<Scenario> {
        generate_scenario_with(
            self.layout_seed,
            self.m,
            spec.area_side,
            &self.node_policy,
            spec.env_for(self.gamma_th_db),
            UavParams::default(),
        )
    }
}

fn cells(spec: &RunSpec) -> Vec<SweepCell> {
    let mut out = Vec::new();
    for (mi, &m) in spec.m_list.iter().enumerate() {
        for &gamma in &spec.gamma_th_db_list {
            for (pi, policy) in spec.node_policies.iter().enumerate() {
                for i in 0..spec.instances {
                    let layout_seed =
                        instance_seed(spec.seed, layout_cell(mi, pi), i as u64);
                    out.push(SweepCell {
                        id: format!("m{m:02}-g{gamma}-p{pi}-i{i:03}"),
                        m,
                        gamma_th_db: gamma,
                        node_policy: policy.clone(),
                        n_label: policy_label(policy),
                        layout_seed,
                    });
                }
            }
        }
    }
    out
}

fn first_cell(spec: &RunSpec) -> SweepCell {
    cells(spec).into_iter().next().expect("validated sweep is nonempty")
}

fn for_each_cell(spec: &RunSpec, mut f: impl FnMut(&SweepCell) -> Result<()>) -> Result<()> {
    for cell in cells(spec) {
        f(&cell)?;
    }
    Ok(())
}

/// Solves every sweep instance with every configured solver.  Instances run
/// in parallel; rows come back in sweep order so output is deterministic
/// regardless of thread count.
fn run_sweep(spec: &RunSpec, params: Option<&PolicyParams>) -> Result<Vec<ResultRow>> {
    let cells = cells(spec);
    let per_cell: Vec<Result<Vec<ResultRow>>> = cells
        .par_iter()
        .map(|cell| {
            let scenario = cell.build_scenario(spec)?;
            let radius = channel::service_radius(&scenario.env)?;
            let grids = scenario.build_grids(radius)?;
            let mut rows = Vec::with_capacity(spec.solvers.len());
            for &choice in &spec.solvers {
                let outcome =
                    run_solver(choice, &scenario, &grids, spec, params, cell.layout_seed)?;
                rows.push(row_for(
                    &cell.id,
                    choice.name(),
                    cell.gamma_th_db,
                    &cell.n_label,
                    &scenario,
                    &grids,
                    &outcome,
                )?);
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::with_capacity(cells.len() * spec.solvers.len());
    for cell_rows in per_cell {
        rows.extend(cell_rows?);
    }
    Ok(rows)
}

// ----------------------------------------------------------------------
// Plot data
// ----------------------------------------------------------------------

/// Which result column a plot series runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotAxis {
    M,
    GammaThDb,
    NPolicy,
}

impl PlotAxis {
    fn column(self) -> usize {
        match self {
            PlotAxis::M => 2,
            PlotAxis::GammaThDb => 3,
            PlotAxis::NPolicy => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            PlotAxis::M => "m",
            PlotAxis::GammaThDb => "gamma",
            PlotAxis::NPolicy => "n",
        }
    }
}

impl FromStr for PlotAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(PlotAxis::M),
            "gamma" => Ok(PlotAxis::GammaThDb),
            "n" => Ok(PlotAxis::NPolicy),
            other => Err(Error::param(format!(
                "unknown plot axis {other:?}; expected m, gamma or n"
            ))),
        }
    }
}

/// Reduces a result table to per-solver mean-total-AoI series over one sweep
/// axis and writes one small x/y CSV per solver
/// (`plot-<axis>-<solver>.csv`).  Returns the written paths.
pub fn cmd_plotdata(results_csv: &Path, axis: PlotAxis, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(results_csv)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == RESULT_HEADER => {}
        other => {
            return Err(Error::Schema {
                field: "header".to_string(),
                message: format!(
                    "expected the result-table header, found {:?}",
                    other.unwrap_or("")
                ),
            });
        }
    }

    // (solver, x) → (sum, count), plus first-appearance orders for output.
    let mut solver_order: Vec<String> = Vec::new();
    let mut x_order: Vec<String> = Vec::new();
    let mut acc: std::collections::HashMap<(String, String), (f64, usize)> =
        std::collections::HashMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Schema {
                field: format!("line {}", lineno + 2),
                message: format!("expected 11 comma-separated fields, found {}", fields.len()),
            });
        }
        let solver = fields[1].to_string();
        let x = fields[axis.column()].to_string();
        let y: f64 = fields[5].parse().map_err(|_| Error::Schema {
            field: format!("line {}, total_aoi_s", lineno + 2),
            message: format!("not a number: {:?}", fields[5]),
        })?;
        if !solver_order.contains(&solver) {
            solver_order.push(solver.clone());
        }
        if !x_order.contains(&x) {
            x_order.push(x);
        }
        let slot = acc
            .entry((solver, fields[axis.column()].to_string()))
            .or_insert((0.0, 0));
        slot.0 += y;
        slot.1 += 1;
    }

    // Sort x numerically when every value parses, lexicographically otherwise.
    let numeric: Option<Vec<f64>> = x_order.iter().map(|x| x.parse::<f64>().ok()).collect();
    match numeric {
        Some(values) => {
            let mut keyed: Vec<(f64, String)> =
                values.into_iter().zip(x_order.iter().cloned()).collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
            x_order = keyed.into_iter().map(|(_, x)| x).collect();
        }
        None => x_order.sort(),
    }

    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for solver in &solver_order {
        let mut body = String::from("x,mean_total_aoi_s\n");
        for x in &x_order {
            if let Some(&(sum, count)) = acc.get(&(solver.clone(), x.clone())) {
                body.push_str(&format!("{},{}\n", x, sum / count as f64));
            }
        }
        let path = out_dir.join(format!("plot-{}-{}.csv", axis.label(), solver));
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

// ----------------------------------------------------------------------
// Process-level knobs
// ----------------------------------------------------------------------

/// Applies the `AOI_LAB_THREADS` cap to the global worker pool.  Output is
/// deterministic regardless; the cap only bounds resource use.  A pool that
/// was already initialized is left as-is.
pub fn configure_threads_from_env() -> Result<()> {
    let raw = match std::env::var("AOI_LAB_THREADS") {
        Ok(v) => v,
        Err(_) => return Ok(()),
    };
    let threads: usize = raw.trim().parse().map_err(|_| {
        Error::param(format!(
            "AOI_LAB_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    if threads == 0 {
        return Err(Error::param("AOI_LAB_THREADS must be at least 1"));
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

/// Process exit code for an error: I/O failures map to 4, infeasible
/// instances to 3, everything else (validation, schema, contract, numeric)
/// to 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 4,
        Error::Infeasible(_) => 3,
        _ => 2,
    }
}
