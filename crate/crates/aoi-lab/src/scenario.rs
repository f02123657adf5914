//! Problem instances: environment/radio constants, UAV constants, cluster
//! layouts, deterministic generation, JSON round-tripping, and the candidate
//! hovering-point grids carved out of each cluster's service disk.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point2, Point3};

/// Environment and radio-link constants.
///
/// Angles entering the line-of-sight model are in degrees; `noise_power` is
/// stored in watts (any dBm conversion happens at the CLI boundary), and
/// `snr_threshold` is a linear ratio, not dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    /// LoS-probability S-curve offset, degrees.
    pub beta: f64,
    /// LoS-probability S-curve steepness, per degree.
    pub beta_tilde: f64,
    /// Excess path loss under line-of-sight, dB.
    pub xi_los: f64,
    /// Excess path loss under non-line-of-sight, dB.
    pub xi_nlos: f64,
    /// Carrier frequency, Hz.
    pub carrier_freq: f64,
    /// Propagation speed used in the free-space term, m/s.
    pub light_speed: f64,
    /// Receiver noise power, W.
    pub noise_power: f64,
    /// Cluster-head transmit power, W.
    pub ch_tx_power: f64,
    /// Minimum acceptable SNR, linear ratio.
    pub snr_threshold: f64,
    /// Channel bandwidth, Hz.
    pub bandwidth: f64,
    /// Status-update packet size, bits.
    pub packet_bits: f64,
    /// Sensor time-slot length, s.
    pub slot_seconds: f64,
    /// UAV flight altitude, m.
    pub altitude: f64,
    /// Grid resolution: each service disk is sampled on an l_sub × l_sub grid.
    pub l_sub: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            beta: 12.08,
            beta_tilde: 0.11,
            xi_los: 1.0,
            xi_nlos: 20.0,
            carrier_freq: 2.0e9,
            light_speed: 3.0e8,
            noise_power: 1.0e-14, // -110 dBm
            ch_tx_power: 0.1,
            snr_threshold: 100.0, // 20 dB
            bandwidth: 1.0e6,
            packet_bits: 5.0e6,
            slot_seconds: 0.1,
            altitude: 100.0,
            l_sub: 5,
        }
    }
}

impl EnvParams {
    /// Checks positivity and ordering constraints; names the offending field.
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("env.beta", self.beta),
            ("env.beta_tilde", self.beta_tilde),
            ("env.xi_los", self.xi_los),
            ("env.xi_nlos", self.xi_nlos),
            ("env.carrier_freq", self.carrier_freq),
            ("env.light_speed", self.light_speed),
            ("env.noise_power", self.noise_power),
            ("env.ch_tx_power", self.ch_tx_power),
            ("env.snr_threshold", self.snr_threshold),
            ("env.bandwidth", self.bandwidth),
            ("env.packet_bits", self.packet_bits),
            ("env.slot_seconds", self.slot_seconds),
            ("env.altitude", self.altitude),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Schema {
                    field: name.to_string(),
                    message: format!("must be a positive finite number, got {v}"),
                });
            }
        }
        if self.l_sub < 1 {
            return Err(Error::Schema {
                field: "env.l_sub".to_string(),
                message: "must be at least 1".to_string(),
            });
        }
        if self.xi_los >= self.xi_nlos {
            return Err(Error::Schema {
                field: "env.xi_los".to_string(),
                message: format!(
                    "excess LoS loss ({}) must be below excess NLoS loss ({})",
                    self.xi_los, self.xi_nlos
                ),
            });
        }
        if self.snr_threshold <= 1.0 {
            return Err(Error::Schema {
                field: "env.snr_threshold".to_string(),
                message: format!("must exceed 1 (0 dB), got {}", self.snr_threshold),
            });
        }
        Ok(())
    }
}

/// Rotary-wing UAV constants: cruise speed, propulsion-power coefficients and
/// the communication power drawn while receiving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UavParams {
    /// Cruise speed, m/s.
    pub speed: f64,
    /// Blade profile power in hover, W.
    pub p0: f64,
    /// Induced power in hover, W.
    pub p1: f64,
    /// Rotor blade tip speed, m/s.
    pub u_tip: f64,
    /// Mean rotor induced velocity in hover, m/s.
    pub v0: f64,
    /// Fuselage drag ratio.
    pub d0: f64,
    /// Air density, kg/m³.
    pub rho: f64,
    /// Rotor solidity.
    pub s0: f64,
    /// Rotor disk area, m².
    pub delta: f64,
    /// Power drawn by the receiver while collecting data, W.
    pub p_com: f64,
}

impl Default for UavParams {
    fn default() -> Self {
        UavParams {
            speed: 15.0,
            p0: 99.66,
            p1: 120.16,
            u_tip: 120.0,
            v0: 0.002,
            d0: 0.48,
            rho: 1.225,
            s0: 0.0001,
            delta: 0.5,
            p_com: 0.1,
        }
    }
}

impl UavParams {
    /// Power required to hover, W.
    pub fn hover_power(&self) -> f64 {
        self.p0 + self.p1
    }

    /// Checks positivity; names the offending field.
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("uav.speed", self.speed),
            ("uav.p0", self.p0),
            ("uav.p1", self.p1),
            ("uav.u_tip", self.u_tip),
            ("uav.v0", self.v0),
            ("uav.d0", self.d0),
            ("uav.rho", self.rho),
            ("uav.s0", self.s0),
            ("uav.delta", self.delta),
            ("uav.p_com", self.p_com),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Schema {
                    field: name.to_string(),
                    message: format!("must be a positive finite number, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// One ground cluster: the cluster head's ground-plane position and the
/// number of ordinary sensor nodes it aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundCluster {
    /// Cluster-head ground position, m.
    pub ch: Point2,
    /// Number of ordinary sensor nodes in the cluster.
    #[serde(rename = "n")]
    pub node_count: u32,
}

impl GroundCluster {
    /// The point at altitude `h` directly above the cluster head — the center
    /// of the service disk.
    pub fn disk_center(&self, h: f64) -> Point3 {
        self.ch.at_altitude(h)
    }
}

/// A complete problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Seed the instance was generated from (0 for hand-built instances).
    pub seed: u64,
    /// UAV start/return point, at flight altitude.
    pub start: Point3,
    pub env: EnvParams,
    pub uav: UavParams,
    pub clusters: Vec<GroundCluster>,
}

/// On-disk wrapper adding the schema version.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    version: u32,
    seed: u64,
    start: Point3,
    env: EnvParams,
    uav: UavParams,
    clusters: Vec<GroundCluster>,
}

const SCENARIO_SCHEMA_VERSION: u32 = 1;

impl Scenario {
    /// Number of clusters M.
    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of ordinary nodes across all clusters.
    pub fn total_nodes(&self) -> u64 {
        self.clusters.iter().map(|c| u64::from(c.node_count)).sum()
    }

    /// Structural validation; names the offending field on failure.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.uav.validate()?;
        if self.clusters.is_empty() {
            return Err(Error::Schema {
                field: "clusters".to_string(),
                message: "at least one cluster is required".to_string(),
            });
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.node_count < 1 {
                return Err(Error::Schema {
                    field: format!("clusters[{i}].n"),
                    message: "node count must be at least 1".to_string(),
                });
            }
            if !c.ch.is_finite() {
                return Err(Error::Schema {
                    field: format!("clusters[{i}].ch"),
                    message: "coordinates must be finite".to_string(),
                });
            }
        }
        if !self.start.is_finite() {
            return Err(Error::Schema {
                field: "start".to_string(),
                message: "coordinates must be finite".to_string(),
            });
        }
        if self.start.z != self.env.altitude {
            return Err(Error::Schema {
                field: "start".to_string(),
                message: format!(
                    "start altitude {} must equal env.altitude {}",
                    self.start.z, self.env.altitude
                ),
            });
        }
        Ok(())
    }

    /// Builds one candidate grid per cluster for a common service radius.
    pub fn build_grids(&self, service_radius: f64) -> Result<Vec<CandidateGrid>> {
        self.clusters
            .iter()
            .enumerate()
            .map(|(i, c)| build_candidate_grid(c, i, service_radius, self.env.l_sub, self.env.altitude))
            .collect()
    }
}

/// Generates a scenario with default environment/UAV constants: cluster heads
/// i.i.d. uniform over `[0, area_side]²`, node counts drawn uniformly from
/// `node_count_choices`, start point at the origin corner at flight altitude.
pub fn generate_scenario(
    seed: u64,
    m: usize,
    area_side: f64,
    node_count_choices: &[u32],
) -> Result<Scenario> {
    generate_scenario_with(
        seed,
        m,
        area_side,
        node_count_choices,
        EnvParams::default(),
        UavParams::default(),
    )
}

/// As [`generate_scenario`] but with explicit constants.
///
/// Positions and node counts are drawn from two independent sub-streams of a
/// counter-based generator, so adding draws to one stream never perturbs the
/// other.
pub fn generate_scenario_with(
    seed: u64,
    m: usize,
    area_side: f64,
    node_count_choices: &[u32],
    env: EnvParams,
    uav: UavParams,
) -> Result<Scenario> {
    if m < 1 {
        return Err(Error::param(format!("cluster count m must be ≥ 1, got {m}")));
    }
    if !(area_side > 0.0) || !area_side.is_finite() {
        return Err(Error::param(format!(
            "area_side must be a positive finite length, got {area_side}"
        )));
    }
    if node_count_choices.is_empty() {
        return Err(Error::param("node_count_choices must be nonempty"));
    }
    if let Some(bad) = node_count_choices.iter().find(|&&n| n < 1) {
        return Err(Error::param(format!(
            "node counts must be ≥ 1, got {bad} in node_count_choices"
        )));
    }
    env.validate()?;
    uav.validate()?;

    let mut pos_rng = ChaCha8Rng::seed_from_u64(seed);
    pos_rng.set_stream(0);
    let mut count_rng = ChaCha8Rng::seed_from_u64(seed);
    count_rng.set_stream(1);

    let clusters = (0..m)
        .map(|_| {
            let x = pos_rng.random_range(0.0..area_side);
            let y = pos_rng.random_range(0.0..area_side);
            let node_count = node_count_choices[count_rng.random_range(0..node_count_choices.len())];
            GroundCluster {
                ch: Point2::new(x, y),
                node_count,
            }
        })
        .collect();

    Ok(Scenario {
        seed,
        start: Point3::new(0.0, 0.0, env.altitude),
        env,
        uav,
        clusters,
    })
}

/// The sampled hovering-point candidates of one cluster: at most
/// `l_sub²` points at flight altitude, all within `radius` of the point above
/// the cluster head.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub cluster_index: usize,
    pub points: Vec<Point3>,
    /// Service radius the grid was built for, m.
    pub radius: f64,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Number of sub-cells per axis used to integrate the centroid of a cell that
/// only partially overlaps the disk.
const CENTROID_QUADRATURE: usize = 64;

/// Candidate offsets for the unit disk, cached per grid resolution.
///
/// The bounding square `[-1, 1]²` is split into `l_sub²` equal cells.  Cells
/// fully inside the disk contribute their centers; cells partially covering
/// the disk contribute the centroid of the covered region (midpoint-rule
/// quadrature); cells that miss the disk are dropped.  For odd `l_sub` the
/// middle cell's center is the exact origin, so the disk center is always
/// among the candidates.
fn unit_offsets(l_sub: usize) -> Arc<Vec<Point2>> {
    static CACHE: OnceLock<Mutex<BTreeMap<usize, Arc<Vec<Point2>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut guard = cache.lock().expect("offset cache poisoned");
    guard
        .entry(l_sub)
        .or_insert_with(|| Arc::new(compute_unit_offsets(l_sub)))
        .clone()
}

fn compute_unit_offsets(l_sub: usize) -> Vec<Point2> {
    if l_sub == 1 {
        // The single cell covers the whole disk; its covered-region centroid
        // is the disk center by symmetry.
        return vec![Point2::new(0.0, 0.0)];
    }
    let l = l_sub as f64;
    let mut offsets = Vec::new();
    for iy in 0..l_sub {
        for ix in 0..l_sub {
            let x_lo = (2.0 * ix as f64 - l) / l;
            let x_hi = (2.0 * (ix + 1) as f64 - l) / l;
            let y_lo = (2.0 * iy as f64 - l) / l;
            let y_hi = (2.0 * (iy + 1) as f64 - l) / l;

            // Nearest point of the cell to the origin: outside the disk means
            // the intersection is empty (a grazing tangent has zero area).
            let nx = x_lo.max(0.0_f64.min(x_hi));
            let ny = y_lo.max(0.0_f64.min(y_hi));
            if nx * nx + ny * ny >= 1.0 {
                continue;
            }
            // Farthest corner inside the disk means the whole cell is inside.
            let fx = x_lo.abs().max(x_hi.abs());
            let fy = y_lo.abs().max(y_hi.abs());
            if fx * fx + fy * fy <= 1.0 {
                offsets.push(Point2::new((x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0));
                continue;
            }
            // Partial overlap: centroid of cell ∩ disk by midpoint quadrature.
            // Every accepted sample lies inside the disk, so the average does
            // too (convexity); accuracy is a few permille of the cell size.
            let q = CENTROID_QUADRATURE;
            let (mut sx, mut sy, mut count) = (0.0, 0.0, 0u64);
            let wx = (x_hi - x_lo) / q as f64;
            let wy = (y_hi - y_lo) / q as f64;
            for a in 0..q {
                let x = x_lo + (a as f64 + 0.5) * wx;
                for b in 0..q {
                    let y = y_lo + (b as f64 + 0.5) * wy;
                    if x * x + y * y <= 1.0 {
                        sx += x;
                        sy += y;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                offsets.push(Point2::new(sx / count as f64, sy / count as f64));
            }
        }
    }
    offsets
}

/// Builds the candidate hovering-point grid of one cluster.
///
/// The grid construction is scale-invariant: offsets are computed once per
/// resolution on the unit disk and scaled by `service_radius`, which keeps
/// grids for equal radii bit-identical across clusters and calls.
pub fn build_candidate_grid(
    cluster: &GroundCluster,
    cluster_index: usize,
    service_radius: f64,
    l_sub: usize,
    altitude: f64,
) -> Result<CandidateGrid> {
    if !(service_radius > 0.0) || !service_radius.is_finite() {
        return Err(Error::param(format!(
            "service_radius must be positive and finite, got {service_radius}"
        )));
    }
    if l_sub < 1 {
        return Err(Error::param(format!("l_sub must be ≥ 1, got {l_sub}")));
    }
    let offsets = unit_offsets(l_sub);
    let points = offsets
        .iter()
        .map(|o| {
            Point3::new(
                cluster.ch.x + service_radius * o.x,
                cluster.ch.y + service_radius * o.y,
                altitude,
            )
        })
        .collect();
    Ok(CandidateGrid {
        cluster_index,
        points,
        radius: service_radius,
    })
}

/// Writes a scenario as versioned, pretty-printed JSON.
pub fn save_scenario(s: &Scenario, path: &Path) -> Result<()> {
    let file = ScenarioFile {
        version: SCENARIO_SCHEMA_VERSION,
        seed: s.seed,
        start: s.start,
        env: s.env.clone(),
        uav: s.uav.clone(),
        clusters: s.clusters.clone(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::contract(format!("scenario serialization failed: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Reads a scenario, reporting the offending field path on schema errors.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let file: ScenarioFile = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = match e.path().to_string().as_str() {
            "." => "(document root)".to_string(),
            p => p.to_string(),
        };
        Error::Schema {
            field,
            message: e.inner().to_string(),
        }
    })?;
    if file.version != SCENARIO_SCHEMA_VERSION {
        return Err(Error::Schema {
            field: "version".to_string(),
            message: format!(
                "unsupported schema version {} (expected {})",
                file.version, SCENARIO_SCHEMA_VERSION
            ),
        });
    }
    let scenario = Scenario {
        seed: file.seed,
        start: file.start,
        env: file.env,
        uav: file.uav,
        clusters: file.clusters,
    };
    scenario.validate()?;
    Ok(scenario)
}
