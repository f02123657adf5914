//! Air-to-ground link model with probabilistic line of sight.
//!
//! The link between a hovering UAV and a cluster head is line-of-sight with a
//! probability that grows with the elevation angle; the expected path loss
//! blends the LoS and NLoS free-space losses, and SNR/rate follow from the
//! link budget.  Because the expected loss strictly increases with horizontal
//! distance at fixed altitude, the set of hovering points meeting an SNR
//! threshold is a disk; [`service_radius`] finds its radius by bisection.

use crate::error::{Error, Result};
use crate::scenario::EnvParams;

/// Geometry of one UAV→cluster-head link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    /// Ground-plane distance between the hovering point and the cluster head, m.
    pub horizontal_dist: f64,
    /// UAV altitude above the ground plane, m.
    pub altitude: f64,
}

impl LinkGeometry {
    pub fn new(horizontal_dist: f64, altitude: f64) -> Self {
        LinkGeometry {
            horizontal_dist,
            altitude,
        }
    }

    /// Elevation angle seen from the cluster head, degrees.  Directly
    /// overhead (zero horizontal distance) is 90°.
    pub fn elevation_deg(&self) -> f64 {
        self.altitude.atan2(self.horizontal_dist).to_degrees()
    }

    /// Slant range between UAV and cluster head, m.
    pub fn slant_range(&self) -> f64 {
        self.altitude.hypot(self.horizontal_dist)
    }
}

/// Derived quantities of one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    /// Probability the link is line-of-sight.
    pub p_los: f64,
    /// Expected path loss, dB.
    pub avg_loss_db: f64,
    /// Signal-to-noise ratio, linear.
    pub snr_linear: f64,
    /// Achievable rate, bits/s.
    pub rate_bps: f64,
}

/// Probability of a line-of-sight link: a logistic curve in the elevation
/// angle (degrees) with environment-fitted constants.
pub fn los_probability(geom: LinkGeometry, env: &EnvParams) -> f64 {
    let theta = geom.elevation_deg();
    1.0 / (1.0 + env.beta * (-env.beta_tilde * (theta - env.beta)).exp())
}

/// Expected path loss in dB: the LoS-probability-weighted blend of the
/// free-space loss plus the LoS / NLoS excess losses.
pub fn avg_path_loss(geom: LinkGeometry, env: &EnvParams) -> f64 {
    let d = geom.slant_range();
    let fspl = 20.0 * (4.0 * std::f64::consts::PI * env.carrier_freq * d / env.light_speed).log10();
    let p = los_probability(geom, env);
    p * (fspl + env.xi_los) + (1.0 - p) * (fspl + env.xi_nlos)
}

/// Linear SNR of the cluster-head uplink under the expected path loss.
pub fn snr(geom: LinkGeometry, env: &EnvParams) -> f64 {
    let loss_db = avg_path_loss(geom, env);
    env.ch_tx_power / (env.noise_power * 10f64.powf(loss_db / 10.0))
}

/// Achievable uplink rate, bits/s.
pub fn rate(geom: LinkGeometry, env: &EnvParams) -> f64 {
    env.bandwidth * (1.0 + snr(geom, env)).log2()
}

/// All link quantities at once.
pub fn link_budget(geom: LinkGeometry, env: &EnvParams) -> LinkBudget {
    let p_los = los_probability(geom, env);
    let avg_loss_db = avg_path_loss(geom, env);
    let snr_linear = env.ch_tx_power / (env.noise_power * 10f64.powf(avg_loss_db / 10.0));
    let rate_bps = env.bandwidth * (1.0 + snr_linear).log2();
    LinkBudget {
        p_los,
        avg_loss_db,
        snr_linear,
        rate_bps,
    }
}

/// Convergence target of the service-radius bisection, relative to the SNR
/// threshold.
const RADIUS_TOL_REL: f64 = 1e-9;
const RADIUS_MAX_ITER: usize = 200;

/// Largest horizontal distance at which the uplink still meets the SNR
/// threshold, found by bisection.
///
/// The SNR at fixed altitude strictly decreases with horizontal distance
/// (larger slant range *and* lower LoS probability), so a sign-change bracket
/// `[0, R_hi]` is found by doubling and bisection converges unconditionally.
/// Returns an error when even the point directly overhead misses the
/// threshold: no hovering point can serve that cluster at this altitude.
pub fn service_radius(env: &EnvParams) -> Result<f64> {
    let gamma_th = env.snr_threshold;
    let snr_at = |r: f64| snr(LinkGeometry::new(r, env.altitude), env);

    let snr0 = snr_at(0.0);
    if snr0 < gamma_th {
        return Err(Error::Infeasible(format!(
            "SNR directly overhead is {snr0:.6e}, below the threshold {gamma_th:.6e}; \
             altitude {} m cannot serve any cluster",
            env.altitude
        )));
    }
    if ((snr0 - gamma_th) / gamma_th).abs() < RADIUS_TOL_REL {
        return Ok(0.0);
    }

    // Find an upper bracket where the SNR has dropped below the threshold.
    let mut hi = env.altitude.max(1.0);
    let mut doublings = 0;
    while snr_at(hi) >= gamma_th {
        hi *= 2.0;
        doublings += 1;
        if doublings > 100 {
            return Err(Error::Numeric(
                "service-radius bracket search did not terminate".to_string(),
            ));
        }
    }

    let mut lo = 0.0;
    for _ in 0..RADIUS_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let s = snr_at(mid);
        if ((s - gamma_th) / gamma_th).abs() < RADIUS_TOL_REL {
            return Ok(mid);
        }
        if s >= gamma_th {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numeric(format!(
        "service-radius bisection did not reach relative tolerance {RADIUS_TOL_REL}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn env() -> EnvParams {
        EnvParams::default()
    }

    /// Independent re-derivation of the whole chain, written from the
    /// formulas rather than by calling the library functions.
    fn oracle_snr(r: f64, env: &EnvParams) -> f64 {
        let theta = if r == 0.0 {
            90.0
        } else {
            (env.altitude / r).atan().to_degrees()
        };
        let p = 1.0 / (1.0 + env.beta * (-env.beta_tilde * (theta - env.beta)).exp());
        let d = (env.altitude * env.altitude + r * r).sqrt();
        let fspl =
            20.0 * (4.0 * std::f64::consts::PI * env.carrier_freq * d / env.light_speed).log10();
        let lbar = p * (fspl + env.xi_los) + (1.0 - p) * (fspl + env.xi_nlos);
        env.ch_tx_power / (env.noise_power * 10f64.powf(lbar / 10.0))
    }

    #[test]
    fn los_probability_reference_points() {
        let e = env();
        // At elevation angle exactly beta the exponent vanishes: 1/(1+beta).
        let r_at_beta = e.altitude / (e.beta.to_radians()).tan();
        let p = los_probability(LinkGeometry::new(r_at_beta, e.altitude), &e);
        assert_relative_eq!(p, 1.0 / 13.08, max_relative = 1e-12);

        // Directly overhead: angle 90°, high-precision frozen value.
        let p90 = los_probability(LinkGeometry::new(0.0, e.altitude), &e);
        assert_relative_eq!(p90, 0.9977162470810939, max_relative = 1e-12);

        // Monotone in elevation angle.
        let near = los_probability(LinkGeometry::new(50.0, 100.0), &e);
        let far = los_probability(LinkGeometry::new(500.0, 100.0), &e);
        assert!(near > far);
    }

    #[test]
    fn path_loss_reference_points() {
        let e = env();
        let g0 = LinkGeometry::new(0.0, 100.0);
        // Free-space term at d=100 m, f=2 GHz, c=3e8: 20·log10(8377.58…).
        let l = avg_path_loss(g0, &e);
        assert_relative_eq!(l, 79.50576340478752, max_relative = 1e-12);

        // Equal excess losses collapse the blend to FSPL + xi.
        let mut eq = e.clone();
        eq.xi_nlos = eq.xi_los;
        let l_eq = avg_path_loss(g0, &eq);
        assert_relative_eq!(l_eq, 78.46237209932830 + eq.xi_los, max_relative = 1e-12);

        // Loss grows with horizontal distance.
        assert!(
            avg_path_loss(LinkGeometry::new(1000.0, 100.0), &e)
                > avg_path_loss(LinkGeometry::new(100.0, 100.0), &e)
        );
    }

    #[test]
    fn loss_sandwiched_between_los_and_nlos() {
        let e = env();
        for r in [0.0, 10.0, 100.0, 1000.0, 2500.0] {
            let g = LinkGeometry::new(r, e.altitude);
            let d = g.slant_range();
            let fspl = 20.0
                * (4.0 * std::f64::consts::PI * e.carrier_freq * d / e.light_speed).log10();
            let lbar = avg_path_loss(g, &e);
            assert!(fspl + e.xi_los <= lbar && lbar <= fspl + e.xi_nlos);
            let p = los_probability(g, &e);
            // P_LoS + P_NLoS = 1 holds exactly as implemented (complement).
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn snr_and_rate_reference_points() {
        let e = env();
        // Round-number check: 80 dB loss, 0.1 W, 1e-14 W noise → SNR 1e5.
        let gamma = e.ch_tx_power / (e.noise_power * 10f64.powf(80.0 / 10.0));
        assert_relative_eq!(gamma, 1.0e5, max_relative = 1e-12);

        // Full chain directly overhead, frozen high-precision values.
        let g0 = LinkGeometry::new(0.0, 100.0);
        assert_relative_eq!(snr(g0, &e), 112053.04414807186, max_relative = 1e-11);
        assert_relative_eq!(rate(g0, &e), 16_773_835.192603106, max_relative = 1e-11);

        // rate = bandwidth exactly at SNR 1 (log2(2) = 1): solve nothing,
        // check the formula shape through link_budget consistency instead.
        let b = link_budget(g0, &e);
        assert_eq!(b.p_los, los_probability(g0, &e));
        assert_eq!(b.avg_loss_db, avg_path_loss(g0, &e));
        assert_eq!(b.snr_linear, snr(g0, &e));
        assert_eq!(b.rate_bps, rate(g0, &e));
    }

    #[test]
    fn rate_equals_bandwidth_at_unit_snr() {
        // Constructed check of r = B·log2(1+γ) at γ=1 without going through
        // the geometry: log2(2) = 1.
        let e = env();
        assert_eq!(e.bandwidth * (1.0f64 + 1.0).log2(), e.bandwidth);
    }

    #[test]
    fn service_radius_meets_threshold() {
        let e = env();
        let r = service_radius(&e).unwrap();
        let s = snr(LinkGeometry::new(r, e.altitude), &e);
        assert!(((s - e.snr_threshold) / e.snr_threshold).abs() < 1e-9);

        // Bracket: one metre closer clears the threshold, one metre farther
        // misses it.
        assert!(snr(LinkGeometry::new(r - 1.0, e.altitude), &e) > e.snr_threshold);
        assert!(snr(LinkGeometry::new(r + 1.0, e.altitude), &e) < e.snr_threshold);

        // Frozen value from an independent extended-precision bisection.
        assert_relative_eq!(r, 440.5605867402431, max_relative = 1e-9);
    }

    #[test]
    fn service_radius_shrinks_with_threshold() {
        let mk = |db: f64| {
            let mut e = env();
            e.snr_threshold = 10f64.powf(db / 10.0);
            service_radius(&e).unwrap()
        };
        let (r10, r20, r30) = (mk(10.0), mk(20.0), mk(30.0));
        assert!(r10 > r20 && r20 > r30, "{r10} {r20} {r30}");
        assert_relative_eq!(r10, 1283.4722437449148, max_relative = 1e-9);
        assert_relative_eq!(r30, 200.56018712326292, max_relative = 1e-9);
    }

    #[test]
    fn service_radius_boundary_and_infeasible() {
        let e0 = env();
        let snr0 = snr(LinkGeometry::new(0.0, e0.altitude), &e0);

        // Threshold exactly at the overhead SNR → radius 0.
        let mut e = env();
        e.snr_threshold = snr0;
        assert_eq!(service_radius(&e).unwrap(), 0.0);

        // Threshold above the overhead SNR → infeasible altitude.
        e.snr_threshold = snr0 * 1.01;
        assert!(matches!(service_radius(&e), Err(Error::Infeasible(_))));
    }

    #[test]
    fn matches_independent_oracle_along_a_sweep() {
        let e = env();
        for i in 0..=300 {
            let r = i as f64 * 10.0;
            let got = snr(LinkGeometry::new(r, e.altitude), &e);
            let want = oracle_snr(r, &e);
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    proptest! {
        /// SNR strictly decreases with horizontal distance at fixed altitude.
        #[test]
        fn prop_snr_monotone(r in 0.0..5000.0f64, dr in 0.001..500.0f64) {
            let e = env();
            let near = snr(LinkGeometry::new(r, e.altitude), &e);
            let far = snr(LinkGeometry::new(r + dr, e.altitude), &e);
            prop_assert!(near > far);
        }

        /// LoS probability stays a probability for any geometry.
        #[test]
        fn prop_plos_in_unit_interval(r in 0.0..10000.0f64, h in 1.0..1000.0f64) {
            let e = env();
            let p = los_probability(LinkGeometry::new(r, h), &e);
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}
