//! Absorbing sets and within-step boundary-crossing detection.
//!
//! An absorbing set is a union of axis-aligned half-spaces, optionally
//! together with the complement of the sampling box (domain-exit killing).
//! Checking only step endpoints misses excursions that cross a boundary and
//! come back within one step; the bridge correction kills such steps with
//! the crossing probability of a Brownian bridge pinned at the two
//! endpoints,
//!
//! `p = exp(-2 (z - x)(z - y) / (dt phi^2))`,
//!
//! where `z` is the boundary, `x`, `y` the endpoint coordinates on that
//! axis, and `phi` the noise strength. With a constant diffusion, `phi` is
//! the diffusion coefficient at the step start; where the diffusion vanishes
//! at the boundary, a sharper strength `phi^2 = min(g(x̂), g(ŷ)) / 3` is
//! used, with `g` the squared diffusion coefficient at the full endpoint
//! states.

use crate::error::{Error, Result};
use crate::sde::{RngStream, SdeModel};

/// Which side of the threshold is absorbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Absorbed when `x[axis] <= threshold`.
    Below,
    /// Absorbed when `x[axis] >= threshold`.
    Above,
}

/// One absorbing half-space, `{ x : x[axis] <= t }` or `{ x : x[axis] >= t }`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace {
    pub axis: usize,
    pub side: Side,
    pub threshold: f64,
}

impl HalfSpace {
    pub fn below(axis: usize, threshold: f64) -> Self {
        HalfSpace {
            axis,
            side: Side::Below,
            threshold,
        }
    }

    pub fn above(axis: usize, threshold: f64) -> Self {
        HalfSpace {
            axis,
            side: Side::Above,
            threshold,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self.side {
            Side::Below => x[self.axis] <= self.threshold,
            Side::Above => x[self.axis] >= self.threshold,
        }
    }

    /// Signed coordinate relative to the threshold, positive on the
    /// surviving side.
    pub(crate) fn clearance(&self, x: &[f64]) -> f64 {
        match self.side {
            Side::Below => x[self.axis] - self.threshold,
            Side::Above => self.threshold - x[self.axis],
        }
    }
}

/// Within-step crossing detection policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BridgePolicy {
    /// Endpoint checks only.
    #[default]
    Off,
    /// Bridge strength from the diffusion coefficient at the step start.
    ConstantSigma,
    /// Bridge strength `min(g(x̂), g(ŷ)) / 3` for diffusions vanishing at
    /// the boundary.
    ModifiedVanishing,
}

/// The absorbing set of a killed diffusion.
#[derive(Debug, Clone, Default)]
pub struct AbsorbingSpec {
    half_spaces: Vec<HalfSpace>,
    exit_box: Option<(Vec<f64>, Vec<f64>)>,
    bridge: BridgePolicy,
}

impl AbsorbingSpec {
    pub fn from_half_spaces(half_spaces: Vec<HalfSpace>) -> Self {
        AbsorbingSpec {
            half_spaces,
            exit_box: None,
            bridge: BridgePolicy::Off,
        }
    }

    /// No absorption at all (reflected or free dynamics).
    pub fn none() -> Self {
        AbsorbingSpec::default()
    }

    /// Additionally kill on leaving the box `[lower, upper]`.
    pub fn with_domain_exit(mut self, lower: &[f64], upper: &[f64]) -> Self {
        self.exit_box = Some((lower.to_vec(), upper.to_vec()));
        self
    }

    pub fn with_bridge(mut self, bridge: BridgePolicy) -> Self {
        self.bridge = bridge;
        self
    }

    pub fn bridge(&self) -> BridgePolicy {
        self.bridge
    }

    pub fn half_spaces(&self) -> &[HalfSpace] {
        &self.half_spaces
    }

    pub fn kills_on_domain_exit(&self) -> bool {
        self.exit_box.is_some()
    }

    pub fn exit_box(&self) -> Option<(&[f64], &[f64])> {
        self.exit_box
            .as_ref()
            .map(|(lo, hi)| (lo.as_slice(), hi.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.half_spaces.is_empty() && self.exit_box.is_none()
    }
}

/// Whether `x` lies in the absorbing set.
pub fn is_absorbed(spec: &AbsorbingSpec, x: &[f64]) -> bool {
    if spec.half_spaces.iter().any(|hs| hs.contains(x)) {
        return true;
    }
    if let Some((lower, upper)) = &spec.exit_box {
        for k in 0..lower.len() {
            if x[k] < lower[k] || x[k] > upper[k] {
                return true;
            }
        }
    }
    false
}

/// Probability that a Brownian bridge of strength `phi` pinned at `x` and
/// `y` (both on the surviving side) touches the boundary `z` within a step
/// of length `dt`. Endpoints at or across the boundary return 1.
pub fn bridge_hit_probability(x: f64, y: f64, z: f64, dt: f64, phi2: f64) -> Result<f64> {
    if !(phi2 > 0.0) || !phi2.is_finite() {
        return Err(Error::InvalidBridgeStrength(phi2));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("bridge needs dt > 0, got {dt}")));
    }
    let product = (z - x) * (z - y);
    if product <= 0.0 {
        return Ok(1.0);
    }
    Ok((-2.0 * product / (dt * phi2)).exp())
}

/// Draws the within-step kill decision for a step from `x_from` to `x_to`
/// (both unabsorbed), one independent bridge per half-space. Domain-exit
/// killing has no bridge: leaving the box is only checked at endpoints.
pub fn bridge_kill(
    spec: &AbsorbingSpec,
    model: &SdeModel,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    rng: &mut RngStream,
) -> Result<bool> {
    if spec.bridge == BridgePolicy::Off {
        return Ok(false);
    }
    for hs in &spec.half_spaces {
        let phi2 = match spec.bridge {
            BridgePolicy::Off => unreachable!(),
            BridgePolicy::ConstantSigma => {
                let s = model.diffusion_diag(x_from, hs.axis);
                s * s
            }
            BridgePolicy::ModifiedVanishing => {
                let sa = model.diffusion_diag(x_from, hs.axis);
                let sb = model.diffusion_diag(x_to, hs.axis);
                (sa * sa).min(sb * sb) / 3.0
            }
        };
        if phi2 <= 0.0 {
            // No noise on this axis at these states; straight-line motion
            // between two unabsorbed endpoints cannot cross.
            continue;
        }
        // Both endpoints unabsorbed, so clearances are positive and the
        // generic formula applies with coordinates measured from z.
        let a = hs.clearance(x_from);
        let b = hs.clearance(x_to);
        let p = bridge_hit_probability(a, b, 0.0, dt, phi2)?;
        if rng.uniform() < p {
            return Ok(true);
        }
    }
    Ok(false)
}

/// One absorption event along a trajectory.
#[derive(Debug, Clone)]
pub struct KillEvent {
    /// Step counter at which the kill fired.
    pub step: u64,
    /// Elapsed time since the last regeneration.
    pub tau: f64,
    /// The state whose step triggered the kill.
    pub state: Vec<f64>,
    /// Whether a bridge draw (rather than the endpoint check) fired.
    pub via_bridge: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{em_step, SdeModel};
    use proptest::prelude::*;

    fn ou_spec() -> AbsorbingSpec {
        AbsorbingSpec::from_half_spaces(vec![HalfSpace::below(0, 0.0), HalfSpace::above(0, 3.0)])
    }

    #[test]
    fn endpoint_absorption() {
        let spec = ou_spec();
        assert!(is_absorbed(&spec, &[-0.1]));
        assert!(!is_absorbed(&spec, &[1.5]));
        assert!(is_absorbed(&spec, &[3.0]));
        assert!(is_absorbed(&spec, &[0.0]));
    }

    #[test]
    fn domain_exit_absorption() {
        let spec = AbsorbingSpec::none().with_domain_exit(&[-1.5, -1.5], &[1.5, 1.5]);
        assert!(!is_absorbed(&spec, &[0.0, 0.0]));
        assert!(is_absorbed(&spec, &[1.6, 0.0]));
        assert!(is_absorbed(&spec, &[0.0, -1.51]));
    }

    #[test]
    fn hit_probability_values() {
        let p = bridge_hit_probability(0.1, 0.1, 0.0, 0.01, 1.0).unwrap();
        assert!((p - (-2.0f64).exp()).abs() < 1e-15);
        let far = bridge_hit_probability(1.0, 1.0, 0.0, 0.01, 1.0).unwrap();
        assert!(far < 1e-80);
        // Endpoint across the boundary: certain crossing.
        assert_eq!(
            bridge_hit_probability(0.1, -0.05, 0.0, 0.01, 1.0).unwrap(),
            1.0
        );
    }

    #[test]
    fn vanishing_diffusion_strength() {
        // x(1-x) at 0.5 gives g = 1/4, phi^2 = 1/12; both endpoints at 0.5
        // against the boundary 0 give exp(-2 * 0.25 * 12 / 0.01) = exp(-600).
        let phi2 = 0.25 / 3.0;
        let p = bridge_hit_probability(0.5, 0.5, 0.0, 0.01, phi2).unwrap();
        assert!((p.ln() + 600.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_strength_is_an_error() {
        match bridge_hit_probability(0.1, 0.1, 0.0, 0.01, 0.0) {
            Err(Error::InvalidBridgeStrength(_)) => {}
            other => panic!("expected InvalidBridgeStrength, got {other:?}"),
        }
        assert!(bridge_hit_probability(0.1, 0.1, 0.0, 0.01, -1.0).is_err());
    }

    #[test]
    fn bridge_off_consumes_no_randomness() {
        let spec = ou_spec();
        let model = SdeModel::new(1, "bm", |_, o| o[0] = 0.0, |_, o| o[0] = 1.0);
        let mut rng = RngStream::new(9, 0);
        let mut twin = RngStream::new(9, 0);
        let killed = bridge_kill(&spec, &model, &[1.0], &[1.1], 0.01, &mut rng).unwrap();
        assert!(!killed);
        assert_eq!(rng.normal(), twin.normal());
    }

    #[test]
    fn one_step_kill_probability_matches_reflection_principle() {
        // For driftless Brownian motion started at x0 with boundary 0, the
        // exact one-step kill probability is 2 Phi(-x0 / (sigma sqrt(dt))).
        let model = SdeModel::new(1, "bm", |_, o| o[0] = 0.0, |_, o| o[0] = 1.0);
        let spec = AbsorbingSpec::from_half_spaces(vec![HalfSpace::below(0, 0.0)])
            .with_bridge(BridgePolicy::ConstantSigma);
        let x0 = [0.1];
        let dt = 0.01;
        let trials = 100_000;
        let mut rng = RngStream::new(31, 0);
        let mut kills = 0usize;
        for _ in 0..trials {
            let w = rng.sample_increment(dt, 1);
            let y = em_step(&model, &x0, &w).unwrap();
            let killed = is_absorbed(&spec, &y)
                || bridge_kill(&spec, &model, &x0, &y, dt, &mut rng).unwrap();
            if killed {
                kills += 1;
            }
        }
        let p_hat = kills as f64 / trials as f64;
        let exact = 2.0 * normal_cdf(-0.1 / dt.sqrt());
        let se = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!(
            (p_hat - exact).abs() < 3.0 * se,
            "p_hat {p_hat} vs exact {exact} (se {se})"
        );
    }

    fn normal_cdf(x: f64) -> f64 {
        // Abramowitz & Stegun 26.2.17, |error| < 7.5e-8.
        let t = 1.0 / (1.0 + 0.2316419 * x.abs());
        let poly = t
            * (0.319381530
                + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let upper = pdf * poly;
        if x >= 0.0 {
            1.0 - upper
        } else {
            upper
        }
    }

    proptest! {
        #[test]
        fn hit_probability_is_a_probability(
            x in 1e-3f64..2.0,
            y in 1e-3f64..2.0,
            dt in 1e-4f64..0.1,
            phi2 in 1e-3f64..4.0,
        ) {
            let p = bridge_hit_probability(x, y, 0.0, dt, phi2).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn hit_probability_symmetric_and_monotone(
            x in 1e-3f64..2.0,
            y in 1e-3f64..2.0,
            dt in 1e-4f64..0.1,
            phi2 in 1e-3f64..4.0,
        ) {
            let p_xy = bridge_hit_probability(x, y, 0.0, dt, phi2).unwrap();
            let p_yx = bridge_hit_probability(y, x, 0.0, dt, phi2).unwrap();
            prop_assert!((p_xy - p_yx).abs() < 1e-15);
            let p_stronger = bridge_hit_probability(x, y, 0.0, dt, phi2 * 2.0).unwrap();
            prop_assert!(p_stronger >= p_xy);
        }
    }
}
