//! Finite-time error estimators for two kinds of model modification, the
//! Wasserstein bound they feed, and distance diagnostics between grids.
//!
//! Both estimators run paired chains on shared noise in rolling windows of
//! length `T`: the reference chain regenerates from its running empirical
//! history whenever it is absorbed, while the modified chain never dies
//! (it reflects at the boundary, or carries no demographic noise). Each
//! window's end state seeds the next, so after a burn-in the window starts
//! sample the reference chain's quasi-stationary law. The mean end-of-window
//! distance estimates how far one time-`T` flow drifts from the other; a
//! contraction factor `alpha = e^{-gamma T}` then turns it into a bound on
//! the distance between the stationary laws, `error / (1 - alpha)`.

use crate::absorption::{bridge_hit_probability, is_absorbed, AbsorbingSpec, BridgePolicy, HalfSpace};
use crate::error::{Error, Result};
use crate::grid::DensityGrid;
use crate::sampler::reflect;
use crate::sde::{em_step, NoiseIncrement, RngStream, SdeModel};

/// Windows discarded before averaging, letting the rolling start states
/// mix toward the reference chain's quasi-stationary law.
pub const DEFAULT_BURN_IN_WINDOWS: usize = 50;

/// Distance with a built-in cap: `min(1, ||x - y||)`.
pub fn bounded_distance(x: &[f64], y: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    d2.sqrt().min(1.0)
}

/// Rolling-window protocol shared by both estimators.
#[derive(Debug, Clone)]
pub struct WindowProtocol {
    pub horizon: f64,
    pub n_windows: usize,
    pub dt: f64,
    pub burn_in_windows: usize,
    /// Every `history_thin`-th unabsorbed state enters the regeneration
    /// history.
    pub history_thin: usize,
}

impl WindowProtocol {
    pub fn new(horizon: f64, n_windows: usize, dt: f64) -> Self {
        WindowProtocol {
            horizon,
            n_windows,
            dt,
            burn_in_windows: DEFAULT_BURN_IN_WINDOWS,
            history_thin: 8,
        }
    }

    pub fn with_burn_in(mut self, windows: usize) -> Self {
        self.burn_in_windows = windows;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!(
                "window horizon {} must be positive",
                self.horizon
            )));
        }
        if !(self.dt > 0.0) || self.dt > self.horizon {
            return Err(Error::Config(format!(
                "step size {} must lie in (0, horizon]",
                self.dt
            )));
        }
        if self.n_windows <= self.burn_in_windows {
            return Err(Error::Config(format!(
                "{} windows leave nothing after a burn-in of {}",
                self.n_windows, self.burn_in_windows
            )));
        }
        if self.history_thin == 0 {
            return Err(Error::Config("history_thin must be positive".into()));
        }
        Ok(())
    }

    fn steps_per_window(&self) -> u64 {
        ((self.horizon / self.dt).round() as u64).max(1)
    }
}

/// Output of a finite-time error estimator.
#[derive(Debug, Clone, Copy)]
pub struct FiniteTimeError {
    /// Mean end-of-window bounded distance between the paired chains.
    pub error: f64,
    /// Fraction of windows in which the reference chain was absorbed.
    pub kill_prob: f64,
    /// Windows that entered the averages (after burn-in).
    pub windows: usize,
}

/// Running empirical history of the reference chain, used to regenerate
/// it after absorption.
struct History {
    dim: usize,
    thin: usize,
    counter: usize,
    states: Vec<f64>,
}

impl History {
    fn new(initial: &[f64], thin: usize) -> Self {
        History {
            dim: initial.len(),
            thin,
            counter: 0,
            states: initial.to_vec(),
        }
    }

    fn record(&mut self, x: &[f64]) {
        if self.counter % self.thin == 0 {
            self.states.extend_from_slice(x);
        }
        self.counter += 1;
    }

    fn resample(&self, rng: &mut RngStream, out: &mut [f64]) {
        let n = self.states.len() / self.dim;
        let pick = ((rng.uniform() * n as f64) as usize).min(n - 1);
        out.copy_from_slice(&self.states[pick * self.dim..(pick + 1) * self.dim]);
    }
}

/// The reflecting boundaries of the modified chain: every absorbing
/// half-space becomes a mirror, as does each face of an exit box.
fn mirrors_of(absorbing: &AbsorbingSpec) -> Vec<HalfSpace> {
    let mut mirrors = absorbing.half_spaces().to_vec();
    if let Some((lo, hi)) = absorbing.exit_box() {
        for axis in 0..lo.len() {
            mirrors.push(HalfSpace::below(axis, lo[axis]));
            mirrors.push(HalfSpace::above(axis, hi[axis]));
        }
    }
    mirrors
}

/// Finite-time error when the modification replaces absorption with
/// mirror reflection. Within a window the chains share every Wiener
/// increment, so they stay bit-identical until the reference chain is
/// absorbed; only windows containing an absorption contribute distance,
/// which keeps the mean below the per-window killing probability.
pub fn finite_time_error_reflection(
    model: &SdeModel,
    absorbing: &AbsorbingSpec,
    protocol: &WindowProtocol,
    x0: &[f64],
    rng: &mut RngStream,
) -> Result<FiniteTimeError> {
    protocol.validate()?;
    if absorbing.is_empty() {
        return Err(Error::Config(
            "reflection case needs an absorbing set to mirror".into(),
        ));
    }
    if x0.len() != model.dim() {
        return Err(Error::Config(format!(
            "start state of dimension {} for a model of dimension {}",
            x0.len(),
            model.dim()
        )));
    }
    if is_absorbed(absorbing, x0) {
        return Err(Error::Config("initial state is absorbed".into()));
    }
    let mirrors = mirrors_of(absorbing);
    let steps = protocol.steps_per_window();
    let dim = model.dim();
    let mut history = History::new(x0, protocol.history_thin);
    let mut x = x0.to_vec();
    let mut y = x0.to_vec();
    let mut w = NoiseIncrement::new(protocol.dt, vec![0.0; dim]);
    let mut sum_d = 0.0;
    let mut kills = 0usize;
    let mut counted = 0usize;
    for window in 0..protocol.n_windows {
        y.copy_from_slice(&x);
        let mut killed = false;
        for _ in 0..steps {
            rng.fill_increment(protocol.dt, w.values_mut());
            let mut xn = em_step(model, &x, &w)?;
            let mut yn = em_step(model, &y, &w)?;
            model.apply_domain_guard(&mut xn);
            model.apply_domain_guard(&mut yn);
            reflect(&mirrors, &mut yn);
            let mut kill_now = is_absorbed(absorbing, &xn);
            if !kill_now && shared_bridge_kill(absorbing, model, &x, &xn, protocol.dt, rng)? {
                kill_now = true;
            }
            if kill_now {
                killed = true;
                history.resample(rng, &mut xn);
            } else {
                history.record(&xn);
            }
            x = xn;
            y = yn;
        }
        if window >= protocol.burn_in_windows {
            counted += 1;
            if killed {
                kills += 1;
                sum_d += bounded_distance(&x, &y);
            }
        }
    }
    Ok(FiniteTimeError {
        error: sum_d / counted as f64,
        kill_prob: kills as f64 / counted as f64,
        windows: counted,
    })
}

/// Bridge-kill draw matching the absorbing spec's policy, with the noise
/// strength per axis supplied by `phi2_of(state_from, state_to, axis)`.
fn bridge_kill_with<F: Fn(&[f64], &[f64], usize) -> f64>(
    absorbing: &AbsorbingSpec,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    rng: &mut RngStream,
    phi2_of: F,
) -> Result<bool> {
    if absorbing.bridge() == BridgePolicy::Off {
        return Ok(false);
    }
    for hs in absorbing.half_spaces() {
        let phi2 = phi2_of(x_from, x_to, hs.axis);
        if phi2 <= 0.0 {
            continue;
        }
        let a = hs.clearance(x_from);
        let b = hs.clearance(x_to);
        if rng.uniform() < bridge_hit_probability(a, b, 0.0, dt, phi2)? {
            return Ok(true);
        }
    }
    Ok(false)
}

fn shared_bridge_kill(
    absorbing: &AbsorbingSpec,
    model: &SdeModel,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    rng: &mut RngStream,
) -> Result<bool> {
    let policy = absorbing.bridge();
    bridge_kill_with(absorbing, x_from, x_to, dt, rng, |a, b, axis| {
        match policy {
            BridgePolicy::Off => 0.0,
            BridgePolicy::ConstantSigma => {
                let s = model.diffusion_diag(a, axis);
                s * s
            }
            BridgePolicy::ModifiedVanishing => {
                let sa = model.diffusion_diag(a, axis);
                let sb = model.diffusion_diag(b, axis);
                (sa * sa).min(sb * sb) / 3.0
            }
        }
    })
}

/// Which chain keeps the nominal environmental noise when a demographic
/// term `eps sqrt(x)` is added and the marginals are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMatching {
    /// The reference chain keeps its noise; the modified chain's is
    /// inflated to `sqrt(sigma^2 + eps^2)` through the shared split.
    #[default]
    Add,
    /// The modified chain keeps its noise; the reference chain's
    /// environmental part is deflated to `sqrt(sigma^2 - eps^2)`.
    Subtract,
}

/// A model plus a demographic noise `eps sqrt(x_i) dW'_i` on each axis.
/// The base diffusion must be diagonal: each axis is driven by its own
/// pair of Wiener processes, shared between the two chains.
#[derive(Debug, Clone, Copy)]
pub struct DemographicPair<'m> {
    pub base: &'m SdeModel,
    pub epsilon: f64,
    pub matching: NoiseMatching,
}

impl<'m> DemographicPair<'m> {
    pub fn new(base: &'m SdeModel, epsilon: f64) -> Self {
        DemographicPair {
            base,
            epsilon,
            matching: NoiseMatching::Add,
        }
    }

    /// Environmental coefficient on `axis` at `state` for either chain.
    fn environmental(&self, state: &[f64], axis: usize) -> Result<f64> {
        let d = self.base.diffusion_diag(state, axis);
        match self.matching {
            NoiseMatching::Add => Ok(d),
            NoiseMatching::Subtract => {
                let v = d * d - self.epsilon * self.epsilon * state[axis] * state[axis];
                if v < 0.0 {
                    return Err(Error::Config(format!(
                        "environmental noise at {state:?} is too weak to absorb \
                         a demographic term of strength {}",
                        self.epsilon
                    )));
                }
                Ok(v.sqrt())
            }
        }
    }

    /// Per-axis noise variance of the reference chain, for the bridge.
    fn total_variance(&self, state: &[f64], axis: usize) -> Result<f64> {
        let e = self.environmental(state, axis)?;
        Ok(e * e + self.epsilon * self.epsilon * state[axis].max(0.0))
    }
}

/// Finite-time error when the modification removes a demographic noise
/// term. The chains share both Wiener processes per axis: the reference
/// chain puts `eps sqrt(x_i)` on the second one, the modified chain
/// `eps y_i`, so its marginal matches an environmental noise of strength
/// `sqrt(sigma^2 + eps^2)`. Unlike the reflection case the chains
/// separate even without absorption, so every window contributes its
/// end distance.
pub fn finite_time_error_demographic(
    pair: &DemographicPair,
    absorbing: &AbsorbingSpec,
    protocol: &WindowProtocol,
    x0: &[f64],
    rng: &mut RngStream,
) -> Result<FiniteTimeError> {
    protocol.validate()?;
    let model = pair.base;
    let dim = model.dim();
    if x0.len() != dim {
        return Err(Error::Config(format!(
            "start state of dimension {} for a model of dimension {}",
            x0.len(),
            dim
        )));
    }
    if is_absorbed(absorbing, x0) {
        return Err(Error::Config("initial state is absorbed".into()));
    }
    if !(pair.epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "demographic strength {} must be nonnegative",
            pair.epsilon
        )));
    }
    let steps = protocol.steps_per_window();
    let dt = protocol.dt;
    let sqrt_dt = dt.sqrt();
    let mut history = History::new(x0, protocol.history_thin);
    let mut x = x0.to_vec();
    let mut y = x0.to_vec();
    let mut fx = vec![0.0; dim];
    let mut fy = vec![0.0; dim];
    let mut w1 = vec![0.0; dim];
    let mut w2 = vec![0.0; dim];
    let mut sum_d = 0.0;
    let mut kills = 0usize;
    let mut counted = 0usize;
    for window in 0..protocol.n_windows {
        y.copy_from_slice(&x);
        let mut killed = false;
        for _ in 0..steps {
            for i in 0..dim {
                w1[i] = sqrt_dt * rng.normal();
                w2[i] = sqrt_dt * rng.normal();
            }
            model.eval_drift(&x, &mut fx);
            model.eval_drift(&y, &mut fy);
            let mut xn = vec![0.0; dim];
            let mut yn = vec![0.0; dim];
            for i in 0..dim {
                let ex = pair.environmental(&x, i)?;
                let ey = pair.environmental(&y, i)?;
                xn[i] = x[i]
                    + fx[i] * dt
                    + ex * w1[i]
                    + pair.epsilon * x[i].max(0.0).sqrt() * w2[i];
                yn[i] = y[i] + fy[i] * dt + ey * w1[i] + pair.epsilon * y[i] * w2[i];
            }
            model.apply_domain_guard(&mut xn);
            model.apply_domain_guard(&mut yn);
            let mut kill_now = is_absorbed(absorbing, &xn);
            if !kill_now
                && bridge_kill_with(absorbing, &x, &xn, dt, rng, |a, b, axis| {
                    let ga = pair.total_variance(a, axis).unwrap_or(0.0);
                    let gb = pair.total_variance(b, axis).unwrap_or(0.0);
                    match absorbing.bridge() {
                        BridgePolicy::Off => 0.0,
                        BridgePolicy::ConstantSigma => ga,
                        BridgePolicy::ModifiedVanishing => ga.min(gb) / 3.0,
                    }
                })?
            {
                kill_now = true;
            }
            if kill_now {
                killed = true;
                history.resample(rng, &mut xn);
            } else {
                history.record(&xn);
            }
            x = xn;
            y = yn;
        }
        if window >= protocol.burn_in_windows {
            counted += 1;
            kills += usize::from(killed);
            sum_d += bounded_distance(&x, &y);
        }
    }
    Ok(FiniteTimeError {
        error: sum_d / counted as f64,
        kill_prob: kills as f64 / counted as f64,
        windows: counted,
    })
}

/// Bound on the distance between the stationary laws:
/// `finite_error / (1 - e^{-gamma T})`.
pub fn wasserstein_bound(finite_error: f64, gamma: f64, horizon: f64) -> Result<f64> {
    if !(finite_error >= 0.0) {
        return Err(Error::Config(format!(
            "finite-time error {finite_error} must be nonnegative"
        )));
    }
    let alpha = contraction_factor(gamma, horizon)?;
    Ok(finite_error / (1.0 - alpha))
}

fn contraction_factor(gamma: f64, horizon: f64) -> Result<f64> {
    if !(gamma > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidContraction { gamma, horizon });
    }
    let alpha = (-gamma * horizon).exp();
    if alpha >= 1.0 {
        return Err(Error::InvalidContraction { gamma, horizon });
    }
    Ok(alpha)
}

/// Which modification a sensitivity run studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityCase {
    Reflection,
    Demographic,
}

impl std::fmt::Display for SensitivityCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SensitivityCase::Reflection => write!(f, "reflection"),
            SensitivityCase::Demographic => write!(f, "demographic"),
        }
    }
}

/// Everything a sensitivity run concludes, ready for serialization.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub case: SensitivityCase,
    pub horizon: f64,
    pub finite_error: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub bound: f64,
    pub kill_prob: f64,
    pub windows: usize,
}

impl SensitivityReport {
    pub fn assemble(
        case: SensitivityCase,
        horizon: f64,
        estimate: &FiniteTimeError,
        gamma: f64,
    ) -> Result<Self> {
        let alpha = contraction_factor(gamma, horizon)?;
        let bound = estimate.error / (1.0 - alpha);
        Ok(SensitivityReport {
            case,
            horizon,
            finite_error: estimate.error,
            gamma,
            alpha,
            bound,
            kill_prob: estimate.kill_prob,
            windows: estimate.windows,
        })
    }
}

/// Total variation distance between two densities on the same grid:
/// half the integrated absolute difference.
pub fn tv_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    Ok(0.5 * a.l1_distance(b)?)
}

/// One-dimensional Wasserstein distance under the capped metric: the
/// integral of `min(1, |CDF_a - CDF_b|)` over the grid.
pub fn grid_w1_1d(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    a.check_same_grid(b)?;
    if a.grid().dim() != 1 {
        return Err(Error::GridMismatch(format!(
            "1-d transport distance on a {}-d grid",
            a.grid().dim()
        )));
    }
    let h = a.grid().h(0);
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for (va, vb) in a.to_row_major().into_iter().zip(b.to_row_major()) {
        cdf_gap += (va - vb) * h;
        total += cdf_gap.abs().min(1.0) * h;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use proptest::prelude::*;

    fn single_well(sigma: f64) -> SdeModel {
        SdeModel::new(
            1,
            "single_well",
            |x, o| o[0] = -2.0 * (x[0] - 1.0),
            move |_, o| o[0] = sigma,
        )
    }

    fn lv_model(sigma: f64) -> SdeModel {
        SdeModel::new(
            2,
            "lv",
            |x, o| {
                o[0] = x[0] * (2.0 - 0.8 * x[0] - 1.6 * x[1]);
                o[1] = x[1] * (4.0 - x[0] - 5.0 * x[1]);
            },
            move |x, o| {
                o.fill(0.0);
                o[0] = sigma * x[0];
                o[3] = sigma * x[1];
            },
        )
    }

    #[test]
    fn no_kill_means_zero_error_exactly() {
        // Absorbing wall far below the well: the chains stay identical.
        let model = single_well(0.7);
        let absorbing =
            AbsorbingSpec::from_half_spaces(vec![HalfSpace::below(0, -30.0)])
                .with_bridge(BridgePolicy::ConstantSigma);
        let protocol = WindowProtocol::new(0.5, 60, 0.01).with_burn_in(10);
        let mut rng = RngStream::new(101, 0);
        let out =
            finite_time_error_reflection(&model, &absorbing, &protocol, &[1.0], &mut rng).unwrap();
        assert_eq!(out.error, 0.0);
        assert_eq!(out.kill_prob, 0.0);
        assert_eq!(out.windows, 50);
    }

    #[test]
    fn reflection_error_is_bounded_by_kill_probability() {
        // Wall close to the well so kills actually happen.
        let model = single_well(0.7);
        let absorbing = AbsorbingSpec::from_half_spaces(vec![HalfSpace::below(0, 0.4)])
            .with_bridge(BridgePolicy::ConstantSigma);
        let protocol = WindowProtocol::new(0.5, 600, 0.005).with_burn_in(50);
        let mut rng = RngStream::new(102, 0);
        let out =
            finite_time_error_reflection(&model, &absorbing, &protocol, &[1.0], &mut rng).unwrap();
        assert!(out.kill_prob > 0.05, "kill probability {}", out.kill_prob);
        assert!(out.error <= out.kill_prob + 1e-15);
        assert!(out.error > 0.0);
    }

    #[test]
    fn single_well_finite_error_matches_dense_numerics() {
        // Dense-grid reference for this well: the killed generator's leading
        // eigenvalue is 0.03334, so a window of length 0.5 kills with
        // probability 0.0165, and the true W1 between the QSD and its
        // reflected half-second evolution is 0.00945.
        let model = single_well(0.7);
        let absorbing = AbsorbingSpec::from_half_spaces(vec![HalfSpace::below(0, 0.0)])
            .with_bridge(BridgePolicy::ConstantSigma);
        let protocol = WindowProtocol::new(0.5, 20_050, 0.001).with_burn_in(50);
        let mut rng = RngStream::new(103, 0);
        let out =
            finite_time_error_reflection(&model, &absorbing, &protocol, &[1.0], &mut rng).unwrap();
        assert!(
            out.error > 0.006 && out.error < 0.013,
            "finite-time error {} should sit near 0.0094",
            out.error
        );
        assert!(
            out.kill_prob > 0.012 && out.kill_prob < 0.022,
            "kill probability {} should sit near 0.0165",
            out.kill_prob
        );
        assert!(out.error <= out.kill_prob);
    }

    #[test]
    fn zero_demographic_noise_keeps_chains_identical() {
        let model = lv_model(0.75);
        let pair = DemographicPair::new(&model, 0.0);
        let absorbing = AbsorbingSpec::from_half_spaces(vec![
            HalfSpace::below(0, 0.0),
            HalfSpace::below(1, 0.0),
        ])
        .with_bridge(BridgePolicy::ModifiedVanishing);
        let protocol = WindowProtocol::new(1.0, 80, 0.01).with_burn_in(20);
        let mut rng = RngStream::new(104, 0);
        let out =
            finite_time_error_demographic(&pair, &absorbing, &protocol, &[1.5, 0.5], &mut rng)
                .unwrap();
        assert_eq!(out.error, 0.0);
        assert_eq!(out.kill_prob, 0.0);
    }

    #[test]
    fn lv_demographic_error_lands_on_the_expected_scale() {
        let model = lv_model(0.75);
        let pair = DemographicPair::new(&model, 0.05);
        let absorbing = AbsorbingSpec::from_half_spaces(vec![
            HalfSpace::below(0, 0.0),
            HalfSpace::below(1, 0.0),
        ])
        .with_bridge(BridgePolicy::ModifiedVanishing);
        let protocol = WindowProtocol::new(4.0, 3_050, 0.002).with_burn_in(50);
        let mut rng = RngStream::new(105, 0);
        let out =
            finite_time_error_demographic(&pair, &absorbing, &protocol, &[1.5, 0.5], &mut rng)
                .unwrap();
        assert!(
            out.error > 0.008 && out.error < 0.035,
            "finite-time error {} should sit near 0.0177",
            out.error
        );
    }

    fn double_well() -> SdeModel {
        let s2 = std::f64::consts::SQRT_2;
        SdeModel::new(
            1,
            "double_well",
            move |x, o| {
                let t = x[0];
                o[0] = -(4.0 * t * t * t - 12.0 * s2 * t * t + 20.0 * t - 4.0 * s2);
            },
            |_, o| o[0] = 0.7,
        )
    }

    #[test]
    #[ignore]
    fn diag_double_well_error() {
        let model = double_well();
        let absorbing = AbsorbingSpec::from_half_spaces(vec![HalfSpace::below(0, 0.0)])
            .with_bridge(BridgePolicy::ConstantSigma);
        for windows in [1050usize, 2050] {
            let protocol = WindowProtocol::new(20.0, windows, 0.001).with_burn_in(50);
            let mut rng = RngStream::new(11, 0);
            let out = finite_time_error_reflection(
                &model,
                &absorbing,
                &protocol,
                &[std::f64::consts::SQRT_2 + 1.0],
                &mut rng,
            )
            .unwrap();
            println!(
                "windows={windows}: kill_prob={:.4} error={:.4} bound={:.4}",
                out.kill_prob,
                out.error,
                out.error / (1.0 - (-0.027521f64 * 20.0).exp())
            );
        }
    }

    #[test]
    #[ignore]
    fn diag_single_well_kill_rates() {
        for (dt, bridge) in [
            (0.001, BridgePolicy::ConstantSigma),
            (0.001, BridgePolicy::Off),
            (0.0005, BridgePolicy::ConstantSigma),
            (0.0001, BridgePolicy::ConstantSigma),
            (0.0001, BridgePolicy::Off),
        ] {
            let model = single_well(0.7);
            let absorbing = AbsorbingSpec::from_half_spaces(vec![HalfSpace::below(0, 0.0)])
                .with_bridge(bridge);
            let protocol = WindowProtocol::new(0.5, 8_050, dt).with_burn_in(50);
            let mut rng = RngStream::new(103, 0);
            let out =
                finite_time_error_reflection(&model, &absorbing, &protocol, &[1.0], &mut rng)
                    .unwrap();
            println!(
                "dt={dt} bridge={bridge:?}: kill_prob={:.5} error={:.5}",
                out.kill_prob, out.error
            );
        }
    }

    #[test]
    fn subtract_matching_rejects_overlarge_epsilon() {
        let model = lv_model(0.1);
        let pair = DemographicPair {
            base: &model,
            epsilon: 0.5,
            matching: NoiseMatching::Subtract,
        };
        // sigma^2 x^2 < eps^2 x^2 at every interior state.
        assert!(pair.environmental(&[1.0, 1.0], 0).is_err());
    }

    #[test]
    fn bound_formula_spot_checks() {
        let single = wasserstein_bound(0.00391083, 2.031414, 0.5).unwrap();
        assert!((single - 0.0061).abs() < 2e-4, "single well bound {single}");
        let double = wasserstein_bound(0.06402, 0.027521, 20.0).unwrap();
        assert!((double - 0.1512).abs() < 5e-4, "double well bound {double}");
        let lv = wasserstein_bound(0.06230, 0.0512655, 12.0).unwrap();
        assert!((lv - 0.1356).abs() < 5e-4, "lv bound {lv}");
    }

    #[test]
    fn degenerate_contractions_are_rejected() {
        assert!(matches!(
            wasserstein_bound(0.1, 0.0, 1.0),
            Err(Error::InvalidContraction { .. })
        ));
        assert!(matches!(
            wasserstein_bound(0.1, 1.0, 0.0),
            Err(Error::InvalidContraction { .. })
        ));
        assert!(matches!(
            wasserstein_bound(0.1, 1e-300, 1e-300),
            Err(Error::InvalidContraction { .. })
        ));
    }

    proptest! {
        #[test]
        fn bound_is_monotone(
            err in 0.0f64..1.0,
            extra in 1e-6f64..0.5,
            gamma in 0.01f64..5.0,
            factor in 1.01f64..3.0,
            horizon in 0.1f64..30.0,
        ) {
            let base = wasserstein_bound(err, gamma, horizon).unwrap();
            let more_error = wasserstein_bound(err + extra, gamma, horizon).unwrap();
            let faster = wasserstein_bound(err, gamma * factor, horizon).unwrap();
            let longer = wasserstein_bound(err, gamma, horizon * factor).unwrap();
            prop_assert!(more_error > base);
            prop_assert!(faster <= base);
            prop_assert!(longer <= base);
            prop_assert!(base >= err);
        }
    }

    fn grid_1d(n: usize) -> GridSpec {
        GridSpec::new(&[0.0], &[1.0], &[n]).unwrap()
    }

    fn density_with_mass_at(grid: &GridSpec, cell: usize) -> DensityGrid {
        let mut v = vec![0.0; grid.n_cells()];
        v[cell] = 1.0;
        DensityGrid::from_row_major(grid.clone(), v).unwrap()
    }

    #[test]
    fn tv_distance_limits() {
        let grid = grid_1d(64);
        let a = density_with_mass_at(&grid, 10);
        let b = density_with_mass_at(&grid, 40);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        let d = tv_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "disjoint supports give {d}");
        let other = density_with_mass_at(&grid_1d(32), 5);
        assert!(tv_distance(&a, &other).is_err());
    }

    #[test]
    fn w1_point_masses_one_cell_apart() {
        let grid = grid_1d(64);
        let h = grid.h(0);
        let a = density_with_mass_at(&grid, 20);
        let b = density_with_mass_at(&grid, 21);
        assert_eq!(grid_w1_1d(&a, &a).unwrap(), 0.0);
        let d = grid_w1_1d(&a, &b).unwrap();
        assert!((d - h).abs() < 1e-12, "one-cell transport {d} vs {h}");
    }

    #[test]
    fn w1_rejects_higher_dimensions() {
        let grid = GridSpec::new(&[0.0, 0.0], &[1.0, 1.0], &[8, 8]).unwrap();
        let mut v = vec![0.0; grid.n_cells()];
        v[0] = 1.0;
        let a = DensityGrid::from_row_major(grid, v).unwrap();
        assert!(grid_w1_1d(&a, &a).is_err());
    }

    #[test]
    fn report_assembly_keeps_the_invariants() {
        let estimate = FiniteTimeError {
            error: 0.00391083,
            kill_prob: 0.005,
            windows: 1000,
        };
        let report =
            SensitivityReport::assemble(SensitivityCase::Reflection, 0.5, &estimate, 2.031414)
                .unwrap();
        assert!(report.alpha > 0.0 && report.alpha < 1.0);
        assert!(report.bound >= report.finite_error);
        assert!((report.bound - 0.0061).abs() < 2e-4);
        assert_eq!(format!("{}", report.case), "reflection");
    }
}
