//! Regenerating Monte Carlo sampling of quasi-stationary distributions.
//!
//! A single long trajectory is integrated until absorption; each kill
//! records the survival time since the last regeneration and restarts the
//! chain from a state drawn uniformly from the trajectory's own stored
//! history. Unabsorbed post-burn-in states accumulate into a cell histogram
//! whose normalization estimates the quasi-stationary density, and the
//! recorded survival times estimate the killing rate and feed the
//! exponential-tail acceptance check.

use crate::absorption::{bridge_kill, is_absorbed, AbsorbingSpec, HalfSpace, KillEvent};
use crate::error::{Error, Result};
use crate::grid::{DensityGrid, GridSpec};
use crate::sde::{RngStream, Scheme, SdeModel, Stepper};
use crate::survival::{default_times, survival_points, SurvivalPoint};
use rayon::prelude::*;

/// Trajectory length, step size, and bookkeeping for one sampling run.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n_steps: u64,
    pub dt: f64,
    pub scheme: Scheme,
    /// Leading fraction of the trajectory excluded from the histogram and
    /// from the recorded survival times.
    pub burn_in_fraction: f64,
    /// Store every `history_thin`-th unabsorbed state for regeneration.
    pub history_thin: usize,
    pub initial: Vec<f64>,
}

impl SamplerConfig {
    pub fn new(n_steps: u64, dt: f64, scheme: Scheme, initial: Vec<f64>) -> Self {
        SamplerConfig {
            n_steps,
            dt,
            scheme,
            burn_in_fraction: 0.1,
            history_thin: 1,
            initial,
        }
    }

    fn validate(&self, model: &SdeModel) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Config(format!(
                "burn-in fraction must lie in [0, 1), got {}",
                self.burn_in_fraction
            )));
        }
        if self.history_thin == 0 {
            return Err(Error::Config("history_thin must be at least 1".into()));
        }
        if self.initial.len() != model.dim() {
            return Err(Error::Config(format!(
                "initial state has dimension {}, model has {}",
                self.initial.len(),
                model.dim()
            )));
        }
        Ok(())
    }
}

/// Survival times between regenerations, with the step bookkeeping needed
/// to interpret them.
#[derive(Debug, Clone)]
pub struct KillingSample {
    taus: Vec<f64>,
    total_steps: u64,
    burn_in_steps: u64,
}

impl KillingSample {
    pub fn new(taus: Vec<f64>, total_steps: u64, burn_in_steps: u64) -> Self {
        KillingSample {
            taus,
            total_steps,
            burn_in_steps,
        }
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn burn_in_steps(&self) -> u64 {
        self.burn_in_steps
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
}

/// Concatenates samples from independent trajectories (callers pass them in
/// a fixed order, e.g. by stream id, so merges are reproducible).
pub fn merge_killing_samples(parts: &[KillingSample]) -> KillingSample {
    let mut taus = Vec::new();
    let mut total = 0;
    let mut burn = 0;
    for p in parts {
        taus.extend_from_slice(&p.taus);
        total += p.total_steps;
        burn += p.burn_in_steps;
    }
    KillingSample::new(taus, total, burn)
}

/// Killing rate as the reciprocal mean survival time.
pub fn estimate_killing_rate(sample: &KillingSample) -> Result<f64> {
    if sample.taus.is_empty() {
        return Err(Error::NoKillingObserved);
    }
    let mean = sample.taus.iter().sum::<f64>() / sample.taus.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Config("survival times must be positive".into()));
    }
    Ok(1.0 / mean)
}

/// Outcome of checking the survival times against the exponential law.
#[derive(Debug, Clone)]
pub struct TailAcceptance {
    pub lambda: f64,
    pub points: Vec<SurvivalPoint>,
    pub accepted: bool,
}

/// Accepts the estimated killing rate iff `exp(-lambda t)` lies inside the
///empirical survival band at every check time (12 evenly spaced between the
/// 10th and 99th survival-time percentile unless `times` is given).
pub fn tail_acceptance(
    sample: &KillingSample,
    lambda: f64,
    times: Option<&[f64]>,
) -> Result<TailAcceptance> {
    if sample.taus.is_empty() {
        return Err(Error::NoKillingObserved);
    }
    let default;
    let times = match times {
        Some(t) => t,
        None => {
            default = default_times(&sample.taus, 12);
            &default
        }
    };
    let points = survival_points(&sample.taus, times);
    let accepted = points.iter().all(|p| p.contains((-lambda * p.t).exp()));
    Ok(TailAcceptance {
        lambda,
        points,
        accepted,
    })
}

/// Hooks into the sampling loop, used by diagnostics and tests.
pub trait SampleObserver {
    fn on_unabsorbed(&mut self, _step: u64, _state: &[f64]) {}
    fn on_kill(&mut self, _event: &KillEvent, _regenerated: &[f64]) {}
}

/// Observer that records nothing.
pub struct NoObserver;

impl SampleObserver for NoObserver {}

/// Runs one regenerating trajectory and histograms it on `grid`.
///
/// Absorbed steps record a survival time and restart from a uniform draw
/// over the stored history (the initial point before any history exists);
/// unabsorbed post-burn-in states inside the grid box are counted. The
/// returned density integrates to one.
pub fn run_qsd_trajectory(
    model: &SdeModel,
    absorbing: &AbsorbingSpec,
    grid: &GridSpec,
    config: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<(DensityGrid, KillingSample)> {
    run_qsd_trajectory_observed(model, absorbing, grid, config, rng, &mut NoObserver)
}

/// [`run_qsd_trajectory`] with an observer receiving every unabsorbed state
/// and every kill.
pub fn run_qsd_trajectory_observed<O: SampleObserver>(
    model: &SdeModel,
    absorbing: &AbsorbingSpec,
    grid: &GridSpec,
    config: &SamplerConfig,
    rng: &mut RngStream,
    observer: &mut O,
) -> Result<(DensityGrid, KillingSample)> {
    let raw = run_raw(model, absorbing, grid, config, rng, observer)?;
    finalize(grid, vec![raw])
}

/// Runs `n_trajectories` independent regenerating trajectories on streams
/// `base_stream..base_stream + n` (splitting `config.n_steps` between them),
/// merging histograms by summation and survival times in stream order. The
/// result does not depend on how the work is scheduled.
pub fn run_qsd_ensemble(
    model: &SdeModel,
    absorbing: &AbsorbingSpec,
    grid: &GridSpec,
    config: &SamplerConfig,
    seed: u64,
    base_stream: u64,
    n_trajectories: u64,
) -> Result<(DensityGrid, KillingSample)> {
    if n_trajectories == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    let per = config.n_steps / n_trajectories;
    if per == 0 {
        return Err(Error::Config("fewer steps than trajectories".into()));
    }
    let runs: Vec<Result<RawRun>> = (0..n_trajectories)
        .into_par_iter()
        .map(|k| {
            let mut cfg = config.clone();
            cfg.n_steps = per;
            let mut rng = RngStream::new(seed, base_stream + k);
            run_raw(model, absorbing, grid, &cfg, &mut rng, &mut NoObserver)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    finalize(grid, runs)
}

struct RawRun {
    counts: Vec<u64>,
    taus: Vec<f64>,
    n_steps: u64,
    burn_in_steps: u64,
}

fn run_raw<O: SampleObserver>(
    model: &SdeModel,
    absorbing: &AbsorbingSpec,
    grid: &GridSpec,
    config: &SamplerConfig,
    rng: &mut RngStream,
    observer: &mut O,
) -> Result<RawRun> {
    config.validate(model)?;
    if is_absorbed(absorbing, &config.initial) {
        return Err(Error::Config("initial state is absorbed".into()));
    }
    if grid.dim() != model.dim() {
        return Err(Error::GridMismatch(format!(
            "grid dimension {} vs model dimension {}",
            grid.dim(),
            model.dim()
        )));
    }
    let dim = model.dim();
    let dt = config.dt;
    let burn_in_steps = (config.n_steps as f64 * config.burn_in_fraction) as u64;
    let ordering = grid.ordering();
    let mut counts = vec![0u64; grid.n_cells()];
    let mut stepper = Stepper::new(model, config.scheme);
    let mut history: Vec<f64> = Vec::with_capacity(
        (config.n_steps as usize / config.history_thin + 1).min(1 << 24) * dim,
    );
    history.extend_from_slice(&config.initial);
    let mut x = config.initial.clone();
    let mut y = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut taus = Vec::new();
    let mut steps_since_regen = 0u64;
    for step in 0..config.n_steps {
        rng.fill_increment(dt, &mut w);
        stepper.step(&x, dt, &w, &mut y)?;
        model.apply_domain_guard(&mut y);
        steps_since_regen += 1;
        let mut via_bridge = false;
        let mut killed = is_absorbed(absorbing, &y);
        if !killed && bridge_kill(absorbing, model, &x, &y, dt, rng)? {
            killed = true;
            via_bridge = true;
        }
        if killed {
            if step >= burn_in_steps {
                taus.push(steps_since_regen as f64 * dt);
            }
            let n_hist = history.len() / dim;
            if n_hist == 0 {
                x.copy_from_slice(&config.initial);
            } else {
                let pick = ((rng.uniform() * n_hist as f64) as usize).min(n_hist - 1);
                x.copy_from_slice(&history[pick * dim..(pick + 1) * dim]);
            }
            observer.on_kill(
                &KillEvent {
                    step,
                    tau: steps_since_regen as f64 * dt,
                    state: y.clone(),
                    via_bridge,
                },
                &x,
            );
            steps_since_regen = 0;
        } else {
            if step >= burn_in_steps {
                if let Some(rm) = grid.locate(&y) {
                    counts[ordering.storage_index(rm)] += 1;
                }
            }
            if step % config.history_thin as u64 == 0 {
                history.extend_from_slice(&y);
            }
            observer.on_unabsorbed(step, &y);
            std::mem::swap(&mut x, &mut y);
        }
    }
    Ok(RawRun {
        counts,
        taus,
        n_steps: config.n_steps,
        burn_in_steps,
    })
}

fn finalize(grid: &GridSpec, runs: Vec<RawRun>) -> Result<(DensityGrid, KillingSample)> {
    let mut counts = vec![0.0f64; grid.n_cells()];
    let mut taus = Vec::new();
    let mut total = 0;
    let mut burn = 0;
    for run in runs {
        for (acc, c) in counts.iter_mut().zip(&run.counts) {
            *acc += *c as f64;
        }
        taus.extend_from_slice(&run.taus);
        total += run.n_steps;
        burn += run.burn_in_steps;
    }
    let density = DensityGrid::from_interior_first(grid.clone(), counts)
        .map_err(|_| Error::Config("no unabsorbed samples landed in the grid box".into()))?;
    Ok((density, KillingSample::new(taus, total, burn)))
}

/// Histograms the stationary law of the *reflected* (never absorbed)
/// dynamics: after each step the state is mirrored back across each
/// half-space in `reflectors` it crossed. Used for the invariant measure
/// the absorbed process is compared against.
pub fn run_reflected_trajectory(
    model: &SdeModel,
    reflectors: &[HalfSpace],
    grid: &GridSpec,
    config: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<DensityGrid> {
    config.validate(model)?;
    if grid.dim() != model.dim() {
        return Err(Error::GridMismatch(format!(
            "grid dimension {} vs model dimension {}",
            grid.dim(),
            model.dim()
        )));
    }
    let dim = model.dim();
    let burn_in_steps = (config.n_steps as f64 * config.burn_in_fraction) as u64;
    let ordering = grid.ordering();
    let mut counts = vec![0.0f64; grid.n_cells()];
    let mut stepper = Stepper::new(model, config.scheme);
    let mut x = config.initial.clone();
    let mut y = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    for step in 0..config.n_steps {
        rng.fill_increment(config.dt, &mut w);
        stepper.step(&x, config.dt, &w, &mut y)?;
        model.apply_domain_guard(&mut y);
        reflect(reflectors, &mut y);
        if step >= burn_in_steps {
            if let Some(rm) = grid.locate(&y) {
                counts[ordering.storage_index(rm)] += 1.0;
            }
        }
        std::mem::swap(&mut x, &mut y);
    }
    DensityGrid::from_interior_first(grid.clone(), counts)
        .map_err(|_| Error::Config("no samples landed in the grid box".into()))
}

/// Mirrors `x` back across every half-space it lies in.
pub fn reflect(reflectors: &[HalfSpace], x: &mut [f64]) {
    for hs in reflectors {
        if hs.contains(x) {
            x[hs.axis] = 2.0 * hs.threshold - x[hs.axis];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absorption::BridgePolicy;

    fn ou_model() -> SdeModel {
        SdeModel::new(
            1,
            "ou-test",
            |x, out| out[0] = 2.0 - x[0],
            |_, out| out[0] = 1.0,
        )
    }

    fn ou_absorbing() -> AbsorbingSpec {
        AbsorbingSpec::from_half_spaces(vec![HalfSpace::below(0, 0.0), HalfSpace::above(0, 3.0)])
            .with_bridge(BridgePolicy::ConstantSigma)
    }

    fn grid_1d(cells: usize) -> GridSpec {
        GridSpec::new(&[0.0], &[3.0], &[cells]).unwrap()
    }

    #[test]
    fn zero_noise_mass_concentrates_at_fixed_point() {
        let model = SdeModel::new(1, "ou-frozen", |x, o| o[0] = 2.0 - x[0], |_, o| o[0] = 0.0);
        let grid = grid_1d(64);
        let config = SamplerConfig::new(20_000, 0.01, Scheme::EulerMaruyama, vec![2.0]);
        let mut rng = RngStream::new(1, 0);
        let (density, sample) =
            run_qsd_trajectory(&model, &ou_absorbing(), &grid, &config, &mut rng).unwrap();
        assert!(sample.is_empty());
        assert!(estimate_killing_rate(&sample).is_err());
        let rm = density.to_row_major();
        let cell = grid.locate(&[2.0]).unwrap();
        let h = grid.h(0);
        assert!((rm[cell] - 1.0 / h).abs() < 1e-9);
        assert!((density.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_integrates_to_one() {
        let grid = grid_1d(64);
        let config = SamplerConfig::new(100_000, 0.001, Scheme::EulerMaruyama, vec![1.5]);
        let mut rng = RngStream::new(3, 0);
        let (density, _) =
            run_qsd_trajectory(&ou_model(), &ou_absorbing(), &grid, &config, &mut rng).unwrap();
        assert!((density.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn absorbed_initial_state_is_a_config_error() {
        let grid = grid_1d(64);
        let config = SamplerConfig::new(1000, 0.001, Scheme::EulerMaruyama, vec![-1.0]);
        let mut rng = RngStream::new(3, 0);
        match run_qsd_trajectory(&ou_model(), &ou_absorbing(), &grid, &config, &mut rng) {
            Err(Error::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn killing_rate_from_constant_taus() {
        let s = KillingSample::new(vec![1.0, 1.0, 1.0], 0, 0);
        assert_eq!(estimate_killing_rate(&s).unwrap(), 1.0);
        let empty = KillingSample::new(vec![], 0, 0);
        assert!(matches!(
            estimate_killing_rate(&empty),
            Err(Error::NoKillingObserved)
        ));
    }

    #[test]
    fn killing_rate_recovers_exponential_rate() {
        let mut rng = RngStream::new(17, 0);
        let taus: Vec<f64> = (0..100_000)
            .map(|_| -(1.0 - rng.uniform()).ln() / 2.0)
            .collect();
        let s = KillingSample::new(taus, 0, 0);
        let rate = estimate_killing_rate(&s).unwrap();
        assert!((rate - 2.0).abs() < 0.02 * 2.0, "rate {rate}");
    }

    #[test]
    fn killing_rate_error_shrinks_with_samples() {
        let mut rng = RngStream::new(23, 0);
        let draw = |rng: &mut RngStream, n: usize| -> f64 {
            let taus: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln() / 2.0).collect();
            (estimate_killing_rate(&KillingSample::new(taus, 0, 0)).unwrap() - 2.0).abs()
        };
        let err_small = draw(&mut rng, 1_000);
        let err_large = draw(&mut rng, 100_000);
        assert!(err_large < err_small);
        assert!(err_large < 3.0 * 2.0 / (100_000f64).sqrt());
    }

    #[test]
    fn tail_acceptance_on_exponential_taus() {
        let mut rng = RngStream::new(29, 0);
        let taus: Vec<f64> = (0..100_000).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let s = KillingSample::new(taus, 0, 0);
        let times: Vec<f64> = (1..=8).map(|i| i as f64 * 0.5).collect();
        let ok = tail_acceptance(&s, 1.0, Some(&times)).unwrap();
        assert!(ok.accepted);
        let bad = tail_acceptance(&s, 2.0, Some(&times)).unwrap();
        assert!(!bad.accepted);
    }

    #[test]
    fn tail_acceptance_single_tau_is_vacuous() {
        let s = KillingSample::new(vec![0.5], 0, 0);
        let t = tail_acceptance(&s, 2.0, None).unwrap();
        assert!(t.accepted);
    }

    #[test]
    fn runs_are_reproducible() {
        let grid = grid_1d(32);
        let config = SamplerConfig::new(50_000, 0.001, Scheme::EulerMaruyama, vec![1.5]);
        let mut rng_a = RngStream::new(77, 5);
        let mut rng_b = RngStream::new(77, 5);
        let (da, sa) =
            run_qsd_trajectory(&ou_model(), &ou_absorbing(), &grid, &config, &mut rng_a).unwrap();
        let (db, sb) =
            run_qsd_trajectory(&ou_model(), &ou_absorbing(), &grid, &config, &mut rng_b).unwrap();
        assert_eq!(da.values(), db.values());
        assert_eq!(sa.taus(), sb.taus());
    }

    #[test]
    fn ensemble_merges_deterministically() {
        let grid = grid_1d(32);
        let config = SamplerConfig::new(60_000, 0.001, Scheme::EulerMaruyama, vec![1.5]);
        let run = || {
            run_qsd_ensemble(&ou_model(), &ou_absorbing(), &grid, &config, 13, 0, 4).unwrap()
        };
        let (da, sa) = run();
        let (db, sb) = run();
        assert_eq!(da.values(), db.values());
        assert_eq!(sa.taus(), sb.taus());
        assert_eq!(sa.total_steps(), 60_000);
    }

    struct RegenChecker {
        seen: Vec<Vec<f64>>,
        kills: usize,
        initial: Vec<f64>,
    }

    impl SampleObserver for RegenChecker {
        fn on_unabsorbed(&mut self, _step: u64, state: &[f64]) {
            self.seen.push(state.to_vec());
        }

        fn on_kill(&mut self, event: &KillEvent, regenerated: &[f64]) {
            assert!(event.tau > 0.0);
            let from_history = self.seen.iter().any(|s| s == regenerated);
            let from_initial = regenerated == self.initial;
            assert!(
                from_history || from_initial,
                "regenerated state not drawn from history"
            );
            self.kills += 1;
        }
    }

    #[test]
    fn regeneration_draws_from_stored_history() {
        // A tight absorbing band makes kills frequent.
        let spec = AbsorbingSpec::from_half_spaces(vec![
            HalfSpace::below(0, 1.0),
            HalfSpace::above(0, 2.5),
        ])
        .with_bridge(BridgePolicy::ConstantSigma);
        let grid = grid_1d(32);
        let config = SamplerConfig::new(30_000, 0.001, Scheme::EulerMaruyama, vec![1.5]);
        let mut rng = RngStream::new(41, 0);
        let mut checker = RegenChecker {
            seen: vec![],
            kills: 0,
            initial: vec![1.5],
        };
        run_qsd_trajectory_observed(&ou_model(), &spec, &grid, &config, &mut rng, &mut checker)
            .unwrap();
        assert!(checker.kills > 10, "only {} kills", checker.kills);
    }

    #[test]
    fn burn_in_discards_early_taus() {
        let spec = AbsorbingSpec::from_half_spaces(vec![
            HalfSpace::below(0, 1.0),
            HalfSpace::above(0, 2.5),
        ]);
        let grid = grid_1d(32);
        let mut with_burn = SamplerConfig::new(30_000, 0.001, Scheme::EulerMaruyama, vec![1.5]);
        with_burn.burn_in_fraction = 0.5;
        let mut without = with_burn.clone();
        without.burn_in_fraction = 0.0;
        let mut rng_a = RngStream::new(19, 0);
        let mut rng_b = RngStream::new(19, 0);
        let (_, sa) = run_qsd_trajectory(&ou_model(), &spec, &grid, &with_burn, &mut rng_a).unwrap();
        let (_, sb) = run_qsd_trajectory(&ou_model(), &spec, &grid, &without, &mut rng_b).unwrap();
        assert!(sa.len() < sb.len());
        assert_eq!(sa.burn_in_steps(), 15_000);
    }

    #[test]
    fn reflected_trajectory_matches_gibbs_density() {
        // dX = -V'(X) dt + sigma dW reflected at 0 has stationary density
        // proportional to exp(-2 V / sigma^2); for V = (x - 1)^2 restricted
        // to [0, 3] this is a truncated Gaussian.
        let sigma = 0.7;
        let model = SdeModel::new(
            1,
            "well",
            |x, o| o[0] = -2.0 * (x[0] - 1.0),
            move |_, o| o[0] = sigma,
        );
        let grid = grid_1d(64);
        let config = SamplerConfig::new(4_000_000, 0.001, Scheme::EulerMaruyama, vec![1.0]);
        let mut rng = RngStream::new(57, 0);
        let density =
            run_reflected_trajectory(&model, &[HalfSpace::below(0, 0.0)], &grid, &config, &mut rng)
                .unwrap();
        let h = grid.h(0);
        let unnorm: Vec<f64> = (0..64)
            .map(|i| {
                let x = grid.center(0, i);
                (-2.0 * (x - 1.0) * (x - 1.0) / (sigma * sigma)).exp()
            })
            .collect();
        let mass: f64 = unnorm.iter().sum::<f64>() * h;
        let rm = density.to_row_major();
        let l1: f64 = rm
            .iter()
            .zip(&unnorm)
            .map(|(a, b)| (a - b / mass).abs())
            .sum::<f64>()
            * h;
        assert!(l1 < 0.05, "L1 distance to Gibbs density {l1}");
    }
}
