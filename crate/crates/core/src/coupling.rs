//! Couplings of pairs of trajectories and the contraction rate they yield.
//!
//! Two copies of the same SDE are driven so that they meet in finite time:
//! reflection (or independent) coupling brings them close, and once the
//! pair is within a threshold a maximal coupling glues them with the best
//! possible one-step probability. The coupling times decay exponentially;
//! fitting that tail gives a rate `gamma`, and `alpha = e^{-gamma T}`
//! measures how much a time-`T` flow contracts the distance between two
//! distributions.

use crate::error::{Error, Result};
use crate::sampler::reflect;
use crate::sde::{em_step, NoiseIncrement, RngStream, SdeModel};
use crate::survival::{default_times, survival_points, SurvivalPoint};
use crate::absorption::HalfSpace;
use rayon::prelude::*;

/// Default cap on the half-width of the survival confidence band at the
/// fitted tail start; wider bands mean too few samples to trust the rate.
pub const DEFAULT_TAIL_WIDTH_CAP: f64 = 0.05;

/// Cap on acceptance-rejection retries inside one maximal coupling step.
const REJECTION_CAP: usize = 10_000_000;

/// How a pair is driven while the chains are farther apart than the
/// switching threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FarScheme {
    Reflection,
    Independent,
}

/// When to hand the pair over to the maximal coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// `2 sqrt(dt) ||sigma||` with the operator norm taken at the pair
    /// midpoint.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct CouplingConfig {
    pub scheme_far: FarScheme,
    pub threshold: ThresholdRule,
    pub max_steps: usize,
    pub dt: f64,
    pub horizon: f64,
}

impl CouplingConfig {
    pub fn new(dt: f64, horizon: f64) -> Self {
        CouplingConfig {
            scheme_far: FarScheme::Reflection,
            threshold: ThresholdRule::Auto,
            max_steps: 10_000_000,
            dt,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("step size {} must be positive", self.dt)));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!(
                "contraction horizon {} must be positive",
                self.horizon
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if let ThresholdRule::Fixed(t) = self.threshold {
            if !(t > 0.0) {
                return Err(Error::Config(format!(
                    "switching threshold {t} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Coupling times from an ensemble of pairs. Pairs that never met within
/// the step budget are counted as censored rather than discarded silently.
#[derive(Debug, Clone)]
pub struct CouplingSample {
    pub taus: Vec<f64>,
    pub censored: usize,
}

/// Solves the small dense system `m d = rhs` (dimension at most 3) by
/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_small(m: &[f64], rhs: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut a = m.to_vec();
    let mut b = rhs.to_vec();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..dim {
        let mut pivot_row = col;
        for r in col + 1..dim {
            if a[r * dim + col].abs() > a[pivot_row * dim + col].abs() {
                pivot_row = r;
            }
        }
        if a[pivot_row * dim + col].abs() <= 1e-14 * scale {
            return None;
        }
        if pivot_row != col {
            for c in 0..dim {
                a.swap(col * dim + c, pivot_row * dim + c);
            }
            b.swap(col, pivot_row);
        }
        let inv = 1.0 / a[col * dim + col];
        for r in col + 1..dim {
            let f = a[r * dim + col] * inv;
            if f == 0.0 {
                continue;
            }
            for c in col..dim {
                a[r * dim + c] -= f * a[col * dim + c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..dim).rev() {
        let mut acc = b[col];
        for c in col + 1..dim {
            acc -= a[col * dim + c] * b[c];
        }
        b[col] = acc / a[col * dim + col];
    }
    Some(b)
}

/// Operator 2-norm of a small matrix: square root of the largest
/// eigenvalue of `m^T m`, by deterministic power iteration.
fn operator_norm(m: &[f64], dim: usize) -> f64 {
    if dim == 1 {
        return m[0].abs();
    }
    let mut gram = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += m[k * dim + i] * m[k * dim + j];
            }
            gram[i * dim + j] = acc;
        }
    }
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut mv = vec![0.0; dim];
    for _ in 0..100 {
        for i in 0..dim {
            mv[i] = (0..dim).map(|j| gram[i * dim + j] * v[j]).sum();
        }
        let norm = mv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for i in 0..dim {
            v[i] = mv[i] / norm;
        }
    }
    let mut quad = 0.0;
    for i in 0..dim {
        quad += v[i] * (0..dim).map(|j| gram[i * dim + j] * v[j]).sum::<f64>();
    }
    quad.max(0.0).sqrt()
}

/// Advances `x` with increment `w` and `y` with the increment reflected
/// across the hyperplane orthogonal to the preconditioned separation
/// `sigma^{-1}(x - y)`; with an equal pair there is no such hyperplane and
/// the caller should have switched to the maximal coupling.
pub fn reflection_step(
    model: &SdeModel,
    x: &[f64],
    y: &[f64],
    w: &NoiseIncrement,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = model.dim();
    let mut diff = vec![0.0; dim];
    let mut all_zero = true;
    for i in 0..dim {
        diff[i] = x[i] - y[i];
        all_zero &= diff[i] == 0.0;
    }
    if all_zero {
        return Err(Error::DegenerateDirection);
    }
    let mut mid = vec![0.0; dim];
    for i in 0..dim {
        mid[i] = 0.5 * (x[i] + y[i]);
    }
    let mut sigma = vec![0.0; dim * dim];
    model.eval_diffusion(&mid, &mut sigma);
    // Direction e = sigma^{-1}(x - y), normalized; if sigma is singular at
    // the midpoint, reflect across the plain separation instead.
    let mut e = solve_small(&sigma, &diff, dim).unwrap_or(diff);
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateDirection);
    }
    for v in e.iter_mut() {
        *v /= norm;
    }
    let dot: f64 = e.iter().zip(w.values()).map(|(a, b)| a * b).sum();
    let reflected_values: Vec<f64> = w
        .values()
        .iter()
        .zip(&e)
        .map(|(wi, ei)| wi - 2.0 * dot * ei)
        .collect();
    let reflected = NoiseIncrement::new(w.dt(), reflected_values);
    let xn = em_step(model, x, w)?;
    let yn = em_step(model, y, &reflected)?;
    Ok((xn, yn))
}

/// Advances both chains with independent increments.
pub fn independent_step(
    model: &SdeModel,
    x: &[f64],
    y: &[f64],
    dt: f64,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let wx = rng.sample_increment(dt, model.dim());
    let wy = rng.sample_increment(dt, model.dim());
    let xn = em_step(model, x, &wx)?;
    let yn = em_step(model, y, &wy)?;
    Ok((xn, yn))
}

/// A distribution a chain can take one step from: sampling plus density
/// evaluation, which is everything the maximal coupling needs.
pub trait StepDensity {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut RngStream, out: &mut [f64]);
    fn pdf(&self, z: &[f64]) -> f64;
}

/// Gaussian one-step law of an Euler-Maruyama update: mean `x + f(x) dt`,
/// covariance `dt sigma sigma^T`.
#[derive(Debug, Clone)]
pub struct GaussianStepDensity {
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl GaussianStepDensity {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(Error::Config(format!(
                "covariance of {} entries for dimension {}",
                cov.len(),
                dim
            )));
        }
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut acc = cov[i * dim + j];
                for k in 0..j {
                    acc -= chol[i * dim + k] * chol[j * dim + k];
                }
                if i == j {
                    if !(acc > 0.0) {
                        return Err(Error::Config(
                            "one-step covariance is not positive definite".into(),
                        ));
                    }
                    chol[i * dim + j] = acc.sqrt();
                } else {
                    chol[i * dim + j] = acc / chol[j * dim + j];
                }
            }
        }
        let mut log_det_l = 0.0;
        for i in 0..dim {
            log_det_l += chol[i * dim + i].ln();
        }
        let log_norm = -(dim as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln() - log_det_l;
        Ok(GaussianStepDensity {
            mean,
            chol,
            log_norm,
        })
    }

    /// The Euler-Maruyama transition density out of state `x`.
    pub fn one_step(model: &SdeModel, x: &[f64], dt: f64) -> Result<Self> {
        let dim = model.dim();
        let mut f = vec![0.0; dim];
        let mut sigma = vec![0.0; dim * dim];
        model.eval_drift(x, &mut f);
        model.eval_diffusion(x, &mut sigma);
        let mean: Vec<f64> = (0..dim).map(|i| x[i] + f[i] * dt).collect();
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += sigma[i * dim + k] * sigma[j * dim + k];
                }
                cov[i * dim + j] = dt * acc;
            }
        }
        GaussianStepDensity::new(mean, cov)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

impl StepDensity for GaussianStepDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut RngStream, out: &mut [f64]) {
        let dim = self.mean.len();
        let mut g = vec![0.0; dim];
        for v in g.iter_mut() {
            *v = rng.normal();
        }
        for i in 0..dim {
            let mut acc = self.mean[i];
            for k in 0..=i {
                acc += self.chol[i * dim + k] * g[k];
            }
            out[i] = acc;
        }
    }

    fn pdf(&self, z: &[f64]) -> f64 {
        let dim = self.mean.len();
        // Forward-substitute L q = z - mean and take ||q||^2.
        let mut q = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = z[i] - self.mean[i];
            for k in 0..i {
                acc -= self.chol[i * dim + k] * q[k];
            }
            q[i] = acc / self.chol[i * dim + i];
        }
        let quad: f64 = q.iter().map(|v| v * v).sum();
        (self.log_norm - 0.5 * quad).exp()
    }
}

/// One maximal-coupling step: draw the first chain's move, accept it for
/// the second chain with probability `min(1, p_y/p_x)`; on rejection,
/// resample the second chain from the part of its law the first does not
/// cover. Returns the new pair and whether they glued.
pub fn maximal_coupling_step(
    density_x: &impl StepDensity,
    density_y: &impl StepDensity,
    rng: &mut RngStream,
    rejection_cap: usize,
) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    let dim = density_x.dim();
    let mut xn = vec![0.0; dim];
    density_x.sample(rng, &mut xn);
    let r = rng.uniform() * density_x.pdf(&xn);
    if r < density_y.pdf(&xn) {
        let yn = xn.clone();
        return Ok((xn, yn, true));
    }
    let mut yn = vec![0.0; dim];
    for _ in 0..rejection_cap {
        density_y.sample(rng, &mut yn);
        let r2 = rng.uniform() * density_y.pdf(&yn);
        if r2 >= density_x.pdf(&yn) {
            return Ok((xn, yn, false));
        }
    }
    Err(Error::LoopOverflow(rejection_cap))
}

fn pair_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn switch_threshold(model: &SdeModel, config: &CouplingConfig, x: &[f64], y: &[f64]) -> f64 {
    match config.threshold {
        ThresholdRule::Fixed(t) => t,
        ThresholdRule::Auto => {
            let dim = model.dim();
            let mut mid = vec![0.0; dim];
            for i in 0..dim {
                mid[i] = 0.5 * (x[i] + y[i]);
            }
            let mut sigma = vec![0.0; dim * dim];
            model.eval_diffusion(&mid, &mut sigma);
            2.0 * config.dt.sqrt() * operator_norm(&sigma, dim)
        }
    }
}

fn run_pair(
    model: &SdeModel,
    mirrors: &[HalfSpace],
    config: &CouplingConfig,
    x0: &[f64],
    y0: &[f64],
    rng: &mut RngStream,
) -> Result<Option<f64>> {
    if x0 == y0 {
        return Ok(Some(0.0));
    }
    let dim = model.dim();
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    for n in 0..config.max_steps {
        let close = pair_distance(&x, &y) <= switch_threshold(model, config, &x, &y);
        let (mut xn, mut yn, coupled) = if close {
            let dx = GaussianStepDensity::one_step(model, &x, config.dt)?;
            let dy = GaussianStepDensity::one_step(model, &y, config.dt)?;
            maximal_coupling_step(&dx, &dy, rng, REJECTION_CAP)?
        } else {
            let (xn, yn) = match config.scheme_far {
                FarScheme::Reflection => {
                    let w = rng.sample_increment(config.dt, dim);
                    reflection_step(model, &x, &y, &w)?
                }
                FarScheme::Independent => independent_step(model, &x, &y, config.dt, rng)?,
            };
            (xn, yn, false)
        };
        reflect(mirrors, &mut xn);
        reflect(mirrors, &mut yn);
        if coupled {
            return Ok(Some((n + 1) as f64 * config.dt));
        }
        x = xn;
        y = yn;
    }
    Ok(None)
}

/// Collects coupling times for `n_samples` independent pairs started at
/// `(x0, y0)`. `mirrors` give the modified chain's reflecting boundaries,
/// applied to each marginal after every step. Samples run in parallel on
/// streams `base_stream..base_stream + n_samples` of `seed`, so results
/// depend only on the arguments.
pub fn estimate_coupling_times(
    model: &SdeModel,
    mirrors: &[HalfSpace],
    config: &CouplingConfig,
    x0: &[f64],
    y0: &[f64],
    n_samples: usize,
    seed: u64,
    base_stream: u64,
) -> Result<CouplingSample> {
    config.validate()?;
    if x0.len() != model.dim() || y0.len() != model.dim() {
        return Err(Error::Config(format!(
            "start states of dimension {} and {} for a model of dimension {}",
            x0.len(),
            y0.len(),
            model.dim()
        )));
    }
    let results: Vec<Result<Option<f64>>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, base_stream + i as u64);
            run_pair(model, mirrors, config, x0, y0, &mut rng)
        })
        .collect();
    let mut taus = Vec::with_capacity(n_samples);
    let mut censored = 0;
    for r in results {
        match r? {
            Some(tau) => taus.push(tau),
            None => censored += 1,
        }
    }
    Ok(CouplingSample { taus, censored })
}

/// Exponential tail fitted to the survival curve of coupling times.
#[derive(Debug, Clone)]
pub struct TailFit {
    pub gamma: f64,
    pub intercept: f64,
    pub t_start: f64,
    pub width_at_start: f64,
    pub accepted: bool,
    pub points: Vec<SurvivalPoint>,
}

/// Fits `C e^{-gamma t}` to the survival curve of the coupling times,
/// starting from the earliest grid time at which a single exponential
/// stays inside every confidence band from there on. The fit is accepted
/// when the band at the tail start is narrower than `width_cap`.
pub fn fit_exponential_tail(
    sample: &CouplingSample,
    times: Option<&[f64]>,
    width_cap: f64,
) -> Result<TailFit> {
    if sample.taus.len() < 100 {
        return Err(Error::FitRejected(format!(
            "{} uncensored coupling times; at least 100 are needed",
            sample.taus.len()
        )));
    }
    let default_grid;
    let grid = match times {
        Some(t) => t,
        None => {
            default_grid = default_times(&sample.taus, 12);
            &default_grid
        }
    };
    let points = survival_points(&sample.taus, grid);
    for i0 in 0..points.len() {
        let tail = &points[i0..];
        let obs: Vec<(f64, f64)> = tail
            .iter()
            .filter(|p| p.survival > 0.0)
            .map(|p| (p.t, p.survival.ln()))
            .collect();
        if obs.len() < 2 {
            break;
        }
        let n = obs.len() as f64;
        let st: f64 = obs.iter().map(|(t, _)| t).sum();
        let sy: f64 = obs.iter().map(|(_, y)| y).sum();
        let stt: f64 = obs.iter().map(|(t, _)| t * t).sum();
        let sty: f64 = obs.iter().map(|(t, y)| t * y).sum();
        let denom = n * stt - st * st;
        if denom <= 0.0 {
            continue;
        }
        let slope = (n * sty - st * sy) / denom;
        let intercept = (sy - slope * st) / n;
        let gamma = -slope;
        if !(gamma > 0.0) {
            continue;
        }
        let c = intercept.exp();
        let inside = tail.iter().all(|p| {
            let fitted = c * (-gamma * p.t).exp();
            p.lower <= fitted && fitted <= p.upper
        });
        if inside {
            let width = tail[0].width();
            return Ok(TailFit {
                gamma,
                intercept: c,
                t_start: tail[0].t,
                width_at_start: width,
                accepted: width <= width_cap,
                points,
            });
        }
    }
    Err(Error::FitRejected(
        "no tail start admits a single exponential inside all confidence bands".into(),
    ))
}

/// Contraction factor of the time-`horizon` flow, `alpha = e^{-gamma T}`.
pub fn contraction_alpha(fit: &TailFit, horizon: f64) -> Result<f64> {
    if !fit.accepted {
        return Err(Error::FitRejected(
            "tail fit was not accepted; collect more coupling times".into(),
        ));
    }
    if !(fit.gamma > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidContraction {
            gamma: fit.gamma,
            horizon,
        });
    }
    Ok((-fit.gamma * horizon).exp())
}
